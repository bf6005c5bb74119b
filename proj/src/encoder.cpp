#include "mvr/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace mvr {

std::string to_string(ViewMode mode) {
  return mode == ViewMode::viewer_tokens ? "viewer_tokens" : "first_k";
}

ViewMode parse_view_mode(std::string_view text) {
  if (text == "viewer_tokens" || text == "viewers") return ViewMode::viewer_tokens;
  if (text == "first_k") return ViewMode::first_k;
  throw std::invalid_argument("unknown view mode: " + std::string(text));
}

void EncoderConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("encoder config: d_model (" + std::to_string(d_model) +
                                ") must be a positive multiple of n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (n_viewers < 1) throw std::invalid_argument("encoder config: n_viewers must be >= 1");
  if (!(viewer_init_scale > 0.0)) throw std::invalid_argument("encoder config: viewer_init_scale must be > 0");
  if (!(attention_init_scale > 0.0)) throw std::invalid_argument("encoder config: attention_init_scale must be > 0");
  if (d_ff == 0) throw std::invalid_argument("encoder config: d_ff must be > 0");
  if (n_layers < 1) throw std::invalid_argument("encoder config: n_layers must be >= 1");
  if (max_len < n_viewers + 1) throw std::invalid_argument("encoder config: max_len must exceed n_viewers");
  if (vocab_size <= static_cast<std::size_t>(doc_viewer_token_id(n_viewers - 1))) {
    throw std::invalid_argument("encoder config: vocab_size too small for the viewer tokens");
  }
}

namespace {

template <typename Params, typename Fn>
void visit_layer(Params& layer, const std::string& prefix, Fn& fn) {
  fn(prefix + "wq", layer.wq);
  fn(prefix + "bq", layer.bq);
  fn(prefix + "wk", layer.wk);
  fn(prefix + "bk", layer.bk);
  fn(prefix + "wv", layer.wv);
  fn(prefix + "bv", layer.bv);
  fn(prefix + "wo", layer.wo);
  fn(prefix + "bo", layer.bo);
  fn(prefix + "ln1_gain", layer.ln1_gain);
  fn(prefix + "ln1_bias", layer.ln1_bias);
  fn(prefix + "w1", layer.w1);
  fn(prefix + "b1", layer.b1);
  fn(prefix + "w2", layer.w2);
  fn(prefix + "b2", layer.b2);
  fn(prefix + "ln2_gain", layer.ln2_gain);
  fn(prefix + "ln2_bias", layer.ln2_bias);
}

template <typename Params, typename Fn>
void visit_all(Params& params, Fn& fn) {
  const bool tied = params.towers.size() == 1;
  for (std::size_t t = 0; t < params.towers.size(); ++t) {
    auto& tower = params.towers[t];
    const std::string prefix = tied ? "shared." : (t == 0 ? "query." : "doc.");
    fn(prefix + "token_embedding", tower.token_embedding);
    fn(prefix + "position_embedding", tower.position_embedding);
    for (std::size_t l = 0; l < tower.layers.size(); ++l) {
      visit_layer(tower.layers[l], prefix + "layers." + std::to_string(l) + ".", fn);
    }
  }
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = dist(rng);
  return m;
}

// Row-wise layer norm over the first out.rows() rows; keeps the normalized
// values and reciprocal std for the backward pass.
void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix& norm,
                std::vector<double>& rstd, Matrix& out) {
  const std::size_t n = x.cols();
  norm = Matrix(x.rows(), n);
  out = Matrix(x.rows(), n);
  rstd.assign(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * rs;
      norm(r, c) = h;
      out(r, c) = gain.data()[c] * h + bias.data()[c];
    }
  }
}

Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& norm, const std::vector<double>& rstd,
                           const Matrix& gain, Matrix& gain_grad, Matrix& bias_grad) {
  const std::size_t n = grad_out.cols();
  Matrix grad_in(grad_out.rows(), n);
  std::vector<double> gnorm(n);
  for (std::size_t r = 0; r < grad_out.rows(); ++r) {
    double mean_g = 0.0;
    double mean_gh = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double g = grad_out(r, c);
      gain_grad.data()[c] += g * norm(r, c);
      bias_grad.data()[c] += g;
      gnorm[c] = g * gain.data()[c];
      mean_g += gnorm[c];
      mean_gh += gnorm[c] * norm(r, c);
    }
    mean_g /= static_cast<double>(n);
    mean_gh /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) {
      grad_in(r, c) = rstd[r] * (gnorm[c] - mean_g - norm(r, c) * mean_gh);
    }
  }
  return grad_in;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix layer_forward(const LayerParams& p, const EncoderConfig& cfg, const Matrix& x,
                     const std::vector<char>& key_valid, std::size_t out_rows, LayerCache& c) {
  const std::size_t len = x.rows();
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  c.out_rows = out_rows;
  c.input = x;
  Matrix xm = out_rows == len ? x : x.top_rows(out_rows);
  matmul(xm, p.wq, c.q);
  add_row_bias(c.q, p.bq);
  matmul(x, p.wk, c.k);
  add_row_bias(c.k, p.bk);
  matmul(x, p.wv, c.v);
  add_row_bias(c.v, p.bv);

  c.attn = Matrix(out_rows, d);
  c.probs.assign(cfg.n_heads, Matrix(out_rows, len));
  std::vector<double> logits(len);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    Matrix& prob = c.probs[h];
    for (std::size_t i = 0; i < out_rows; ++i) {
      const double* qi = &c.q(i, off);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        if (!key_valid[j]) continue;
        const double* kj = &c.k(j, off);
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
        logits[j] = s * scale;
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        if (!key_valid[j]) continue;
        const double e = std::exp(logits[j] - mx);
        prob(i, j) = e;
        z += e;
      }
      double* ai = &c.attn(i, off);
      for (std::size_t j = 0; j < len; ++j) {
        if (!key_valid[j]) continue;
        prob(i, j) /= z;
        const double pj = prob(i, j);
        const double* vj = &c.v(j, off);
        for (std::size_t e = 0; e < dh; ++e) ai[e] += pj * vj[e];
      }
    }
  }

  Matrix residual;
  matmul(c.attn, p.wo, residual);
  add_row_bias(residual, p.bo);
  for (std::size_t i = 0; i < residual.size(); ++i) residual.data()[i] += xm.data()[i];
  layer_norm(residual, p.ln1_gain, p.ln1_bias, c.ln1_norm, c.ln1_rstd, c.hidden1);

  matmul(c.hidden1, p.w1, c.ff_pre);
  add_row_bias(c.ff_pre, p.b1);
  c.ff_act = Matrix(c.ff_pre.rows(), c.ff_pre.cols());
  for (std::size_t i = 0; i < c.ff_pre.size(); ++i) c.ff_act.data()[i] = gelu(c.ff_pre.data()[i]);
  Matrix residual2;
  matmul(c.ff_act, p.w2, residual2);
  add_row_bias(residual2, p.b2);
  for (std::size_t i = 0; i < residual2.size(); ++i) residual2.data()[i] += c.hidden1.data()[i];
  Matrix out;
  layer_norm(residual2, p.ln2_gain, p.ln2_bias, c.ln2_norm, c.ln2_rstd, out);
  return out;
}

// Returns the gradient w.r.t. the layer input (all L rows).
Matrix layer_backward(const LayerParams& p, const EncoderConfig& cfg, const LayerCache& c,
                      const std::vector<char>& key_valid, const Matrix& grad_out, LayerParams& g) {
  const std::size_t len = c.input.rows();
  const std::size_t m = c.out_rows;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix d_res2 = layer_norm_backward(grad_out, c.ln2_norm, c.ln2_rstd, p.ln2_gain, g.ln2_gain, g.ln2_bias);
  matmul_tn_acc(c.ff_act, d_res2, g.w2);
  accumulate_col_sums(d_res2, g.b2);
  Matrix d_act;
  matmul_nt(d_res2, p.w2, d_act);
  for (std::size_t i = 0; i < d_act.size(); ++i) d_act.data()[i] *= gelu_grad(c.ff_pre.data()[i]);
  matmul_tn_acc(c.hidden1, d_act, g.w1);
  accumulate_col_sums(d_act, g.b1);
  Matrix d_hidden1 = d_res2;
  matmul_nt(d_act, p.w1, d_hidden1, /*accumulate=*/true);

  Matrix d_res1 = layer_norm_backward(d_hidden1, c.ln1_norm, c.ln1_rstd, p.ln1_gain, g.ln1_gain, g.ln1_bias);
  Matrix d_input(len, cfg.d_model);
  for (std::size_t i = 0; i < d_res1.size(); ++i) d_input.data()[i] = d_res1.data()[i];

  matmul_tn_acc(c.attn, d_res1, g.wo);
  accumulate_col_sums(d_res1, g.bo);
  Matrix d_attn;
  matmul_nt(d_res1, p.wo, d_attn);

  Matrix d_q(m, cfg.d_model);
  Matrix d_k(len, cfg.d_model);
  Matrix d_v(len, cfg.d_model);
  std::vector<double> d_prob(len);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    const Matrix& prob = c.probs[h];
    for (std::size_t i = 0; i < m; ++i) {
      const double* dai = &d_attn(i, off);
      double weighted = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        if (!key_valid[j]) continue;
        const double* vj = &c.v(j, off);
        double* dvj = &d_v(j, off);
        const double pj = prob(i, j);
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) {
          s += dai[e] * vj[e];
          dvj[e] += pj * dai[e];
        }
        d_prob[j] = s;
        weighted += pj * s;
      }
      const double* qi = &c.q(i, off);
      double* dqi = &d_q(i, off);
      for (std::size_t j = 0; j < len; ++j) {
        if (!key_valid[j]) continue;
        const double ds = prob(i, j) * (d_prob[j] - weighted) * scale;
        const double* kj = &c.k(j, off);
        double* dkj = &d_k(j, off);
        for (std::size_t e = 0; e < dh; ++e) {
          dqi[e] += ds * kj[e];
          dkj[e] += ds * qi[e];
        }
      }
    }
  }

  Matrix xm = m == len ? c.input : c.input.top_rows(m);
  matmul_tn_acc(xm, d_q, g.wq);
  accumulate_col_sums(d_q, g.bq);
  Matrix d_xm;
  matmul_nt(d_q, p.wq, d_xm);
  for (std::size_t i = 0; i < d_xm.size(); ++i) d_input.data()[i] += d_xm.data()[i];

  matmul_tn_acc(c.input, d_k, g.wk);
  accumulate_col_sums(d_k, g.bk);
  matmul_nt(d_k, p.wk, d_input, /*accumulate=*/true);
  matmul_tn_acc(c.input, d_v, g.wv);
  accumulate_col_sums(d_v, g.bv);
  matmul_nt(d_v, p.wv, d_input, /*accumulate=*/true);
  return d_input;
}

void check_sequence(const EncoderConfig& cfg, const TokenSequence& seq) {
  if (seq.ids.size() != seq.positions.size()) {
    throw std::invalid_argument("token sequence: ids and positions differ in length");
  }
  if (seq.n_views == 0 || seq.ids.size() < seq.n_views) {
    throw std::invalid_argument("token sequence: shorter than its view prefix");
  }
  if (seq.ids.size() > cfg.max_len) throw std::invalid_argument("token sequence: longer than max_len");
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.ids[i] < 0 || static_cast<std::size_t>(seq.ids[i]) >= cfg.vocab_size) {
      throw std::invalid_argument("token sequence: id out of vocabulary range");
    }
    if (seq.positions[i] < 0 || static_cast<std::size_t>(seq.positions[i]) >= cfg.max_len) {
      throw std::invalid_argument("token sequence: position out of range");
    }
  }
}

void check_doc_prefix(const EncoderConfig& cfg, const TokenSequence& seq) {
  if (seq.n_views != cfg.n_viewers) {
    throw std::invalid_argument("forward_doc: sequence has " + std::to_string(seq.n_views) +
                                " views, encoder expects " + std::to_string(cfg.n_viewers));
  }
  check_sequence(cfg, seq);
  if (cfg.view_mode == ViewMode::viewer_tokens) {
    for (std::size_t i = 0; i < cfg.n_viewers; ++i) {
      if (seq.ids[i] != doc_viewer_token_id(i) || seq.positions[i] != 0) {
        throw std::invalid_argument("forward_doc: sequence lacks the viewer token prefix");
      }
    }
  } else if (seq.ids[0] != kQueryViewerId || seq.positions[0] != 0) {
    throw std::invalid_argument("forward_doc: first-k sequence must start with [VIE_0]");
  }
}

void check_query_prefix(const EncoderConfig& cfg, const TokenSequence& seq) {
  if (seq.n_views != 1) throw std::invalid_argument("forward_query: queries carry exactly one view");
  check_sequence(cfg, seq);
  if (seq.ids[0] != kQueryViewerId || seq.positions[0] != 0) {
    throw std::invalid_argument("forward_query: sequence lacks the [VIE_0] prefix");
  }
}

}  // namespace

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor(*this, [&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

void for_each_tensor(EncoderParams& params, const std::function<void(const std::string&, Matrix&)>& fn) {
  visit_all(params, fn);
}

void for_each_tensor(const EncoderParams& params,
                     const std::function<void(const std::string&, const Matrix&)>& fn) {
  visit_all(params, fn);
}

EncoderParams init_params(const EncoderConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t d = cfg.d_model;
  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(d));
  TowerParams tower;
  tower.token_embedding = random_matrix(rng, cfg.vocab_size, d, emb_scale);
  tower.position_embedding = random_matrix(rng, cfg.max_len, d, emb_scale);
  for (std::size_t v = 0; v <= cfg.n_viewers; ++v) {
    for (double& x : tower.token_embedding.row(static_cast<std::size_t>(viewer_token_id(v)))) x *= cfg.viewer_init_scale;
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams p;
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double ff_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    p.wq = random_matrix(rng, d, d, in_scale * cfg.attention_init_scale);
    p.wk = random_matrix(rng, d, d, in_scale * cfg.attention_init_scale);
    p.wv = random_matrix(rng, d, d, in_scale);
    p.wo = random_matrix(rng, d, d, in_scale);
    p.bq = p.bk = p.bv = p.bo = Matrix(1, d);
    p.ln1_gain = Matrix(1, d, 1.0);
    p.ln1_bias = Matrix(1, d);
    p.w1 = random_matrix(rng, d, cfg.d_ff, in_scale);
    p.b1 = Matrix(1, cfg.d_ff);
    p.w2 = random_matrix(rng, cfg.d_ff, d, ff_scale);
    p.b2 = Matrix(1, d);
    p.ln2_gain = Matrix(1, d, 1.0);
    p.ln2_bias = Matrix(1, d);
    tower.layers.push_back(std::move(p));
  }
  EncoderParams params;
  params.config = cfg;
  params.towers.push_back(tower);
  if (!cfg.tied) params.towers.push_back(std::move(tower));
  return params;
}

EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams out = params;
  for_each_tensor(out, [](const std::string&, Matrix& m) { m.set_zero(); });
  return out;
}

Matrix encode_views(const TowerParams& tower, const EncoderConfig& cfg, const TokenSequence& seq,
                    ForwardCache* cache) {
  const std::size_t len = seq.ids.size();
  const std::size_t d = cfg.d_model;
  Matrix x(len, d);
  for (std::size_t r = 0; r < len; ++r) {
    auto tok = tower.token_embedding.row(static_cast<std::size_t>(seq.ids[r]));
    auto pos = tower.position_embedding.row(static_cast<std::size_t>(seq.positions[r]));
    auto row = x.row(r);
    for (std::size_t c = 0; c < d; ++c) row[c] = tok[c] + pos[c];
  }
  std::vector<char> key_valid(len);
  for (std::size_t r = 0; r < len; ++r) key_valid[r] = seq.ids[r] != kPadId;

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.clear();
  c.layers.resize(tower.layers.size());
  for (std::size_t l = 0; l < tower.layers.size(); ++l) {
    // Only the view rows of the last layer are ever read.
    const std::size_t rows = l + 1 == tower.layers.size() ? seq.n_views : len;
    x = layer_forward(tower.layers[l], cfg, x, key_valid, rows, c.layers[l]);
  }
  if (cache) {
    c.ids = seq.ids;
    c.positions = seq.positions;
    c.key_valid = std::move(key_valid);
    c.ready = true;
  }
  return x;
}

void backward_views(const TowerParams& tower, const EncoderConfig& cfg, const ForwardCache& cache,
                    const Matrix& grad_views, TowerParams& grads) {
  if (!cache.ready || cache.layers.size() != tower.layers.size()) {
    throw std::logic_error("backward: no cached forward pass");
  }
  if (grad_views.rows() != cache.layers.back().out_rows || grad_views.cols() != cfg.d_model) {
    throw std::invalid_argument("backward: gradient shape does not match the cached views");
  }
  Matrix grad = grad_views;
  for (std::size_t l = tower.layers.size(); l-- > 0;) {
    grad = layer_backward(tower.layers[l], cfg, cache.layers[l], cache.key_valid, grad, grads.layers[l]);
  }
  for (std::size_t r = 0; r < cache.ids.size(); ++r) {
    auto g = grad.row(r);
    auto tok = grads.token_embedding.row(static_cast<std::size_t>(cache.ids[r]));
    auto pos = grads.position_embedding.row(static_cast<std::size_t>(cache.positions[r]));
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      tok[c] += g[c];
      pos[c] += g[c];
    }
  }
}

MultiViewEmbedding forward_doc(const EncoderParams& params, const TokenSequence& seq, ForwardCache* cache) {
  check_doc_prefix(params.config, seq);
  return {encode_views(params.doc_tower(), params.config, seq, cache)};
}

MultiViewEmbedding forward_query(const EncoderParams& params, const TokenSequence& seq, ForwardCache* cache) {
  check_query_prefix(params.config, seq);
  return {encode_views(params.query_tower(), params.config, seq, cache)};
}

void backward_doc(const EncoderParams& params, const ForwardCache& cache, const Matrix& grad_views,
                  EncoderParams& grads) {
  backward_views(params.doc_tower(), params.config, cache, grad_views, grads.doc_tower());
}

void backward_query(const EncoderParams& params, const ForwardCache& cache, const Matrix& grad_views,
                    EncoderParams& grads) {
  backward_views(params.query_tower(), params.config, cache, grad_views, grads.query_tower());
}

TokenSequence encode_document(const Passage& p, const Vocab& vocab, const EncoderConfig& cfg) {
  if (cfg.view_mode == ViewMode::first_k) return encode_document_first_k(p, vocab, cfg.n_viewers, cfg.max_len);
  return encode_document_tokens(p, vocab, cfg.n_viewers, cfg.max_len);
}

TokenSequence encode_query(std::string_view query, const Vocab& vocab, const EncoderConfig& cfg) {
  return encode_query_tokens(query, vocab, cfg.max_len);
}

}  // namespace mvr
