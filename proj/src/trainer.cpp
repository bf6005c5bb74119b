#include "mvr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_set>

namespace mvr {

using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

std::vector<Matrix*> tensor_list(EncoderParams& p) {
  std::vector<Matrix*> out;
  for_each_tensor(p, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> tensor_list(const EncoderParams& p) {
  std::vector<const Matrix*> out;
  for_each_tensor(p, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

}  // namespace

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "adam") return OptimizerKind::adam;
  if (text == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer: " + std::string(text));
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (in_batch_negatives && batch_size < 2) {
    throw std::invalid_argument("train config: batch_size must be >= 2 with in-batch negatives");
  }
  if (!in_batch_negatives && hard_negatives_per_query == 0) {
    throw std::invalid_argument("train config: no negatives (in-batch negatives off and no hard negatives)");
  }
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning_rate must be >= 0");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("train config: grad_clip must be >= 0");
  loss.validate();
}

json to_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model},   {"n_heads", c.n_heads},   {"d_ff", c.d_ff},
          {"n_viewers", c.n_viewers}, {"max_len", c.max_len}, {"vocab_size", c.vocab_size},
          {"n_layers", c.n_layers}, {"seed", c.seed},         {"tied", c.tied},
          {"viewer_init_scale", c.viewer_init_scale},
          {"attention_init_scale", c.attention_init_scale},
          {"view_mode", to_string(c.view_mode)}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_viewers = j.at("n_viewers").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.tied = j.at("tied").get<bool>();
  c.viewer_init_scale = j.at("viewer_init_scale").get<double>();
  c.attention_init_scale = j.at("attention_init_scale").get<double>();
  c.view_mode = parse_view_mode(j.at("view_mode").get<std::string>());
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"optimizer", to_string(c.optimizer)},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"in_batch_negatives", c.in_batch_negatives},
          {"hard_negatives_per_query", c.hard_negatives_per_query},
          {"seed", c.seed},
          {"grad_clip", c.grad_clip},
          {"lambda", c.loss.lambda},
          {"alpha", c.loss.alpha},
          {"tau_floor", c.loss.tau_floor},
          {"tau_mode", to_string(c.loss.tau_mode)},
          {"fixed_tau", c.loss.fixed_tau}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.in_batch_negatives = j.at("in_batch_negatives").get<bool>();
  c.hard_negatives_per_query = j.at("hard_negatives_per_query").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.loss.lambda = j.at("lambda").get<double>();
  c.loss.alpha = j.at("alpha").get<double>();
  c.loss.tau_floor = j.at("tau_floor").get<double>();
  c.loss.tau_mode = parse_tau_mode(j.at("tau_mode").get<std::string>());
  c.loss.fixed_tau = j.at("fixed_tau").get<double>();
  return c;
}

json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"tau", m.tau}, {"mean_loss", m.mean_loss}, {"mean_local_loss", m.mean_local_loss}};
}

std::vector<std::size_t> epoch_order(std::size_t n_examples, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, epoch, ~0ULL));
  for (std::size_t i = n_examples; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

TrainBatch build_batch(std::span<const TrainExample> examples, std::span<const std::size_t> batch_examples,
                       const Corpus& corpus, const TrainConfig& cfg, std::uint64_t rng_seed) {
  cfg.validate();
  std::mt19937_64 rng(rng_seed);
  TrainBatch batch;
  std::unordered_map<std::size_t, std::size_t> slot;
  auto doc_slot = [&](std::size_t corpus_index) {
    auto [it, inserted] = slot.emplace(corpus_index, batch.docs.size());
    if (inserted) batch.docs.push_back(corpus_index);
    return it->second;
  };

  std::vector<std::vector<std::size_t>> hard(batch_examples.size());
  for (std::size_t b = 0; b < batch_examples.size(); ++b) {
    const auto& ex = examples[batch_examples[b]];
    if (ex.positive_ids.empty()) throw std::invalid_argument("build_batch: example without positive");
    batch.examples.push_back(batch_examples[b]);
    batch.positive.push_back(doc_slot(corpus.index_of(ex.positive_ids.front())));
  }
  for (std::size_t b = 0; b < batch_examples.size(); ++b) {
    const auto& ex = examples[batch_examples[b]];
    if (ex.negative_ids.size() < cfg.hard_negatives_per_query) {
      throw std::invalid_argument("build_batch: \"" + ex.query + "\" has " +
                                  std::to_string(ex.negative_ids.size()) + " hard negatives, " +
                                  std::to_string(cfg.hard_negatives_per_query) + " requested");
    }
    std::vector<std::size_t> pick(ex.negative_ids.size());
    for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
    for (std::size_t i = 0; i < cfg.hard_negatives_per_query; ++i) {
      std::swap(pick[i], pick[i + rng() % (pick.size() - i)]);
    }
    for (std::size_t i = 0; i < cfg.hard_negatives_per_query; ++i) {
      hard[b].push_back(doc_slot(corpus.index_of(ex.negative_ids[pick[i]])));
    }
  }

  for (std::size_t b = 0; b < batch_examples.size(); ++b) {
    const auto& ex = examples[batch_examples[b]];
    std::unordered_set<std::size_t> own;
    for (const auto& id : ex.positive_ids) {
      if (auto idx = corpus.find(id)) {
        if (auto it = slot.find(*idx); it != slot.end()) own.insert(it->second);
      }
    }
    std::vector<std::size_t> negs;
    std::unordered_set<std::size_t> seen;
    auto add = [&](std::size_t s) {
      if (!own.count(s) && seen.insert(s).second) negs.push_back(s);
    };
    if (cfg.in_batch_negatives) {
      for (std::size_t o = 0; o < batch_examples.size(); ++o) {
        if (o != b) add(batch.positive[o]);
      }
    }
    for (auto s : hard[b]) add(s);
    batch.negatives.push_back(std::move(negs));
  }
  return batch;
}

Trainer::Trainer(const Corpus& corpus, std::vector<TrainExample> examples, const Vocab& vocab,
                 const EncoderConfig& encoder_cfg, TrainConfig cfg)
    : corpus_(corpus),
      examples_(std::move(examples)),
      encoder_cfg_(encoder_cfg),
      cfg_(std::move(cfg)),
      schedule_(cfg_.loss) {
  encoder_cfg_.validate();
  cfg_.validate();
  if (examples_.empty()) throw std::invalid_argument("trainer: no training examples");
  if (encoder_cfg_.vocab_size != vocab.size()) {
    throw std::invalid_argument("trainer: encoder vocab_size does not match the vocabulary");
  }
  doc_tokens_.reserve(corpus_.size());
  for (const auto& p : corpus_.passages()) doc_tokens_.push_back(encode_document(p, vocab, encoder_cfg_));
  query_tokens_.reserve(examples_.size());
  for (const auto& ex : examples_) {
    validate_example(ex);
    for (const auto& id : ex.positive_ids) corpus_.index_of(id);
    for (const auto& id : ex.negative_ids) corpus_.index_of(id);
    if (ex.negative_ids.size() < cfg_.hard_negatives_per_query) {
      throw std::invalid_argument("trainer: \"" + ex.query + "\" lacks the requested hard negatives");
    }
    query_tokens_.push_back(encode_query(ex.query, vocab, encoder_cfg_));
  }
}

TrainState Trainer::initial_state() const {
  TrainState s;
  s.seed = cfg_.seed;
  s.config = cfg_;
  s.params = init_params(encoder_cfg_);
  s.tau = schedule_.at(0);
  return s;
}

std::size_t Trainer::steps_per_epoch() const {
  return std::max<std::size_t>(1, examples_.size() / cfg_.batch_size);
}

TrainBatch Trainer::batch_at(std::uint64_t seed, std::size_t epoch, std::size_t step_in_epoch) const {
  const auto order = epoch_order(examples_.size(), seed, epoch);
  const std::size_t steps = steps_per_epoch();
  if (step_in_epoch >= steps) throw std::out_of_range("batch_at: step beyond epoch");
  const std::size_t start = step_in_epoch * cfg_.batch_size;
  const std::size_t end = step_in_epoch + 1 == steps ? order.size() : start + cfg_.batch_size;
  std::span<const std::size_t> slice(order.data() + start, end - start);
  return build_batch(examples_, slice, corpus_, cfg_, derive_seed(seed, epoch, step_in_epoch));
}

BatchLoss Trainer::batch_loss(const EncoderParams& params, const TrainBatch& batch, double tau,
                              EncoderParams* grads) const {
  const bool need_grad = grads != nullptr;
  const std::size_t n_q = batch.examples.size();
  std::vector<ForwardCache> q_cache(need_grad ? n_q : 0);
  std::vector<ForwardCache> d_cache(need_grad ? batch.docs.size() : 0);
  std::vector<MultiViewEmbedding> q_emb;
  std::vector<MultiViewEmbedding> d_emb;
  q_emb.reserve(n_q);
  d_emb.reserve(batch.docs.size());
  for (std::size_t i = 0; i < n_q; ++i) {
    q_emb.push_back(forward_query(params, query_tokens_[batch.examples[i]], need_grad ? &q_cache[i] : nullptr));
  }
  for (std::size_t j = 0; j < batch.docs.size(); ++j) {
    d_emb.push_back(forward_doc(params, doc_tokens_[batch.docs[j]], need_grad ? &d_cache[j] : nullptr));
  }

  const double lambda = cfg_.loss.lambda;
  const double inv_n = 1.0 / static_cast<double>(n_q);
  std::vector<Matrix> d_views;
  std::vector<Matrix> d_query;
  if (need_grad) {
    for (const auto& e : d_emb) d_views.emplace_back(e.views.rows(), e.views.cols());
    for (const auto& e : q_emb) d_query.emplace_back(1, e.views.cols());
  }

  BatchLoss total;
  for (std::size_t i = 0; i < n_q; ++i) {
    auto query = q_emb[i].view(0);
    const std::size_t pos_slot = batch.positive[i];
    ScoreBreakdown pos = aggregate_score(individual_scores(query, d_emb[pos_slot].views));
    std::vector<ScoreBreakdown> negs;
    negs.reserve(batch.negatives[i].size());
    for (auto s : batch.negatives[i]) negs.push_back(aggregate_score(individual_scores(query, d_emb[s].views)));

    const GlobalLossGrad g = global_loss_grad(pos, negs, tau);
    const LocalLossGrad l = local_loss_grad(pos, tau);
    total.global += g.loss * inv_n;
    total.local += l.loss * inv_n;
    total.loss += combined_loss(g.loss, l.loss, lambda) * inv_n;
    if (!need_grad) continue;

    // d loss / d f_v(q, doc) routed into the query and the doc's view rows.
    auto route = [&](std::size_t doc_slot, std::size_t viewer, double coef) {
      if (coef == 0.0) return;
      auto view = d_emb[doc_slot].view(viewer);
      auto dq = d_query[i].row(0);
      auto dv = d_views[doc_slot].row(viewer);
      for (std::size_t c = 0; c < view.size(); ++c) {
        dq[c] += coef * view[c];
        dv[c] += coef * query[c];
      }
    };
    route(pos_slot, pos.best_viewer, g.d_positive * inv_n);
    for (std::size_t n = 0; n < negs.size(); ++n) {
      route(batch.negatives[i][n], negs[n].best_viewer, g.d_negatives[n] * inv_n);
    }
    for (std::size_t v = 0; v < l.d_individual.size(); ++v) {
      route(pos_slot, v, lambda * l.d_individual[v] * inv_n);
    }
  }

  if (need_grad) {
    for (std::size_t i = 0; i < n_q; ++i) backward_query(params, q_cache[i], d_query[i], *grads);
    for (std::size_t j = 0; j < batch.docs.size(); ++j) backward_doc(params, d_cache[j], d_views[j], *grads);
  }
  return total;
}

double clip_global_norm(EncoderParams& grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix* m : tensor_list(std::as_const(grads))) {
    for (double g : m->data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Matrix* m : tensor_list(grads)) {
      for (double& g : m->data()) g *= scale;
    }
  }
  return norm;
}

void apply_optimizer(EncoderParams& params, const EncoderParams& grads, const TrainConfig& cfg,
                     OptimizerState& opt) {
  auto p = tensor_list(params);
  auto g = tensor_list(grads);
  if (p.size() != g.size()) throw std::invalid_argument("optimizer: gradient layout mismatch");
  const double lr = cfg.learning_rate;
  ++opt.t;
  if (cfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t t = 0; t < p.size(); ++t) {
      auto& pd = p[t]->data();
      const auto& gd = g[t]->data();
      for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
    }
    return;
  }
  if (opt.m.empty()) {
    for (const Matrix* m : p) {
      opt.m.emplace_back(m->size(), 0.0);
      opt.v.emplace_back(m->size(), 0.0);
    }
  }
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
  for (std::size_t t = 0; t < p.size(); ++t) {
    auto& pd = p[t]->data();
    const auto& gd = g[t]->data();
    auto& m = opt.m[t];
    auto& v = opt.v[t];
    for (std::size_t i = 0; i < pd.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
      v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      pd[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

BatchLoss Trainer::train_step(TrainState& state) const {
  state.tau = schedule_.at(state.epoch);
  const TrainBatch batch = batch_at(state.seed, state.epoch, state.step_in_epoch);
  EncoderParams grads = zeros_like(state.params);
  const BatchLoss loss = batch_loss(state.params, batch, state.tau, &grads);
  if (!std::isfinite(loss.loss)) {
    json dump{{"epoch", state.epoch}, {"step", state.step}, {"tau", state.tau}};
    for (auto e : batch.examples) dump["queries"].push_back(examples_[e].query);
    for (auto d : batch.docs) dump["docs"].push_back(corpus_[d].doc_id);
    throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(state.epoch) + " step " +
                                 std::to_string(state.step) + ": " + dump.dump(),
                             dump);
  }
  clip_global_norm(grads, cfg_.grad_clip);
  apply_optimizer(state.params, grads, cfg_, state.optimizer);
  ++state.step;
  if (++state.step_in_epoch == steps_per_epoch()) {
    state.step_in_epoch = 0;
    ++state.epoch;
  }
  state.tau = schedule_.at(state.epoch);
  return loss;
}

EpochMetrics Trainer::train_epoch(TrainState& state) const {
  EpochMetrics m;
  m.epoch = state.epoch;
  m.tau = schedule_.at(state.epoch);
  const std::size_t epoch = state.epoch;
  while (state.epoch == epoch) {
    const BatchLoss l = train_step(state);
    m.mean_loss += l.loss;
    m.mean_local_loss += l.local;
    m.mean_global_loss += l.global;
    ++m.steps;
  }
  const double n = static_cast<double>(m.steps);
  m.mean_loss /= n;
  m.mean_local_loss /= n;
  m.mean_global_loss /= n;
  return m;
}

double Trainer::epoch_loss(const EncoderParams& params, std::uint64_t seed, std::size_t epoch, double tau) const {
  double total = 0.0;
  const std::size_t steps = steps_per_epoch();
  for (std::size_t s = 0; s < steps; ++s) total += batch_loss(params, batch_at(seed, epoch, s), tau, nullptr).loss;
  return total / static_cast<double>(steps);
}

}  // namespace mvr
