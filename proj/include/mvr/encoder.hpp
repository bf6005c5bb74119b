#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvr/tensor.hpp"
#include "mvr/text_pipeline.hpp"

namespace mvr {

// How a document's output views are produced: dedicated viewer tokens
// prepended to the input, or the hidden states of the first k input positions.
enum class ViewMode { viewer_tokens, first_k };

std::string to_string(ViewMode mode);
ViewMode parse_view_mode(std::string_view text);

struct EncoderConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t n_viewers = 8;
  std::size_t max_len = 64;
  std::size_t vocab_size = 0;
  std::size_t n_layers = 1;
  std::uint64_t seed = 1;
  // Init scale of the [VIE_i] rows relative to ordinary token rows.
  double viewer_init_scale = 1.0;
  // Multiplies the init scale of the attention query and key projections.
  double attention_init_scale = 1.0;
  // Query and document share one parameter set.
  bool tied = false;
  ViewMode view_mode = ViewMode::viewer_tokens;

  // Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-5;

struct LayerParams {
  Matrix wq, wk, wv, wo;        // d_model x d_model
  Matrix bq, bk, bv, bo;        // 1 x d_model
  Matrix ln1_gain, ln1_bias;    // 1 x d_model
  Matrix w1, b1;                // d_model x d_ff, 1 x d_ff
  Matrix w2, b2;                // d_ff x d_model, 1 x d_model
  Matrix ln2_gain, ln2_bias;    // 1 x d_model

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct TowerParams {
  Matrix token_embedding;     // vocab_size x d_model; viewer rows are trainable like any token
  Matrix position_embedding;  // max_len x d_model
  std::vector<LayerParams> layers;

  friend bool operator==(const TowerParams&, const TowerParams&) = default;
};

// Both encoders. towers = {query, document}, or a single shared tower when tied.
struct EncoderParams {
  EncoderConfig config;
  std::vector<TowerParams> towers;

  TowerParams& query_tower() { return towers.front(); }
  const TowerParams& query_tower() const { return towers.front(); }
  TowerParams& doc_tower() { return towers.back(); }
  const TowerParams& doc_tower() const { return towers.back(); }

  std::size_t parameter_count() const;
  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

// Visits every tensor in a fixed order with a dotted name such as
// "doc.layers.0.wq". The order defines the checkpoint layout.
void for_each_tensor(EncoderParams& params, const std::function<void(const std::string&, Matrix&)>& fn);
void for_each_tensor(const EncoderParams& params,
                     const std::function<void(const std::string&, const Matrix&)>& fn);

// Embeddings ~ N(0, 1/sqrt(d_model)); projections ~ N(0, 1/sqrt(fan_in));
// layer-norm gains 1, biases 0. Both towers start from the same draw.
EncoderParams init_params(const EncoderConfig& cfg);
// Same shapes, all zeros. Used as a gradient buffer.
EncoderParams zeros_like(const EncoderParams& params);

struct MultiViewEmbedding {
  Matrix views;  // n_views x d_model; one row for queries

  std::size_t n_views() const { return views.rows(); }
  std::span<const double> view(std::size_t i) const { return views.row(i); }
};

struct LayerCache {
  std::size_t out_rows = 0;
  Matrix input;                // L x d
  Matrix q;                    // out_rows x d
  Matrix k, v;                 // L x d
  std::vector<Matrix> probs;   // per head, out_rows x L; masked keys stay 0
  Matrix attn;                 // out_rows x d
  Matrix ln1_norm;
  std::vector<double> ln1_rstd;
  Matrix hidden1;
  Matrix ff_pre, ff_act;       // out_rows x d_ff
  Matrix ln2_norm;
  std::vector<double> ln2_rstd;
};

// Activations of one forward pass, consumed by the backward pass.
struct ForwardCache {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> positions;
  std::vector<char> key_valid;
  std::vector<LayerCache> layers;
  bool ready = false;

  void clear() { *this = ForwardCache{}; }
};

// Runs one tower and returns the hidden states of the first seq.n_views
// positions. Attention is bidirectional; PAD tokens are excluded as keys.
Matrix encode_views(const TowerParams& tower, const EncoderConfig& cfg, const TokenSequence& seq,
                    ForwardCache* cache);

// Accumulates into grads the gradient of a scalar loss whose derivative
// w.r.t. the returned views is grad_views. Throws if cache holds no forward pass.
void backward_views(const TowerParams& tower, const EncoderConfig& cfg, const ForwardCache& cache,
                    const Matrix& grad_views, TowerParams& grads);

// Throws std::invalid_argument if seq does not start with the configured view prefix.
MultiViewEmbedding forward_doc(const EncoderParams& params, const TokenSequence& seq,
                               ForwardCache* cache = nullptr);
MultiViewEmbedding forward_query(const EncoderParams& params, const TokenSequence& seq,
                                 ForwardCache* cache = nullptr);
void backward_doc(const EncoderParams& params, const ForwardCache& cache, const Matrix& grad_views,
                  EncoderParams& grads);
void backward_query(const EncoderParams& params, const ForwardCache& cache, const Matrix& grad_views,
                    EncoderParams& grads);

// Tokenizes with the layout the config's view mode expects.
TokenSequence encode_document(const Passage& p, const Vocab& vocab, const EncoderConfig& cfg);
TokenSequence encode_query(std::string_view query, const Vocab& vocab, const EncoderConfig& cfg);

}  // namespace mvr
