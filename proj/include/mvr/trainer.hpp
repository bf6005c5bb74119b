#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mvr/encoder.hpp"
#include "mvr/scoring.hpp"
#include "mvr/text_pipeline.hpp"

namespace mvr {

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 40;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool in_batch_negatives = true;
  std::size_t hard_negatives_per_query = 1;
  std::uint64_t seed = 1;
  // Global-norm clip; 0 disables.
  double grad_clip = 1.0;
  LossConfig loss;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct OptimizerState {
  std::uint64_t t = 0;
  // First and second moments, shaped like the parameters; empty for SGD.
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// Everything needed to resume training. Random streams are derived from
// (seed, epoch, step_in_epoch), so the counters are the RNG state.
struct TrainState {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::size_t step_in_epoch = 0;
  std::uint64_t seed = 0;
  double tau = 1.0;
  EncoderParams params;
  TrainConfig config;
  OptimizerState optimizer;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

// One mini-batch. Documents are deduplicated; positives/negatives index docs.
struct TrainBatch {
  std::vector<std::size_t> examples;                 // indices into the example list
  std::vector<std::size_t> docs;                     // corpus indices
  std::vector<std::size_t> positive;                 // per query
  std::vector<std::vector<std::size_t>> negatives;   // per query
};

// Each query gets its first positive, hard_negatives_per_query of its own
// negatives (sampled with rng when more are listed), and every other in-batch
// positive except its own positives.
TrainBatch build_batch(std::span<const TrainExample> examples, std::span<const std::size_t> batch_examples,
                       const Corpus& corpus, const TrainConfig& cfg, std::uint64_t rng_seed);

// Deterministic example order for an epoch.
std::vector<std::size_t> epoch_order(std::size_t n_examples, std::uint64_t seed, std::size_t epoch);

struct BatchLoss {
  double loss = 0.0;
  double global = 0.0;
  double local = 0.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double tau = 0.0;
  double mean_loss = 0.0;
  double mean_local_loss = 0.0;
  double mean_global_loss = 0.0;
  std::size_t steps = 0;
};

nlohmann::json to_json(const EpochMetrics& m);

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, nlohmann::json dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const { return dump_; }

 private:
  nlohmann::json dump_;
};

// Tokenized examples and documents plus the training loop.
class Trainer {
 public:
  Trainer(const Corpus& corpus, std::vector<TrainExample> examples, const Vocab& vocab,
          const EncoderConfig& encoder_cfg, TrainConfig cfg);

  TrainState initial_state() const;
  std::size_t steps_per_epoch() const;
  const TrainConfig& config() const { return cfg_; }

  // Batch of the given epoch/step, identical across runs for a fixed seed.
  TrainBatch batch_at(std::uint64_t seed, std::size_t epoch, std::size_t step_in_epoch) const;

  // Mean loss of a batch; when grads is non-null, accumulates d(mean loss)/d(params).
  BatchLoss batch_loss(const EncoderParams& params, const TrainBatch& batch, double tau,
                       EncoderParams* grads) const;

  // One optimizer step on the next batch; rolls over to the next epoch (and
  // its temperature) after the last batch.
  BatchLoss train_step(TrainState& state) const;
  // Runs the remaining steps of the current epoch.
  EpochMetrics train_epoch(TrainState& state) const;
  // Mean loss over every batch of an epoch without updating parameters.
  double epoch_loss(const EncoderParams& params, std::uint64_t seed, std::size_t epoch, double tau) const;

 private:
  const Corpus& corpus_;
  std::vector<TrainExample> examples_;
  EncoderConfig encoder_cfg_;
  TrainConfig cfg_;
  TemperatureSchedule schedule_;
  std::vector<TokenSequence> doc_tokens_;
  std::vector<TokenSequence> query_tokens_;
};

// Clips grads to global L2 norm max_norm; returns the norm before clipping.
double clip_global_norm(EncoderParams& grads, double max_norm);
void apply_optimizer(EncoderParams& params, const EncoderParams& grads, const TrainConfig& cfg,
                     OptimizerState& opt);

// Versioned binary container: magic, version, JSON header, little-endian
// float64 tensors, SHA-256 trailer.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
// SHA-256 over the parameter tensors only.
std::string checkpoint_hash(const EncoderParams& params);

}  // namespace mvr
