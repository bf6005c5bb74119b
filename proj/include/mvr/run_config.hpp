#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvr/encoder.hpp"
#include "mvr/eval_metrics.hpp"
#include "mvr/hnsw.hpp"
#include "mvr/mv_index.hpp"
#include "mvr/trainer.hpp"

namespace mvr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Settings shared by the CLI subcommands. Stored as "key = value" lines;
// '#' starts a comment. Unknown keys are rejected.
struct RunConfig {
  std::string corpus;
  std::string train;
  std::string eval;
  std::string checkpoint;
  std::string vocab;
  std::string index;
  std::string metrics;
  std::size_t max_vocab = 0;  // 0 keeps every token

  EncoderConfig encoder;
  TrainConfig training;

  SearchMode::Kind index_mode = SearchMode::Kind::flat;
  HnswParams hnsw;
  std::size_t overfetch = 2;
  std::size_t top_k = 10;
  std::vector<std::size_t> eval_ks{1, 5, 20, 100};
  ScoreNormalization lv_normalization = ScoreNormalization::softmax;

  // Applies one key=value pair. Throws ConfigError for unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  // Every key with its current value, in file order.
  std::vector<std::pair<std::string, std::string>> entries() const;

  SearchMode search_mode() const;

  std::string to_text() const;
  static RunConfig parse(std::string_view text, std::string_view source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

}  // namespace mvr
