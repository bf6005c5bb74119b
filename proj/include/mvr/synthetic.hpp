#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvr/text_pipeline.hpp"

namespace mvr {

// Multi-topic corpus where each document concatenates segments from distinct
// topics and each query targets exactly one segment.
struct SyntheticSpec {
  std::size_t n_docs = 500;
  std::size_t segments_per_doc = 4;
  // Topic pool each document draws its segments' topics from; 0 means one
  // topic per segment slot, so every document covers every topic.
  std::size_t n_topics = 0;
  std::size_t vocab_size = 2000;
  std::size_t queries_per_segment = 2;       // training queries
  std::size_t eval_queries_per_segment = 1;
  std::size_t segment_len = 8;
  std::size_t query_len = 4;
  std::size_t query_segment_tokens = 3;      // drawn from the segment itself; rest is topic noise
  std::size_t hard_negatives = 1;
  std::uint64_t seed = 7;

  void validate() const;
  std::size_t topic_count() const { return n_topics == 0 ? segments_per_doc : n_topics; }
};

struct QueryOrigin {
  std::size_t doc = 0;      // index into corpus
  std::size_t segment = 0;  // segment position inside the document
  std::size_t topic = 0;

  friend bool operator==(const QueryOrigin&, const QueryOrigin&) = default;
};

struct SyntheticData {
  std::vector<Passage> corpus;
  std::vector<TrainExample> train;
  std::vector<TrainExample> eval;
  std::vector<QueryOrigin> train_origin;
  std::vector<QueryOrigin> eval_origin;
  // segment_tokens[doc][segment] is the token list of that segment.
  std::vector<std::vector<std::vector<std::string>>> segment_tokens;

  friend bool operator==(const SyntheticData&, const SyntheticData&) = default;
};

// Deterministic in every field of spec, including the seed.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

std::string topic_word(std::size_t topic, std::size_t index);

// corpus.jsonl, train.jsonl, eval.jsonl, meta.jsonl under dir.
void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

}  // namespace mvr
