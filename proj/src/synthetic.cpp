#include "mvr/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "mvr/io_util.hpp"

namespace mvr {

namespace {

// Modulo draw keeps the stream identical across standard libraries.
std::size_t draw_below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::vector<std::size_t> draw_distinct(std::mt19937_64& rng, std::size_t population, std::size_t count) {
  std::vector<std::size_t> pool(population);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pool[i], pool[i + draw_below(rng, population - i)]);
  }
  pool.resize(count);
  return pool;
}

template <typename T>
void shuffle_in_place(std::mt19937_64& rng, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw_below(rng, i)]);
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::string doc_name(std::size_t i) { return "doc" + std::to_string(i); }

}  // namespace

void SyntheticSpec::validate() const {
  if (segments_per_doc < 1) throw std::invalid_argument("synthetic: segments_per_doc must be >= 1");
  if (n_topics != 0 && n_topics < segments_per_doc) {
    throw std::invalid_argument("synthetic: n_topics must be 0 or >= segments_per_doc");
  }
  if (vocab_size < topic_count() * 10) {
    throw std::invalid_argument("synthetic: vocab_size must be >= 10 words per topic");
  }
  if (n_docs < 1) throw std::invalid_argument("synthetic: n_docs must be >= 1");
  const std::size_t topic_size = vocab_size / topic_count();
  if (segment_len < 1 || segment_len > topic_size) {
    throw std::invalid_argument("synthetic: segment_len must be in [1, vocab_size / topics]");
  }
  if (query_len < 1 || query_segment_tokens > query_len || query_segment_tokens > segment_len) {
    throw std::invalid_argument("synthetic: query_segment_tokens must be <= query_len and <= segment_len");
  }
  if (hard_negatives >= n_docs && hard_negatives > 0) {
    throw std::invalid_argument("synthetic: hard_negatives must be < n_docs");
  }
}

std::string topic_word(std::size_t topic, std::size_t index) {
  return "t" + std::to_string(topic) + "w" + std::to_string(index);
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t n_segments = spec.segments_per_doc;
  const std::size_t topic_size = spec.vocab_size / spec.topic_count();

  SyntheticData data;
  std::vector<std::vector<std::size_t>> doc_topics(spec.n_docs);
  data.segment_tokens.resize(spec.n_docs);
  for (std::size_t d = 0; d < spec.n_docs; ++d) {
    std::vector<std::size_t> topics;
    if (spec.n_topics == 0) {
      topics.resize(n_segments);
      std::iota(topics.begin(), topics.end(), 0);
      shuffle_in_place(rng, topics);
    } else {
      topics = draw_distinct(rng, spec.n_topics, n_segments);
    }
    doc_topics[d] = topics;
    std::string body;
    for (std::size_t s = 0; s < n_segments; ++s) {
      std::vector<std::string> words;
      for (auto w : draw_distinct(rng, topic_size, spec.segment_len)) {
        words.push_back(topic_word(topics[s], w));
      }
      if (!body.empty()) body.push_back(' ');
      body += join(words) + ".";
      data.segment_tokens[d].push_back(std::move(words));
    }
    data.corpus.push_back({doc_name(d), "", std::move(body)});
  }

  auto make_query = [&](std::size_t d, std::size_t s) {
    const auto& seg = data.segment_tokens[d][s];
    std::vector<std::string> words;
    for (auto i : draw_distinct(rng, seg.size(), spec.query_segment_tokens)) words.push_back(seg[i]);
    while (words.size() < spec.query_len) {
      words.push_back(topic_word(doc_topics[d][s], draw_below(rng, topic_size)));
    }
    shuffle_in_place(rng, words);
    return join(words);
  };

  for (std::size_t d = 0; d < spec.n_docs; ++d) {
    for (std::size_t s = 0; s < n_segments; ++s) {
      for (std::size_t q = 0; q < spec.queries_per_segment; ++q) {
        TrainExample ex;
        ex.query = make_query(d, s);
        ex.positive_ids = {doc_name(d)};
        while (ex.negative_ids.size() < spec.hard_negatives) {
          auto other = draw_below(rng, spec.n_docs);
          auto name = doc_name(other);
          if (other == d || std::find(ex.negative_ids.begin(), ex.negative_ids.end(), name) !=
                                ex.negative_ids.end()) {
            continue;
          }
          ex.negative_ids.push_back(std::move(name));
        }
        data.train.push_back(std::move(ex));
        data.train_origin.push_back({d, s, doc_topics[d][s]});
      }
      for (std::size_t q = 0; q < spec.eval_queries_per_segment; ++q) {
        TrainExample ex;
        ex.query = make_query(d, s);
        ex.positive_ids = {doc_name(d)};
        data.eval.push_back(std::move(ex));
        data.eval_origin.push_back({d, s, doc_topics[d][s]});
      }
    }
  }
  return data;
}

void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_corpus_jsonl(dir / "corpus.jsonl", data.corpus);
  write_examples_jsonl(dir / "train.jsonl", data.train);
  write_examples_jsonl(dir / "eval.jsonl", data.eval);
  std::string meta;
  auto emit = [&](const char* split, const std::vector<QueryOrigin>& origins) {
    for (std::size_t i = 0; i < origins.size(); ++i) {
      nlohmann::json j{{"split", split},
                       {"index", i},
                       {"doc_id", data.corpus[origins[i].doc].doc_id},
                       {"segment", origins[i].segment},
                       {"topic", origins[i].topic}};
      meta += j.dump();
      meta.push_back('\n');
    }
  };
  emit("train", data.train_origin);
  emit("eval", data.eval_origin);
  write_file_atomic(dir / "meta.jsonl", meta);
}

}  // namespace mvr
