#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mvr/encoder.hpp"
#include "mvr/hnsw.hpp"
#include "mvr/tensor.hpp"
#include "mvr/text_pipeline.hpp"

namespace mvr {

inline constexpr int kIndexFormatVersion = 1;

struct IndexEntry {
  std::string doc_id;
  std::uint32_t viewer_id = 0;
};

struct RetrievedDoc {
  std::string doc_id;
  double score = 0.0;
  std::size_t best_viewer = 0;

  friend bool operator==(const RetrievedDoc&, const RetrievedDoc&) = default;
};

// Ranked, deduplicated documents: scores non-increasing, ties by doc_id.
using RetrievalResult = std::vector<RetrievedDoc>;

struct SearchMode {
  enum class Kind { flat, ann };
  Kind kind = Kind::flat;
  std::size_t ef = 64;
  // Raw entries fetched from the graph = top_k * views_per_doc * overfetch.
  std::size_t overfetch = 2;

  static SearchMode flat() { return {}; }
  static SearchMode ann(std::size_t ef = 64, std::size_t overfetch = 2) { return {Kind::ann, ef, overfetch}; }
};

// k float32 vectors per document. Build is single-writer; const searches may
// run concurrently once build_graph (if needed) has returned.
class MultiVectorIndex {
 public:
  MultiVectorIndex(std::size_t dim, std::size_t views_per_doc, std::string checkpoint_hash = {});
  MultiVectorIndex(MultiVectorIndex&&) noexcept = default;
  MultiVectorIndex& operator=(MultiVectorIndex&&) noexcept = default;
  MultiVectorIndex(const MultiVectorIndex&) = delete;
  MultiVectorIndex& operator=(const MultiVectorIndex&) = delete;

  // Adds one entry per view row. Throws on dimension/view-count mismatch or a
  // repeated doc_id.
  void add(const std::string& doc_id, const Matrix& views);

  std::size_t dim() const { return dim_; }
  std::size_t views_per_doc() const { return views_per_doc_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t doc_count() const { return doc_ids_.size(); }
  bool empty() const { return entries_.empty(); }
  const IndexEntry& entry(std::size_t i) const { return entries_[i]; }
  std::span<const float> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  std::span<const float> raw_vectors() const { return vectors_; }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }

  void build_graph(const HnswParams& params = {});
  bool has_graph() const { return graph_ != nullptr; }

  // Flat: exact inner product against every entry, max per document, top_k.
  // ANN: graph candidates, then the same group-max over each candidate
  // document's full set of entries. Throws if top_k == 0 or ANN lacks a graph.
  RetrievalResult search(std::span<const double> query, std::size_t top_k, const SearchMode& mode) const;

  // manifest.json + vectors.bin + ids.tsv, each written atomically.
  void save(const std::filesystem::path& dir) const;
  static MultiVectorIndex load(const std::filesystem::path& dir);

 private:
  double score(std::span<const double> query, std::size_t entry) const;
  RetrievalResult rank_documents(std::span<const double> query, const std::vector<std::uint32_t>& docs,
                                 std::size_t top_k) const;

  std::size_t dim_;
  std::size_t views_per_doc_;
  std::string checkpoint_hash_;
  std::vector<float> vectors_;
  std::vector<IndexEntry> entries_;
  std::vector<std::uint32_t> entry_doc_;   // entry -> document slot
  std::vector<std::string> doc_ids_;       // document slot -> id
  std::vector<std::uint32_t> doc_first_;   // document slot -> first entry
  std::unordered_map<std::string, std::uint32_t> doc_slot_;
  std::unique_ptr<HnswGraph> graph_;
};

// Encodes every passage with the document tower and adds its views.
// Throws if the index dimension or view count disagrees with the encoder.
void add_documents(MultiVectorIndex& index, const Corpus& corpus, const Vocab& vocab, const EncoderParams& params);
MultiVectorIndex build_index(const Corpus& corpus, const Vocab& vocab, const EncoderParams& params,
                             const std::string& checkpoint_hash);

// Query embeddings (one row each) for a list of query texts.
std::vector<std::vector<double>> encode_queries(std::span<const std::string> queries, const Vocab& vocab,
                                                const EncoderParams& params);

// Mean fraction of flat top_k doc_ids that ANN mode also returns.
double flat_ann_agreement(const MultiVectorIndex& index, std::span<const std::vector<double>> queries,
                          std::size_t top_k, const SearchMode& ann_mode);

nlohmann::json to_json(const RetrievalResult& result);

}  // namespace mvr
