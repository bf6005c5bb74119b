#include "mvr/mv_index.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "mvr/io_util.hpp"

namespace mvr {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "vectors.bin is little-endian");

MultiVectorIndex::MultiVectorIndex(std::size_t dim, std::size_t views_per_doc, std::string checkpoint_hash)
    : dim_(dim), views_per_doc_(views_per_doc), checkpoint_hash_(std::move(checkpoint_hash)) {
  if (dim == 0 || views_per_doc == 0) throw std::invalid_argument("index: dim and views_per_doc must be > 0");
}

void MultiVectorIndex::add(const std::string& doc_id, const Matrix& views) {
  if (views.cols() != dim_) {
    throw std::invalid_argument("index: vector dim " + std::to_string(views.cols()) + " != index dim " +
                                std::to_string(dim_));
  }
  if (views.rows() != views_per_doc_) {
    throw std::invalid_argument("index: document has " + std::to_string(views.rows()) + " views, index expects " +
                                std::to_string(views_per_doc_));
  }
  if (doc_id.empty() || doc_id.find_first_of("\t\n\r") != std::string::npos) {
    throw std::invalid_argument("index: doc_id must be non-empty without tabs or newlines");
  }
  const auto slot = static_cast<std::uint32_t>(doc_ids_.size());
  if (!doc_slot_.emplace(doc_id, slot).second) throw std::invalid_argument("index: duplicate doc_id " + doc_id);
  doc_ids_.push_back(doc_id);
  doc_first_.push_back(static_cast<std::uint32_t>(entries_.size()));
  for (std::size_t v = 0; v < views.rows(); ++v) {
    entries_.push_back({doc_id, static_cast<std::uint32_t>(v)});
    entry_doc_.push_back(slot);
    for (double x : views.row(v)) vectors_.push_back(static_cast<float>(x));
  }
  graph_.reset();
}

void MultiVectorIndex::build_graph(const HnswParams& params) {
  graph_ = std::make_unique<HnswGraph>(vectors_, dim_, params);
}

double MultiVectorIndex::score(std::span<const double> query, std::size_t entry) const {
  const float* v = vectors_.data() + entry * dim_;
  double s = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) s += static_cast<double>(v[i]) * query[i];
  return s;
}

RetrievalResult MultiVectorIndex::rank_documents(std::span<const double> query, const std::vector<std::uint32_t>& docs,
                                                 std::size_t top_k) const {
  RetrievalResult ranked;
  ranked.reserve(docs.size());
  for (auto slot : docs) {
    const std::size_t first = doc_first_[slot];
    double best = score(query, first);
    std::size_t best_viewer = 0;
    for (std::size_t v = 1; v < views_per_doc_; ++v) {
      const double s = score(query, first + v);
      if (s > best) {
        best = s;
        best_viewer = v;
      }
    }
    ranked.push_back({doc_ids_[slot], best, best_viewer});
  }
  auto better = [](const RetrievedDoc& a, const RetrievedDoc& b) {
    return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
  };
  const std::size_t keep = std::min(top_k, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(), better);
  ranked.resize(keep);
  return ranked;
}

RetrievalResult MultiVectorIndex::search(std::span<const double> query, std::size_t top_k,
                                         const SearchMode& mode) const {
  if (top_k == 0) throw std::invalid_argument("search: top_k must be >= 1");
  if (query.size() != dim_) throw std::invalid_argument("search: query dim does not match index dim");
  if (entries_.empty()) return {};
  std::vector<std::uint32_t> docs;
  if (mode.kind == SearchMode::Kind::flat) {
    docs.resize(doc_ids_.size());
    for (std::uint32_t i = 0; i < docs.size(); ++i) docs[i] = i;
  } else {
    if (!graph_) throw std::logic_error("search: ANN mode requires build_graph()");
    const std::size_t raw = top_k * views_per_doc_ * std::max<std::size_t>(1, mode.overfetch);
    std::vector<char> seen(doc_ids_.size(), 0);
    for (const auto& [sim, node] : graph_->search(query, raw, std::max(mode.ef, raw))) {
      const auto slot = entry_doc_[node];
      if (!seen[slot]) {
        seen[slot] = 1;
        docs.push_back(slot);
      }
    }
  }
  return rank_documents(query, docs, top_k);
}

void MultiVectorIndex::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::string ids;
  for (const auto& e : entries_) ids += e.doc_id + "\t" + std::to_string(e.viewer_id) + "\n";
  write_file_atomic(dir / "vectors.bin",
                    std::string_view(reinterpret_cast<const char*>(vectors_.data()), vectors_.size() * sizeof(float)));
  write_file_atomic(dir / "ids.tsv", ids);
  json manifest{{"format_version", kIndexFormatVersion},
                {"k", views_per_doc_},
                {"dim", dim_},
                {"count", entries_.size()},
                {"checkpoint_hash", checkpoint_hash_}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

MultiVectorIndex MultiVectorIndex::load(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_file(dir / "manifest.json"));
  if (manifest.at("format_version").get<int>() != kIndexFormatVersion) {
    throw std::runtime_error("index format version mismatch in " + dir.string());
  }
  const auto k = manifest.at("k").get<std::size_t>();
  const auto dim = manifest.at("dim").get<std::size_t>();
  const auto count = manifest.at("count").get<std::size_t>();
  MultiVectorIndex index(dim, k, manifest.at("checkpoint_hash").get<std::string>());
  if (count % k != 0) throw std::runtime_error("index: count is not a multiple of k");

  const std::string bytes = read_file(dir / "vectors.bin");
  if (bytes.size() != count * dim * sizeof(float)) throw std::runtime_error("index: vectors.bin size mismatch");
  std::vector<float> vectors(count * dim);
  std::memcpy(vectors.data(), bytes.data(), bytes.size());

  std::vector<IndexEntry> entries;
  for_each_line(dir / "ids.tsv", [&](std::string_view line, std::size_t number) {
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw JsonlError(dir / "ids.tsv", number, "expected doc_id<TAB>viewer_id");
    entries.push_back({std::string(line.substr(0, tab)),
                       static_cast<std::uint32_t>(std::stoul(std::string(line.substr(tab + 1))))});
  });
  if (entries.size() != count) throw std::runtime_error("index: ids.tsv has " + std::to_string(entries.size()) +
                                                        " entries, manifest says " + std::to_string(count));
  for (std::size_t d = 0; d < count / k; ++d) {
    Matrix views(k, dim);
    for (std::size_t v = 0; v < k; ++v) {
      const auto& e = entries[d * k + v];
      if (e.viewer_id != v || e.doc_id != entries[d * k].doc_id) {
        throw std::runtime_error("index: ids.tsv entries are not grouped per document in viewer order");
      }
      for (std::size_t c = 0; c < dim; ++c) views(v, c) = vectors[(d * k + v) * dim + c];
    }
    index.add(entries[d * k].doc_id, views);
  }
  return index;
}

void add_documents(MultiVectorIndex& index, const Corpus& corpus, const Vocab& vocab, const EncoderParams& params) {
  const auto& cfg = params.config;
  if (cfg.d_model != index.dim()) {
    throw std::invalid_argument("index: encoder d_model " + std::to_string(cfg.d_model) +
                                " does not match index dim " + std::to_string(index.dim()));
  }
  if (cfg.n_viewers != index.views_per_doc()) {
    throw std::invalid_argument("index: encoder produces " + std::to_string(cfg.n_viewers) +
                                " views, index stores " + std::to_string(index.views_per_doc()));
  }
  for (const auto& p : corpus.passages()) {
    index.add(p.doc_id, forward_doc(params, encode_document(p, vocab, cfg)).views);
  }
}

MultiVectorIndex build_index(const Corpus& corpus, const Vocab& vocab, const EncoderParams& params,
                             const std::string& checkpoint_hash) {
  MultiVectorIndex index(params.config.d_model, params.config.n_viewers, checkpoint_hash);
  add_documents(index, corpus, vocab, params);
  return index;
}

std::vector<std::vector<double>> encode_queries(std::span<const std::string> queries, const Vocab& vocab,
                                                const EncoderParams& params) {
  std::vector<std::vector<double>> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    auto emb = forward_query(params, encode_query(q, vocab, params.config));
    auto row = emb.view(0);
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

double flat_ann_agreement(const MultiVectorIndex& index, std::span<const std::vector<double>> queries,
                          std::size_t top_k, const SearchMode& ann_mode) {
  if (queries.empty()) return 1.0;
  double total = 0.0;
  for (const auto& q : queries) {
    const auto flat = index.search(q, top_k, SearchMode::flat());
    if (flat.empty()) {
      total += 1.0;
      continue;
    }
    const auto ann = index.search(q, top_k, ann_mode);
    std::size_t hit = 0;
    for (const auto& f : flat) {
      hit += std::any_of(ann.begin(), ann.end(), [&](const RetrievedDoc& a) { return a.doc_id == f.doc_id; });
    }
    total += static_cast<double>(hit) / static_cast<double>(flat.size());
  }
  return total / static_cast<double>(queries.size());
}

json to_json(const RetrievalResult& result) {
  json out = json::array();
  for (const auto& r : result) out.push_back({{"doc_id", r.doc_id}, {"score", r.score}, {"viewer", r.best_viewer}});
  return out;
}

}  // namespace mvr
