#include "mvr/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "mvr/scoring.hpp"

namespace mvr {

using nlohmann::json;

json to_json(const EvalReport& report) {
  json recall = json::object();
  for (const auto& [k, v] : report.recall_at) recall[std::to_string(k)] = v;
  return {{"recall_at", recall}, {"n_queries", report.n_queries}};
}

EvalReport recall_at_k(std::span<const RetrievalResult> results, std::span<const std::vector<std::string>> gold,
                       std::span<const std::size_t> ks) {
  if (results.size() != gold.size()) throw std::invalid_argument("recall_at_k: results and gold differ in length");
  EvalReport report;
  report.n_queries = results.size();
  std::vector<std::size_t> first_hit(results.size(), SIZE_MAX);
  for (std::size_t q = 0; q < results.size(); ++q) {
    if (gold[q].empty()) throw std::invalid_argument("recall_at_k: query without gold ids");
    for (std::size_t r = 0; r < results[q].size(); ++r) {
      if (std::find(gold[q].begin(), gold[q].end(), results[q][r].doc_id) != gold[q].end()) {
        first_hit[q] = r;
        break;
      }
    }
  }
  for (auto k : ks) {
    std::size_t hits = 0;
    for (auto h : first_hit) hits += h < k;
    report.recall_at[k] = results.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(results.size());
  }
  return report;
}

double local_variation(std::span<const double> scores) {
  if (scores.size() < 2) throw std::invalid_argument("local_variation: needs k >= 2 scores");
  double mx = scores[0];
  double sum = 0.0;
  for (double s : scores) {
    mx = std::max(mx, s);
    sum += s;
  }
  return mx - (sum - mx) / static_cast<double>(scores.size() - 1);
}

std::string to_string(ScoreNormalization n) {
  switch (n) {
    case ScoreNormalization::softmax: return "softmax";
    case ScoreNormalization::raw: return "raw";
    case ScoreNormalization::minmax: return "minmax";
  }
  return "softmax";
}

ScoreNormalization parse_normalization(std::string_view text) {
  if (text == "softmax") return ScoreNormalization::softmax;
  if (text == "raw") return ScoreNormalization::raw;
  if (text == "minmax") return ScoreNormalization::minmax;
  throw std::invalid_argument("unknown score normalization: " + std::string(text));
}

std::vector<double> normalize_scores(std::span<const double> scores, ScoreNormalization mode) {
  std::vector<double> out(scores.begin(), scores.end());
  if (out.empty() || mode == ScoreNormalization::raw) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double mn = *lo;
  const double mx = *hi;
  if (mode == ScoreNormalization::minmax) {
    for (auto& s : out) s = mx > mn ? (s - mn) / (mx - mn) : 0.0;
    return out;
  }
  double z = 0.0;
  for (auto& s : out) {
    s = std::exp(s - mx);
    z += s;
  }
  for (auto& s : out) s /= z;
  return out;
}

double document_perplexity(std::span<const std::size_t> viewer_hits) {
  if (viewer_hits.empty()) throw std::invalid_argument("perplexity: document without queries");
  std::unordered_map<std::size_t, std::size_t> counts;
  for (auto v : viewer_hits) ++counts[v];
  const double n = static_cast<double>(viewer_hits.size());
  double entropy = 0.0;
  for (const auto& [viewer, c] : counts) {
    const double p = static_cast<double>(c) / n;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

double perplexity(std::span<const std::vector<std::size_t>> groups) {
  if (groups.empty()) throw std::invalid_argument("perplexity: no documents");
  double total = 0.0;
  for (const auto& g : groups) total += document_perplexity(g);
  return total / static_cast<double>(groups.size());
}

json to_json(const ViewDiagnostics& d) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"ppl", opt(d.ppl)},
          {"lv", opt(d.lv)},
          {"viewer_hit_histogram", d.viewer_hit_histogram},
          {"mean_pairwise_cosine", opt(d.mean_pairwise_cosine)},
          {"n_pairs", d.n_pairs},
          {"n_ppl_documents", d.n_ppl_documents},
          {"normalization", to_string(d.normalization)}};
}

std::string histogram_csv(const ViewDiagnostics& d) {
  std::string out = "viewer,hits\n";
  for (std::size_t i = 0; i < d.viewer_hit_histogram.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(d.viewer_hit_histogram[i]) + "\n";
  }
  return out;
}

namespace {

double mean_pairwise_cosine(const Matrix& views) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < views.rows(); ++a) {
    for (std::size_t b = a + 1; b < views.rows(); ++b) {
      const double na = std::sqrt(dot(views.row(a), views.row(a)));
      const double nb = std::sqrt(dot(views.row(b), views.row(b)));
      total += na > 0 && nb > 0 ? dot(views.row(a), views.row(b)) / (na * nb) : 0.0;
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

}  // namespace

ViewDiagnostics collapse_report(const EncoderParams& params, const Vocab& vocab, const Corpus& corpus,
                                std::span<const TrainExample> eval, ScoreNormalization normalization) {
  const auto& cfg = params.config;
  ViewDiagnostics diag;
  diag.normalization = normalization;
  diag.viewer_hit_histogram.assign(cfg.n_viewers, 0);

  std::unordered_map<std::size_t, Matrix> doc_views;
  auto views_of = [&](std::size_t doc) -> const Matrix& {
    auto it = doc_views.find(doc);
    if (it == doc_views.end()) {
      it = doc_views.emplace(doc, forward_doc(params, encode_document(corpus[doc], vocab, cfg)).views).first;
    }
    return it->second;
  };

  std::map<std::size_t, std::vector<std::size_t>> hits_per_doc;
  double lv_total = 0.0;
  for (const auto& ex : eval) {
    const auto query = forward_query(params, encode_query(ex.query, vocab, cfg));
    for (const auto& gold : ex.positive_ids) {
      const std::size_t doc = corpus.index_of(gold);
      const auto scores = aggregate_score(individual_scores(query.view(0), views_of(doc)));
      ++diag.viewer_hit_histogram[scores.best_viewer];
      hits_per_doc[doc].push_back(scores.best_viewer);
      if (cfg.n_viewers >= 2) lv_total += local_variation(normalize_scores(scores.individual, normalization));
      ++diag.n_pairs;
    }
  }
  if (cfg.n_viewers >= 2 && diag.n_pairs > 0) lv_total /= static_cast<double>(diag.n_pairs), diag.lv = lv_total;

  std::vector<std::vector<std::size_t>> groups;
  for (auto& [doc, hits] : hits_per_doc) {
    if (hits.size() >= 2) groups.push_back(hits);
  }
  diag.n_ppl_documents = groups.size();
  if (!groups.empty()) diag.ppl = perplexity(groups);

  if (cfg.n_viewers >= 2 && !doc_views.empty()) {
    double total = 0.0;
    for (const auto& [doc, views] : doc_views) total += mean_pairwise_cosine(views);
    diag.mean_pairwise_cosine = total / static_cast<double>(doc_views.size());
  }
  return diag;
}

EvalReport evaluate_retrieval(const MultiVectorIndex& index, const EncoderParams& params, const Vocab& vocab,
                              std::span<const TrainExample> eval, std::span<const std::size_t> ks,
                              const SearchMode& mode) {
  const std::size_t depth = ks.empty() ? 1 : *std::max_element(ks.begin(), ks.end());
  std::vector<RetrievalResult> results;
  std::vector<std::vector<std::string>> gold;
  results.reserve(eval.size());
  for (const auto& ex : eval) {
    const auto q = forward_query(params, encode_query(ex.query, vocab, params.config));
    results.push_back(index.search(q.view(0), depth, mode));
    gold.push_back(ex.positive_ids);
  }
  return recall_at_k(results, gold, ks);
}

}  // namespace mvr
