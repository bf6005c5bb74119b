#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mvr/encoder.hpp"
#include "mvr/mv_index.hpp"
#include "mvr/text_pipeline.hpp"

namespace mvr {

struct EvalReport {
  std::map<std::size_t, double> recall_at;
  std::size_t n_queries = 0;
};

nlohmann::json to_json(const EvalReport& report);

// Fraction of queries with any gold id among the first k results, for each k.
// A query with an empty result list counts as a miss.
EvalReport recall_at_k(std::span<const RetrievalResult> results, std::span<const std::vector<std::string>> gold,
                       std::span<const std::size_t> ks);

// Max score minus the mean of the remaining k-1 scores. Requires k >= 2.
double local_variation(std::span<const double> scores);

enum class ScoreNormalization { softmax, raw, minmax };

std::string to_string(ScoreNormalization n);
ScoreNormalization parse_normalization(std::string_view text);

// Softmax at temperature 1, identity, or min-max rescaling to [0, 1].
std::vector<double> normalize_scores(std::span<const double> scores, ScoreNormalization mode);

// exp(entropy) of the viewer-hit distribution of one document's queries.
double document_perplexity(std::span<const std::size_t> viewer_hits);

// Mean per-document perplexity. Each group holds the winning viewer of every
// query of one document; groups must be non-empty.
double perplexity(std::span<const std::vector<std::size_t>> groups);

struct ViewDiagnostics {
  std::optional<double> ppl;                  // absent when no document has >= 2 queries
  std::optional<double> lv;                   // absent for single-view models
  std::vector<std::size_t> viewer_hit_histogram;
  std::optional<double> mean_pairwise_cosine; // across a document's views, averaged over documents
  std::size_t n_pairs = 0;
  std::size_t n_ppl_documents = 0;
  ScoreNormalization normalization = ScoreNormalization::softmax;
};

nlohmann::json to_json(const ViewDiagnostics& d);
std::string histogram_csv(const ViewDiagnostics& d);

// Scores every (query, gold document) pair of the eval set with the encoder:
// LV on normalized viewer scores averaged over pairs, PPL macro-averaged over
// documents with at least two queries, plus the winning-viewer histogram.
ViewDiagnostics collapse_report(const EncoderParams& params, const Vocab& vocab, const Corpus& corpus,
                                std::span<const TrainExample> eval,
                                ScoreNormalization normalization = ScoreNormalization::softmax);

// Runs every eval query through the index and scores the rankings.
EvalReport evaluate_retrieval(const MultiVectorIndex& index, const EncoderParams& params, const Vocab& vocab,
                              std::span<const TrainExample> eval, std::span<const std::size_t> ks,
                              const SearchMode& mode);

}  // namespace mvr
