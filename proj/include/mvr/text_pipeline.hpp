#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mvr {

// Fixed id layout shared by every vocabulary: PAD, UNK, SEP, then the viewer
// tokens [VIE_0] .. [VIE_n], then content tokens by descending frequency.
// [VIE_0] marks queries (and first-k documents); documents with n viewers
// carry [VIE_1] .. [VIE_n].
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kSepId = 2;
inline constexpr std::int32_t kFirstViewerId = 3;

inline constexpr std::int32_t viewer_token_id(std::size_t viewer) {
  return kFirstViewerId + static_cast<std::int32_t>(viewer);
}
inline constexpr std::int32_t kQueryViewerId = viewer_token_id(0);
// Token of the i-th document viewer, 0-based: [VIE_{i+1}].
inline constexpr std::int32_t doc_viewer_token_id(std::size_t i) { return viewer_token_id(i + 1); }

struct Passage {
  std::string doc_id;
  std::string title;
  std::string body;

  friend bool operator==(const Passage&, const Passage&) = default;
};

struct TrainExample {
  std::string query;
  std::vector<std::string> positive_ids;
  std::vector<std::string> negative_ids;
  // Optional answer strings; used only to remap positives when splitting passages.
  std::vector<std::string> answers;

  friend bool operator==(const TrainExample&, const TrainExample&) = default;
};

// Throws std::invalid_argument if positives are empty or overlap negatives.
void validate_example(const TrainExample& ex);

// Passages indexed by doc_id. doc_ids must be unique.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Passage> passages);

  std::size_t size() const { return passages_.size(); }
  bool empty() const { return passages_.empty(); }
  const Passage& operator[](std::size_t i) const { return passages_[i]; }
  std::span<const Passage> passages() const { return passages_; }
  std::optional<std::size_t> find(std::string_view doc_id) const;
  // Throws std::out_of_range for unknown ids.
  std::size_t index_of(std::string_view doc_id) const;

 private:
  std::vector<Passage> passages_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

// Lowercased alphanumeric runs; everything else separates tokens. Bytes >= 0x80
// are kept as token characters so UTF-8 words stay intact.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
 public:
  Vocab() = default;
  // tokens[i] is the surface form of id i; must follow the fixed special layout.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  // Registered [VIE_i] tokens, including the query marker [VIE_0].
  std::size_t n_viewers() const { return n_viewers_; }
  // UNK for unknown tokens.
  std::int32_t id(std::string_view token) const;
  std::optional<std::int32_t> find(std::string_view token) const;
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // One "token<TAB>id" line per entry, sorted by id.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::size_t n_viewers_ = 0;
};

std::string viewer_token_text(std::size_t viewer);

// Special tokens plus the max_vocab most frequent content tokens (ties broken
// lexicographically); max_vocab == 0 keeps all. Titles and bodies both count.
// Registers [VIE_0] .. [VIE_{n_viewers}].
Vocab build_vocab(std::span<const Passage> corpus, std::size_t max_vocab, std::size_t n_viewers);

// Token ids with their position ids. The first n_views positions carry the
// output embeddings.
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> positions;
  std::size_t n_views = 0;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// [VIE_1..VIE_n] + (title + SEP) + body + SEP, truncated to max_len with SEP
// kept last. Viewer positions are 0, content positions count up from 1.
TokenSequence encode_document_tokens(const Passage& p, const Vocab& vocab, std::size_t n_viewers,
                                     std::size_t max_len);

// First-k-token layout: [VIE_0] + (title + SEP) + body + SEP, with the first k
// positions used as the document's views. Short sequences are PAD-filled up to k.
TokenSequence encode_document_first_k(const Passage& p, const Vocab& vocab, std::size_t k,
                                      std::size_t max_len);

// [VIE_0] + query + SEP, truncated to max_len.
TokenSequence encode_query_tokens(std::string_view query, const Vocab& vocab, std::size_t max_len);

struct SplitMode {
  enum class Kind { sentence, k_equal };
  Kind kind = Kind::sentence;
  std::size_t k = 0;

  static SplitMode sentence() { return {Kind::sentence, 0}; }
  static SplitMode k_equal(std::size_t k) { return {Kind::k_equal, k}; }
};

struct SplitResult {
  Corpus corpus;
  std::vector<TrainExample> examples;
  // Original doc_id -> ids of its pieces, in order.
  std::unordered_map<std::string, std::vector<std::string>> pieces;
  std::vector<std::string> warnings;
};

// Splits every passage into sentences or k equal token chunks and remaps the
// examples: each positive becomes the piece containing an answer string (or,
// lacking answers, the piece with the largest token overlap with the query);
// each negative becomes all pieces of the original negative.
SplitResult split_corpus(const Corpus& corpus, std::span<const TrainExample> examples,
                         SplitMode mode);

// Sentence boundaries are '.', '!' or '?' followed by whitespace or end of text.
std::vector<std::string> split_sentences(std::string_view text);

// JSONL I/O. Malformed lines raise JsonlError carrying the 1-based line number.
std::vector<Passage> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, std::span<const Passage> corpus);
std::vector<TrainExample> read_examples_jsonl(const std::filesystem::path& path);
void write_examples_jsonl(const std::filesystem::path& path, std::span<const TrainExample> examples);

}  // namespace mvr
