#include "mvr/text_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "mvr/io_util.hpp"

namespace mvr {

using nlohmann::json;

void validate_example(const TrainExample& ex) {
  if (ex.positive_ids.empty()) {
    throw std::invalid_argument("example has no positive_ids: \"" + ex.query + "\"");
  }
  std::unordered_set<std::string> pos(ex.positive_ids.begin(), ex.positive_ids.end());
  for (const auto& n : ex.negative_ids) {
    if (pos.count(n)) {
      throw std::invalid_argument("doc_id " + n + " is both positive and negative for \"" +
                                  ex.query + "\"");
    }
  }
}

Corpus::Corpus(std::vector<Passage> passages) : passages_(std::move(passages)) {
  by_id_.reserve(passages_.size());
  for (std::size_t i = 0; i < passages_.size(); ++i) {
    if (!by_id_.emplace(passages_[i].doc_id, i).second) {
      throw std::invalid_argument("duplicate doc_id in corpus: " + passages_[i].doc_id);
    }
  }
}

std::optional<std::size_t> Corpus::find(std::string_view doc_id) const {
  auto it = by_id_.find(std::string(doc_id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::size_t Corpus::index_of(std::string_view doc_id) const {
  auto idx = find(doc_id);
  if (!idx) throw std::out_of_range("unknown doc_id: " + std::string(doc_id));
  return *idx;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string viewer_token_text(std::size_t viewer) {
  return "[VIE_" + std::to_string(viewer) + "]";
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 3 || tokens_[kPadId] != "[PAD]" || tokens_[kUnkId] != "[UNK]" ||
      tokens_[kSepId] != "[SEP]") {
    throw std::invalid_argument("vocab must start with [PAD], [UNK], [SEP]");
  }
  while (kFirstViewerId + n_viewers_ < tokens_.size() &&
         tokens_[kFirstViewerId + n_viewers_] == viewer_token_text(n_viewers_)) {
    ++n_viewers_;
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw std::invalid_argument("duplicate vocab token: " + tokens_[i]);
    }
  }
}

std::int32_t Vocab::id(std::string_view token) const {
  return find(token).value_or(kUnkId);
}

std::optional<std::int32_t> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ostringstream out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
  write_file_atomic(path, out.str());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::vector<std::string> tokens;
  for_each_line(path, [&](std::string_view line, std::size_t number) {
    auto tab = line.rfind('\t');
    if (tab == std::string_view::npos) throw JsonlError(path, number, "expected token<TAB>id");
    std::size_t id = 0;
    try {
      id = std::stoul(std::string(line.substr(tab + 1)));
    } catch (const std::exception&) {
      throw JsonlError(path, number, "bad id");
    }
    if (id != tokens.size()) throw JsonlError(path, number, "ids must be dense and sorted");
    tokens.emplace_back(line.substr(0, tab));
  });
  return Vocab(std::move(tokens));
}

Vocab build_vocab(std::span<const Passage> corpus, std::size_t max_vocab, std::size_t n_viewers) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  if (n_viewers == 0) throw std::invalid_argument("build_vocab: n_viewers must be >= 1");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& p : corpus) {
    for (auto& t : tokenize(p.title)) ++counts[t];
    for (auto& t : tokenize(p.body)) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (max_vocab > 0 && ranked.size() > max_vocab) ranked.resize(max_vocab);

  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[SEP]"};
  for (std::size_t i = 0; i <= n_viewers; ++i) tokens.push_back(viewer_token_text(i));
  for (auto& [tok, count] : ranked) tokens.push_back(tok);
  return Vocab(std::move(tokens));
}

namespace {

std::vector<std::int32_t> content_ids(const Passage& p, const Vocab& vocab) {
  std::vector<std::int32_t> ids;
  auto title = tokenize(p.title);
  if (!title.empty()) {
    for (auto& t : title) ids.push_back(vocab.id(t));
    ids.push_back(kSepId);
  }
  for (auto& t : tokenize(p.body)) ids.push_back(vocab.id(t));
  return ids;
}

}  // namespace

TokenSequence encode_document_tokens(const Passage& p, const Vocab& vocab, std::size_t n_viewers,
                                     std::size_t max_len) {
  if (n_viewers == 0) throw std::invalid_argument("encode_document_tokens: n_viewers must be >= 1");
  if (n_viewers + 1 > vocab.n_viewers()) {
    throw std::invalid_argument("encode_document_tokens: vocab registers only " +
                                std::to_string(vocab.n_viewers()) + " viewer tokens, " +
                                std::to_string(n_viewers + 1) + " needed");
  }
  if (max_len < n_viewers + 1) {
    throw std::invalid_argument("encode_document_tokens: max_len too small for viewer prefix");
  }
  auto content = content_ids(p, vocab);
  const std::size_t room = max_len - n_viewers - 1;
  if (content.size() > room) content.resize(room);

  TokenSequence seq;
  seq.n_views = n_viewers;
  for (std::size_t i = 0; i < n_viewers; ++i) {
    seq.ids.push_back(doc_viewer_token_id(i));
    seq.positions.push_back(0);
  }
  std::int32_t pos = 1;
  for (auto id : content) {
    seq.ids.push_back(id);
    seq.positions.push_back(pos++);
  }
  seq.ids.push_back(kSepId);
  seq.positions.push_back(pos);
  return seq;
}

TokenSequence encode_document_first_k(const Passage& p, const Vocab& vocab, std::size_t k,
                                      std::size_t max_len) {
  if (k == 0) throw std::invalid_argument("encode_document_first_k: k must be >= 1");
  if (vocab.n_viewers() == 0) throw std::invalid_argument("encode_document_first_k: vocab has no viewer token");
  if (max_len < std::max<std::size_t>(k, 2)) {
    throw std::invalid_argument("encode_document_first_k: max_len smaller than k");
  }
  auto content = content_ids(p, vocab);
  const std::size_t room = max_len - 2;
  if (content.size() > room) content.resize(room);

  TokenSequence seq;
  seq.n_views = k;
  seq.ids.push_back(kQueryViewerId);
  seq.positions.push_back(0);
  std::int32_t pos = 1;
  for (auto id : content) {
    seq.ids.push_back(id);
    seq.positions.push_back(pos++);
  }
  seq.ids.push_back(kSepId);
  seq.positions.push_back(pos++);
  while (seq.ids.size() < k) {
    seq.ids.push_back(kPadId);
    seq.positions.push_back(pos++);
  }
  return seq;
}

TokenSequence encode_query_tokens(std::string_view query, const Vocab& vocab, std::size_t max_len) {
  if (vocab.n_viewers() == 0) throw std::invalid_argument("encode_query_tokens: vocab has no viewer token");
  if (max_len < 2) throw std::invalid_argument("encode_query_tokens: max_len must be >= 2");
  auto tokens = tokenize(query);
  if (tokens.empty()) throw std::invalid_argument("encode_query_tokens: empty query");
  const std::size_t room = max_len - 2;
  if (tokens.size() > room) tokens.resize(room);

  TokenSequence seq;
  seq.n_views = 1;
  seq.ids.push_back(kQueryViewerId);
  seq.positions.push_back(0);
  std::int32_t pos = 1;
  for (auto& t : tokens) {
    seq.ids.push_back(vocab.id(t));
    seq.positions.push_back(pos++);
  }
  seq.ids.push_back(kSepId);
  seq.positions.push_back(pos);
  return seq;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto push = [&](std::string_view piece) {
    auto b = piece.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return;
    auto e = piece.find_last_not_of(" \t\r\n");
    out.emplace_back(piece.substr(b, e - b + 1));
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    const bool boundary = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
    if (!boundary) continue;
    push(text.substr(start, i + 1 - start));
    start = i + 1;
  }
  push(text.substr(start));
  return out;
}

namespace {

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string> split_passage(const Passage& p, SplitMode mode,
                                       std::vector<std::string>& warnings) {
  if (mode.kind == SplitMode::Kind::sentence) {
    auto sentences = split_sentences(p.body);
    if (sentences.empty()) return {p.body};
    return sentences;
  }
  auto toks = tokenize(p.body);
  if (toks.size() < mode.k) {
    warnings.push_back(p.doc_id + ": " + std::to_string(toks.size()) + " tokens < k=" +
                       std::to_string(mode.k) + ", kept as a single chunk");
    return {p.body};
  }
  // Equal-length chunks; a non-divisible tail leaves the last chunk short and
  // the encoder pads it.
  const std::size_t len = (toks.size() + mode.k - 1) / mode.k;
  std::vector<std::string> chunks;
  for (std::size_t start = 0; start < toks.size(); start += len) {
    std::string chunk;
    for (std::size_t i = start; i < std::min(toks.size(), start + len); ++i) {
      if (!chunk.empty()) chunk.push_back(' ');
      chunk += toks[i];
    }
    chunks.push_back(std::move(chunk));
  }
  return chunks;
}

}  // namespace

SplitResult split_corpus(const Corpus& corpus, std::span<const TrainExample> examples,
                         SplitMode mode) {
  if (mode.kind == SplitMode::Kind::k_equal && mode.k < 2) {
    throw std::invalid_argument("split_corpus: k_equal requires k >= 2");
  }
  SplitResult result;
  std::vector<Passage> pieces;
  std::unordered_map<std::string, std::vector<std::size_t>> piece_index;
  for (const auto& p : corpus.passages()) {
    auto bodies = split_passage(p, mode, result.warnings);
    auto& ids = result.pieces[p.doc_id];
    auto& idx = piece_index[p.doc_id];
    if (bodies.size() == 1 && bodies.front() == p.body) {
      ids.push_back(p.doc_id);
      idx.push_back(pieces.size());
      pieces.push_back(p);
      continue;
    }
    for (std::size_t i = 0; i < bodies.size(); ++i) {
      Passage piece{p.doc_id + "#" + std::to_string(i), p.title, std::move(bodies[i])};
      ids.push_back(piece.doc_id);
      idx.push_back(pieces.size());
      pieces.push_back(std::move(piece));
    }
  }
  for (const auto& w : result.warnings) spdlog::warn("split_corpus: {}", w);

  auto pieces_of = [&](const std::string& id) -> const std::vector<std::size_t>& {
    auto it = piece_index.find(id);
    if (it == piece_index.end()) throw std::out_of_range("split_corpus: unknown doc_id " + id);
    return it->second;
  };

  for (const auto& ex : examples) {
    TrainExample out;
    out.query = ex.query;
    out.answers = ex.answers;
    std::vector<std::string> query_tokens = tokenize(ex.query);
    std::unordered_set<std::string> query_set(query_tokens.begin(), query_tokens.end());
    for (const auto& pos_id : ex.positive_ids) {
      const auto& idx = pieces_of(pos_id);
      std::optional<std::size_t> chosen;
      for (const auto& answer : ex.answers) {
        const auto needle = lowercase(answer);
        for (auto i : idx) {
          if (lowercase(pieces[i].body).find(needle) != std::string::npos) {
            chosen = i;
            break;
          }
        }
        if (chosen) break;
      }
      if (!chosen) {
        std::size_t best_overlap = 0;
        chosen = idx.front();
        for (auto i : idx) {
          std::unordered_set<std::string> seen;
          std::size_t overlap = 0;
          for (auto& t : tokenize(pieces[i].body)) {
            if (query_set.count(t) && seen.insert(t).second) ++overlap;
          }
          if (overlap > best_overlap) {
            best_overlap = overlap;
            chosen = i;
          }
        }
      }
      out.positive_ids.push_back(pieces[*chosen].doc_id);
    }
    for (const auto& neg_id : ex.negative_ids) {
      for (auto i : pieces_of(neg_id)) out.negative_ids.push_back(pieces[i].doc_id);
    }
    result.examples.push_back(std::move(out));
  }
  result.corpus = Corpus(std::move(pieces));
  return result;
}

std::vector<Passage> read_corpus_jsonl(const std::filesystem::path& path) {
  std::vector<Passage> out;
  for_each_line(path, [&](std::string_view line, std::size_t number) {
    try {
      auto j = json::parse(line);
      Passage p;
      p.doc_id = j.at("doc_id").get<std::string>();
      p.title = j.value("title", std::string());
      p.body = j.at("text").get<std::string>();
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw JsonlError(path, number, e.what());
    }
  });
  return out;
}

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const Passage> corpus) {
  std::string out;
  for (const auto& p : corpus) {
    json j{{"doc_id", p.doc_id}, {"title", p.title}, {"text", p.body}};
    out += j.dump();
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

std::vector<TrainExample> read_examples_jsonl(const std::filesystem::path& path) {
  std::vector<TrainExample> out;
  for_each_line(path, [&](std::string_view line, std::size_t number) {
    TrainExample ex;
    try {
      auto j = json::parse(line);
      ex.query = j.at("query").get<std::string>();
      ex.positive_ids = j.at("positive_ids").get<std::vector<std::string>>();
      ex.negative_ids = j.value("negative_ids", std::vector<std::string>{});
      ex.answers = j.value("answers", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw JsonlError(path, number, e.what());
    }
    try {
      validate_example(ex);
    } catch (const std::invalid_argument& e) {
      throw JsonlError(path, number, e.what());
    }
    out.push_back(std::move(ex));
  });
  return out;
}

void write_examples_jsonl(const std::filesystem::path& path, std::span<const TrainExample> examples) {
  std::string out;
  for (const auto& ex : examples) {
    json j{{"query", ex.query}, {"positive_ids", ex.positive_ids}, {"negative_ids", ex.negative_ids}};
    if (!ex.answers.empty()) j["answers"] = ex.answers;
    out += j.dump();
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

}  // namespace mvr
