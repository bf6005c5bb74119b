#include "mvr/run_config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "mvr/io_util.hpp"

namespace mvr {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("invalid number for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view v) {
  Int out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("invalid integer for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid boolean for " + std::string(key) + ": '" + std::string(v) + "'");
}

std::string mode_name(SearchMode::Kind k) { return k == SearchMode::Kind::ann ? "ann" : "flat"; }

std::vector<std::size_t> parse_ks(std::string_view key, std::string_view v) {
  std::vector<std::size_t> ks;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = trim(v.substr(0, comma));
    const auto k = parse_int<std::size_t>(key, item);
    if (k == 0) throw ConfigError("eval_ks entries must be positive");
    ks.push_back(k);
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (ks.empty()) throw ConfigError("eval_ks must not be empty");
  return ks;
}

std::string join_ks(const std::vector<std::size_t>& ks) {
  std::string out;
  for (std::size_t i = 0; i < ks.size(); ++i) out += (i ? "," : "") + std::to_string(ks[i]);
  return out;
}

// Wraps an invalid_argument from the enum parsers as a config error.
template <typename Fn>
auto convert(Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view raw) {
  const std::string_view v = trim(raw);
  auto& enc = encoder;
  auto& tr = training;
  auto& loss = training.loss;
  const std::map<std::string_view, std::function<void()>> setters = {
      {"corpus", [&] { corpus = v; }},
      {"train", [&] { train = v; }},
      {"eval", [&] { eval = v; }},
      {"checkpoint", [&] { checkpoint = v; }},
      {"vocab", [&] { vocab = v; }},
      {"index", [&] { index = v; }},
      {"metrics", [&] { metrics = v; }},
      {"max_vocab", [&] { max_vocab = parse_int<std::size_t>(key, v); }},
      {"d_model", [&] { enc.d_model = parse_int<std::size_t>(key, v); }},
      {"n_heads", [&] { enc.n_heads = parse_int<std::size_t>(key, v); }},
      {"d_ff", [&] { enc.d_ff = parse_int<std::size_t>(key, v); }},
      {"n_viewers", [&] { enc.n_viewers = parse_int<std::size_t>(key, v); }},
      {"max_len", [&] { enc.max_len = parse_int<std::size_t>(key, v); }},
      {"n_layers", [&] { enc.n_layers = parse_int<std::size_t>(key, v); }},
      {"init_seed", [&] { enc.seed = parse_int<std::uint64_t>(key, v); }},
      {"tied", [&] { enc.tied = parse_bool(key, v); }},
      {"viewer_init_scale", [&] { enc.viewer_init_scale = parse_double(key, v); }},
      {"attention_init_scale", [&] { enc.attention_init_scale = parse_double(key, v); }},
      {"view_mode", [&] { enc.view_mode = convert([&] { return parse_view_mode(v); }); }},
      {"batch_size", [&] { tr.batch_size = parse_int<std::size_t>(key, v); }},
      {"epochs", [&] { tr.epochs = parse_int<std::size_t>(key, v); }},
      {"learning_rate", [&] { tr.learning_rate = parse_double(key, v); }},
      {"optimizer", [&] { tr.optimizer = convert([&] { return parse_optimizer(v); }); }},
      {"adam_beta1", [&] { tr.adam_beta1 = parse_double(key, v); }},
      {"adam_beta2", [&] { tr.adam_beta2 = parse_double(key, v); }},
      {"adam_eps", [&] { tr.adam_eps = parse_double(key, v); }},
      {"in_batch_negatives", [&] { tr.in_batch_negatives = parse_bool(key, v); }},
      {"hard_negatives", [&] { tr.hard_negatives_per_query = parse_int<std::size_t>(key, v); }},
      {"seed", [&] { tr.seed = parse_int<std::uint64_t>(key, v); }},
      {"grad_clip", [&] { tr.grad_clip = parse_double(key, v); }},
      {"lambda", [&] { loss.lambda = parse_double(key, v); }},
      {"alpha", [&] { loss.alpha = parse_double(key, v); }},
      {"tau_floor", [&] { loss.tau_floor = parse_double(key, v); }},
      {"tau_mode", [&] { loss.tau_mode = convert([&] { return parse_tau_mode(v); }); }},
      {"fixed_tau", [&] { loss.fixed_tau = parse_double(key, v); }},
      {"index_mode",
       [&] {
         if (v == "flat") index_mode = SearchMode::Kind::flat;
         else if (v == "ann") index_mode = SearchMode::Kind::ann;
         else throw ConfigError("index_mode must be flat or ann, got '" + std::string(v) + "'");
       }},
      {"hnsw_m", [&] { hnsw.m = parse_int<std::size_t>(key, v); }},
      {"hnsw_ef_construction", [&] { hnsw.ef_construction = parse_int<std::size_t>(key, v); }},
      {"hnsw_ef", [&] { hnsw.ef_search = parse_int<std::size_t>(key, v); }},
      {"hnsw_seed", [&] { hnsw.seed = parse_int<std::uint64_t>(key, v); }},
      {"overfetch", [&] { overfetch = parse_int<std::size_t>(key, v); }},
      {"top_k", [&] { top_k = parse_int<std::size_t>(key, v); }},
      {"eval_ks", [&] { eval_ks = parse_ks(key, v); }},
      {"lv_normalization", [&] { lv_normalization = convert([&] { return parse_normalization(v); }); }},
  };
  auto it = setters.find(trim(key));
  if (it == setters.end()) throw ConfigError("unknown config key: " + std::string(trim(key)));
  it->second();
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  const auto& enc = encoder;
  const auto& tr = training;
  const auto& loss = training.loss;
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  return {
      {"corpus", corpus},
      {"train", train},
      {"eval", eval},
      {"checkpoint", checkpoint},
      {"vocab", vocab},
      {"index", index},
      {"metrics", metrics},
      {"max_vocab", std::to_string(max_vocab)},
      {"d_model", std::to_string(enc.d_model)},
      {"n_heads", std::to_string(enc.n_heads)},
      {"d_ff", std::to_string(enc.d_ff)},
      {"n_viewers", std::to_string(enc.n_viewers)},
      {"max_len", std::to_string(enc.max_len)},
      {"n_layers", std::to_string(enc.n_layers)},
      {"init_seed", std::to_string(enc.seed)},
      {"tied", b(enc.tied)},
      {"viewer_init_scale", format_double(enc.viewer_init_scale)},
      {"attention_init_scale", format_double(enc.attention_init_scale)},
      {"view_mode", to_string(enc.view_mode)},
      {"batch_size", std::to_string(tr.batch_size)},
      {"epochs", std::to_string(tr.epochs)},
      {"learning_rate", format_double(tr.learning_rate)},
      {"optimizer", to_string(tr.optimizer)},
      {"adam_beta1", format_double(tr.adam_beta1)},
      {"adam_beta2", format_double(tr.adam_beta2)},
      {"adam_eps", format_double(tr.adam_eps)},
      {"in_batch_negatives", b(tr.in_batch_negatives)},
      {"hard_negatives", std::to_string(tr.hard_negatives_per_query)},
      {"seed", std::to_string(tr.seed)},
      {"grad_clip", format_double(tr.grad_clip)},
      {"lambda", format_double(loss.lambda)},
      {"alpha", format_double(loss.alpha)},
      {"tau_floor", format_double(loss.tau_floor)},
      {"tau_mode", to_string(loss.tau_mode)},
      {"fixed_tau", format_double(loss.fixed_tau)},
      {"index_mode", mode_name(index_mode)},
      {"hnsw_m", std::to_string(hnsw.m)},
      {"hnsw_ef_construction", std::to_string(hnsw.ef_construction)},
      {"hnsw_ef", std::to_string(hnsw.ef_search)},
      {"hnsw_seed", std::to_string(hnsw.seed)},
      {"overfetch", std::to_string(overfetch)},
      {"top_k", std::to_string(top_k)},
      {"eval_ks", join_ks(eval_ks)},
      {"lv_normalization", to_string(lv_normalization)},
  };
}

SearchMode RunConfig::search_mode() const {
  if (index_mode == SearchMode::Kind::ann) return SearchMode::ann(hnsw.ef_search, overfetch);
  return SearchMode::flat();
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
  return out;
}

RunConfig RunConfig::parse(std::string_view text, std::string_view source) {
  RunConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("config file not found: " + path.string());
  return parse(read_file(path), path.string());
}

void RunConfig::save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

}  // namespace mvr
