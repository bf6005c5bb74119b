#include "cli_commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mvr/eval_metrics.hpp"
#include "mvr/io_util.hpp"
#include "mvr/mv_index.hpp"
#include "mvr/run_config.hpp"
#include "mvr/synthetic.hpp"
#include "mvr/text_pipeline.hpp"
#include "mvr/trainer.hpp"

namespace mvr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Failure with a machine-readable code and exit status.
struct CommandError : std::runtime_error {
  CommandError(std::string code, const std::string& what, int exit_code = 1)
      : std::runtime_error(what), code(std::move(code)), exit_code(exit_code) {}
  std::string code;
  int exit_code;
};

CommandError usage_error(const std::string& what) { return {"usage", what, 2}; }

void setup_logging() {
  auto logger = spdlog::get("mvr");
  if (!logger) {
    logger = spdlog::stderr_color_mt("mvr");
    spdlog::set_default_logger(logger);
  }
  spdlog::level::level_enum level = spdlog::level::info;
  if (const char* env = std::getenv("MVR_LOG_LEVEL")) {
    const std::string name = env;
    level = spdlog::level::from_str(name);
    if (level == spdlog::level::off && name != "off") level = spdlog::level::info;
  }
  spdlog::set_level(level);
}

void require_path(const std::string& value, const char* key) {
  if (value.empty()) throw usage_error(std::string("missing required setting: ") + key);
}

void require_file(const std::string& value, const char* key) {
  require_path(value, key);
  if (!fs::exists(value)) throw CommandError("missing_file", std::string(key) + " not found: " + value);
}

// Config file, then --set key=value pairs, then dedicated flags.
struct ConfigSources {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;

  void bind(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { flags[key] = v; }, help);
  }

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file");
    app->add_option("--set", sets, "override a config key, key=value (repeatable)");
  }

  RunConfig resolve() const {
    try {
      RunConfig cfg;
      if (!config_path.empty()) {
        if (!fs::exists(config_path)) throw CommandError("missing_file", "config not found: " + config_path);
        cfg = RunConfig::load(config_path);
      }
      for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw usage_error("--set expects key=value, got '" + s + "'");
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
      }
      for (const auto& [k, v] : flags) cfg.set(k, v);
      return cfg;
    } catch (const ConfigError& e) {
      throw CommandError("config", e.what(), 2);
    }
  }
};

std::string vocab_path(const RunConfig& cfg) {
  return cfg.vocab.empty() ? cfg.checkpoint + ".vocab.tsv" : cfg.vocab;
}

std::string metrics_path(const RunConfig& cfg) {
  return cfg.metrics.empty() ? cfg.checkpoint + ".metrics.jsonl" : cfg.metrics;
}

void emit(std::ostream& out, const json& j) { out << j.dump() << '\n'; }

// ---- gen-synthetic ------------------------------------------------------

struct GenArgs {
  std::string out_dir;
  SyntheticSpec spec;
};

int cmd_gen_synthetic(const GenArgs& a, std::ostream& out) {
  try {
    a.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw usage_error(e.what());
  }
  const auto data = generate_synthetic(a.spec);
  write_synthetic(data, a.out_dir);
  emit(out, {{"out", a.out_dir},
             {"documents", data.corpus.size()},
             {"train_queries", data.train.size()},
             {"eval_queries", data.eval.size()}});
  return 0;
}

// ---- split ---------------------------------------------------------------

struct SplitArgs {
  std::string corpus, train, eval, out_dir, mode = "sentence";
  std::size_t k = 4;
};

int cmd_split(const SplitArgs& a, std::ostream& out) {
  SplitMode mode;
  if (a.mode == "sentence") {
    mode = SplitMode::sentence();
  } else if (a.mode == "k_equal") {
    if (a.k == 0) throw usage_error("--k must be positive");
    mode = SplitMode::k_equal(a.k);
  } else {
    throw usage_error("--mode must be sentence or k_equal");
  }
  require_file(a.corpus, "corpus");
  require_file(a.train, "train");
  if (!a.eval.empty()) require_file(a.eval, "eval");

  const Corpus corpus(read_corpus_jsonl(a.corpus));
  const auto train = read_examples_jsonl(a.train);
  auto split = split_corpus(corpus, train, mode);
  for (const auto& w : split.warnings) spdlog::warn("{}", w);
  fs::create_directories(a.out_dir);
  write_corpus_jsonl(fs::path(a.out_dir) / "corpus.jsonl", split.corpus.passages());
  write_examples_jsonl(fs::path(a.out_dir) / "train.jsonl", split.examples);
  std::size_t n_eval = 0;
  if (!a.eval.empty()) {
    const auto eval = read_examples_jsonl(a.eval);
    auto eval_split = split_corpus(corpus, eval, mode);
    write_examples_jsonl(fs::path(a.out_dir) / "eval.jsonl", eval_split.examples);
    n_eval = eval_split.examples.size();
  }
  emit(out, {{"out", a.out_dir},
             {"pieces", split.corpus.size()},
             {"train_queries", split.examples.size()},
             {"eval_queries", n_eval},
             {"warnings", split.warnings.size()}});
  return 0;
}

// ---- train ---------------------------------------------------------------

int cmd_train(const RunConfig& cfg, bool resume, std::ostream& out) {
  require_file(cfg.corpus, "corpus");
  require_file(cfg.train, "train");
  require_path(cfg.checkpoint, "checkpoint");
  try {
    cfg.training.validate();
    cfg.training.loss.validate();
  } catch (const std::invalid_argument& e) {
    throw CommandError("config", e.what(), 2);
  }
  if (resume && !fs::exists(cfg.checkpoint)) {
    throw CommandError("missing_file", "checkpoint to resume not found: " + cfg.checkpoint);
  }

  const Corpus corpus(read_corpus_jsonl(cfg.corpus));
  auto examples = read_examples_jsonl(cfg.train);
  const std::size_t n_queries = examples.size();
  const std::string vpath = vocab_path(cfg);
  Vocab vocab;
  if (resume) {
    require_file(vpath, "vocab");
    vocab = Vocab::load(vpath);
  } else {
    vocab = build_vocab(corpus.passages(), cfg.max_vocab, cfg.encoder.n_viewers);
    vocab.save(vpath);
  }
  EncoderConfig enc = cfg.encoder;
  enc.vocab_size = vocab.size();
  try {
    enc.validate();
  } catch (const std::invalid_argument& e) {
    throw CommandError("config", e.what(), 2);
  }

  const Trainer trainer(corpus, std::move(examples), vocab, enc, cfg.training);
  TrainState state;
  std::vector<std::string> metric_lines;
  const std::string mpath = metrics_path(cfg);
  if (resume) {
    state = load_checkpoint(cfg.checkpoint);
    if (state.params.config != enc) {
      throw CommandError("checkpoint", "checkpoint encoder config differs from the requested one");
    }
    state.config.epochs = cfg.training.epochs;
    if (state.config != cfg.training) {
      throw CommandError("checkpoint", "checkpoint training config differs from the requested one");
    }
    if (fs::exists(mpath)) {
      for_each_line(mpath, [&](std::string_view line, std::size_t) {
        if (metric_lines.size() < state.epoch) metric_lines.emplace_back(line);
      });
    }
  } else {
    state = trainer.initial_state();
  }

  spdlog::info("training: {} queries, {} documents, {} steps/epoch, {} parameters", n_queries, corpus.size(),
               trainer.steps_per_epoch(), state.params.parameter_count());
  EpochMetrics last;
  while (state.epoch < cfg.training.epochs) {
    last = trainer.train_epoch(state);
    metric_lines.push_back(to_json(last).dump());
    std::string text;
    for (const auto& l : metric_lines) text += l + "\n";
    write_file_atomic(mpath, text);
    save_checkpoint(state, cfg.checkpoint);
    spdlog::info("epoch {} tau {:.4f} loss {:.6f} local {:.6f}", last.epoch, last.tau, last.mean_loss,
                 last.mean_local_loss);
  }
  if (!fs::exists(cfg.checkpoint)) save_checkpoint(state, cfg.checkpoint);
  emit(out, {{"checkpoint", cfg.checkpoint},
             {"vocab", vpath},
             {"metrics", mpath},
             {"epochs", state.epoch},
             {"checkpoint_hash", checkpoint_hash(state.params)}});
  return 0;
}

// ---- index / search / eval / analyze ------------------------------------

struct Model {
  TrainState state;
  Vocab vocab;
  std::string hash;
};

Model load_model(const RunConfig& cfg) {
  require_file(cfg.checkpoint, "checkpoint");
  const std::string vpath = vocab_path(cfg);
  require_file(vpath, "vocab");
  Model m;
  m.state = load_checkpoint(cfg.checkpoint);
  m.vocab = Vocab::load(vpath);
  if (m.vocab.size() != m.state.params.config.vocab_size) {
    throw CommandError("vocab_mismatch", "vocab size " + std::to_string(m.vocab.size()) +
                                             " does not match checkpoint vocab_size " +
                                             std::to_string(m.state.params.config.vocab_size));
  }
  m.hash = checkpoint_hash(m.state.params);
  return m;
}

MultiVectorIndex load_index(const RunConfig& cfg, const Model& model) {
  require_file(cfg.index, "index");
  auto index = MultiVectorIndex::load(cfg.index);
  if (index.checkpoint_hash() != model.hash) {
    throw CommandError("index_mismatch", "index was built from checkpoint " + index.checkpoint_hash() +
                                             ", loaded checkpoint is " + model.hash);
  }
  if (cfg.index_mode == SearchMode::Kind::ann) index.build_graph(cfg.hnsw);
  return index;
}

int cmd_index(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.corpus, "corpus");
  require_path(cfg.index, "index");
  const Model model = load_model(cfg);
  const Corpus corpus(read_corpus_jsonl(cfg.corpus));
  const auto index = build_index(corpus, model.vocab, model.state.params, model.hash);
  index.save(cfg.index);
  emit(out, {{"index", cfg.index},
             {"documents", index.doc_count()},
             {"entries", index.size()},
             {"checkpoint_hash", model.hash}});
  return 0;
}

std::vector<std::string> read_queries(const std::string& path) {
  std::vector<std::string> queries;
  for_each_line(path, [&](std::string_view line, std::size_t number) {
    if (line.front() == '{') {
      try {
        queries.push_back(json::parse(line).at("query").get<std::string>());
      } catch (const json::exception& e) {
        throw JsonlError(path, number, e.what());
      }
    } else {
      queries.emplace_back(line);
    }
  });
  return queries;
}

int cmd_search(const RunConfig& cfg, const std::vector<std::string>& query_texts, const std::string& queries_file,
               std::ostream& out) {
  if (cfg.top_k == 0) throw usage_error("top_k must be >= 1");
  if (query_texts.empty() && queries_file.empty()) throw usage_error("give --query or --queries");
  if (!queries_file.empty()) require_file(queries_file, "queries");
  const Model model = load_model(cfg);
  const auto index = load_index(cfg, model);
  std::vector<std::string> queries = query_texts;
  if (!queries_file.empty()) {
    auto more = read_queries(queries_file);
    queries.insert(queries.end(), more.begin(), more.end());
  }
  const SearchMode mode = cfg.search_mode();
  for (const auto& q : queries) {
    const auto emb = forward_query(model.state.params, encode_query(q, model.vocab, model.state.params.config));
    emit(out, {{"query", q}, {"results", to_json(index.search(emb.view(0), cfg.top_k, mode))}});
  }
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& out_file, std::ostream& out) {
  require_file(cfg.eval, "eval");
  const Model model = load_model(cfg);
  const auto index = load_index(cfg, model);
  const auto eval = read_examples_jsonl(cfg.eval);
  const auto report = evaluate_retrieval(index, model.state.params, model.vocab, eval, cfg.eval_ks, cfg.search_mode());
  json j = to_json(report);
  j["mode"] = cfg.index_mode == SearchMode::Kind::ann ? "ann" : "flat";
  if (!out_file.empty()) write_file_atomic(out_file, j.dump() + "\n");
  emit(out, j);
  return 0;
}

int cmd_analyze(const RunConfig& cfg, const std::string& out_file, const std::string& histogram_file,
                std::ostream& out) {
  require_file(cfg.corpus, "corpus");
  require_file(cfg.eval, "eval");
  const Model model = load_model(cfg);
  const Corpus corpus(read_corpus_jsonl(cfg.corpus));
  const auto eval = read_examples_jsonl(cfg.eval);
  const auto diag = collapse_report(model.state.params, model.vocab, corpus, eval, cfg.lv_normalization);
  const json j = to_json(diag);
  if (!out_file.empty()) write_file_atomic(out_file, j.dump() + "\n");
  if (!histogram_file.empty()) write_file_atomic(histogram_file, histogram_csv(diag));
  emit(out, j);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  setup_logging();
  CLI::App app{"Multi-view dense retrieval: data generation, training, indexing, search and diagnostics", "mvr"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "write a synthetic multi-segment corpus with train/eval queries");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--n-docs", gen.spec.n_docs);
  gen_cmd->add_option("--segments", gen.spec.segments_per_doc, "segments per document");
  gen_cmd->add_option("--topics", gen.spec.n_topics, "topic pool size; 0 uses one topic per segment slot");
  gen_cmd->add_option("--vocab-size", gen.spec.vocab_size);
  gen_cmd->add_option("--queries-per-segment", gen.spec.queries_per_segment);
  gen_cmd->add_option("--eval-queries-per-segment", gen.spec.eval_queries_per_segment);
  gen_cmd->add_option("--segment-len", gen.spec.segment_len);
  gen_cmd->add_option("--query-len", gen.spec.query_len);
  gen_cmd->add_option("--query-segment-tokens", gen.spec.query_segment_tokens);
  gen_cmd->add_option("--hard-negatives", gen.spec.hard_negatives);
  gen_cmd->add_option("--seed", gen.spec.seed);

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "split documents into sentence or k-equal pieces");
  split_cmd->add_option("--corpus", split.corpus)->required();
  split_cmd->add_option("--train", split.train)->required();
  split_cmd->add_option("--eval", split.eval);
  split_cmd->add_option("--out", split.out_dir)->required();
  split_cmd->add_option("--mode", split.mode, "sentence or k_equal");
  split_cmd->add_option("--k", split.k, "pieces per document for k_equal");

  ConfigSources train_src;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "train the dual encoder");
  train_src.attach(train_cmd);
  train_cmd->add_flag("--resume", resume, "continue from the existing checkpoint");
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--corpus", "corpus"},       {"--train", "train"},         {"--checkpoint", "checkpoint"},
           {"--vocab", "vocab"},         {"--metrics", "metrics"},     {"--epochs", "epochs"},
           {"--seed", "seed"},           {"--batch-size", "batch_size"}, {"--lr", "learning_rate"},
           {"--n-viewers", "n_viewers"}, {"--view-mode", "view_mode"}, {"--lambda", "lambda"},
           {"--tau-mode", "tau_mode"},   {"--d-model", "d_model"}}) {
    train_src.bind(train_cmd, flag, key, "sets " + key);
  }

  ConfigSources index_src;
  auto* index_cmd = app.add_subcommand("index", "encode a corpus into a multi-vector index");
  index_src.attach(index_cmd);
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--corpus", "corpus"}, {"--checkpoint", "checkpoint"}, {"--vocab", "vocab"}, {"--index", "index"}}) {
    index_src.bind(index_cmd, flag, key, "sets " + key);
  }

  ConfigSources search_src;
  std::vector<std::string> query_texts;
  std::string queries_file;
  auto* search_cmd = app.add_subcommand("search", "retrieve documents; one JSON line per query");
  search_src.attach(search_cmd);
  search_cmd->add_option("--query", query_texts, "query text (repeatable)");
  search_cmd->add_option("--queries", queries_file, "file with one query per line or JSONL with a query field");
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--index", "index"}, {"--checkpoint", "checkpoint"}, {"--vocab", "vocab"}, {"--top-k", "top_k"},
           {"--mode", "index_mode"}, {"--ef", "hnsw_ef"}, {"--overfetch", "overfetch"}}) {
    search_src.bind(search_cmd, flag, key, "sets " + key);
  }

  ConfigSources eval_src;
  std::string eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Recall@k of an index on an eval set");
  eval_src.attach(eval_cmd);
  eval_cmd->add_option("--out", eval_out, "also write the report here");
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--index", "index"}, {"--checkpoint", "checkpoint"}, {"--vocab", "vocab"}, {"--eval", "eval"},
           {"--ks", "eval_ks"}, {"--mode", "index_mode"}, {"--ef", "hnsw_ef"}, {"--overfetch", "overfetch"}}) {
    eval_src.bind(eval_cmd, flag, key, "sets " + key);
  }

  ConfigSources analyze_src;
  std::string analyze_out, histogram_out;
  auto* analyze_cmd = app.add_subcommand("analyze", "viewer diversity diagnostics (LV, PPL, histogram)");
  analyze_src.attach(analyze_cmd);
  analyze_cmd->add_option("--out", analyze_out, "also write the report here");
  analyze_cmd->add_option("--histogram", histogram_out, "write the viewer-hit histogram as CSV");
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--checkpoint", "checkpoint"}, {"--vocab", "vocab"}, {"--corpus", "corpus"}, {"--eval", "eval"},
           {"--normalization", "lv_normalization"}}) {
    analyze_src.bind(analyze_cmd, flag, key, "sets " + key);
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
      app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      throw usage_error(e.what());
    }

    if (*gen_cmd) return cmd_gen_synthetic(gen, out);
    if (*split_cmd) return cmd_split(split, out);
    if (*train_cmd) return cmd_train(train_src.resolve(), resume, out);
    if (*index_cmd) return cmd_index(index_src.resolve(), out);
    if (*search_cmd) return cmd_search(search_src.resolve(), query_texts, queries_file, out);
    if (*eval_cmd) return cmd_eval(eval_src.resolve(), eval_out, out);
    if (*analyze_cmd) return cmd_analyze(analyze_src.resolve(), analyze_out, histogram_out, out);
    throw usage_error("no subcommand");
  } catch (const CommandError& e) {
    err << "error: " << e.code << ": " << e.what() << '\n';
    return e.exit_code;
  } catch (const JsonlError& e) {
    err << "error: malformed_input: " << e.what() << '\n';
    return 1;
  } catch (const NonFiniteLossError& e) {
    err << "error: non_finite_loss: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: invalid_input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: runtime: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mvr::cli
