#include "cli_commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "mvr/io_util.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  setenv("MVR_LOG_LEVEL", "warn", 1);
  std::ostringstream out, err;
  const int code = mvr::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mvr_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> small_model_flags() {
  return {"--d-model", "16", "--n-viewers", "2", "--batch-size", "16",
          "--set", "n_heads=2", "--set", "d_ff=16"};
}

class PipelineTest : public ::testing::Test {
 protected:
  // gen -> train -> index under dir; returns the train outcome.
  static Outcome build(const fs::path& dir) {
    auto gen = run({"gen-synthetic", "--out", (dir / "data").string(), "--n-docs", "50", "--seed", "3"});
    EXPECT_EQ(gen.code, 0) << gen.err;
    std::vector<std::string> train{"train", "--corpus", (dir / "data/corpus.jsonl").string(), "--train",
                                   (dir / "data/train.jsonl").string(), "--checkpoint", (dir / "model.ckpt").string()};
    for (const auto& f : small_model_flags()) train.push_back(f);
    train.push_back("--epochs");
    train.push_back("2");
    auto t = run(train);
    EXPECT_EQ(t.code, 0) << t.err;
    auto idx = run({"index", "--corpus", (dir / "data/corpus.jsonl").string(), "--checkpoint",
                    (dir / "model.ckpt").string(), "--index", (dir / "index").string()});
    EXPECT_EQ(idx.code, 0) << idx.err;
    return t;
  }

  static Outcome eval(const fs::path& dir, const std::vector<std::string>& extra = {}) {
    std::vector<std::string> args{"eval", "--index", (dir / "index").string(), "--checkpoint",
                                  (dir / "model.ckpt").string(), "--eval", (dir / "data/eval.jsonl").string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }
};

TEST(CliTest, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-synthetic"), std::string::npos);
}

TEST(CliTest, NoSubcommandIsUsageError) {
  const auto r = run({});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: usage:", 0), 0u) << r.err;
}

TEST(CliTest, GenSyntheticIsDeterministic) {
  const auto a = temp_dir("gen_a");
  const auto b = temp_dir("gen_b");
  ASSERT_EQ(run({"gen-synthetic", "--out", a.string(), "--n-docs", "30", "--seed", "11"}).code, 0);
  ASSERT_EQ(run({"gen-synthetic", "--out", b.string(), "--n-docs", "30", "--seed", "11"}).code, 0);
  for (const char* f : {"corpus.jsonl", "train.jsonl", "eval.jsonl", "meta.jsonl"}) {
    EXPECT_EQ(mvr::read_file(a / f), mvr::read_file(b / f)) << f;
  }
}

TEST(CliTest, GenSyntheticTopicPool) {
  const auto dir = temp_dir("gen_topics");
  ASSERT_EQ(run({"gen-synthetic", "--out", dir.string(), "--n-docs", "20", "--topics", "12"}).code, 0);
  std::set<std::string> prefixes;
  mvr::for_each_line(dir / "corpus.jsonl", [&](std::string_view line, std::size_t) {
    std::istringstream words(json::parse(line).at("text").get<std::string>());
    for (std::string w; words >> w;) prefixes.insert(w.substr(0, w.find('w')));
  });
  EXPECT_GT(prefixes.size(), 4u);
  EXPECT_LE(prefixes.size(), 12u);
  EXPECT_EQ(run({"gen-synthetic", "--out", dir.string(), "--topics", "2"}).code, 2);
}

TEST(CliTest, GenSyntheticRejectsBadSpec) {
  const auto r = run({"gen-synthetic", "--out", temp_dir("gen_bad").string(), "--vocab-size", "10"});
  EXPECT_EQ(r.code, 2);
}

TEST(CliTest, MissingInputFile) {
  const auto dir = temp_dir("missing");
  const auto r = run({"train", "--corpus", (dir / "nope.jsonl").string(), "--train", (dir / "nope2.jsonl").string(),
                      "--checkpoint", (dir / "m.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: missing_file:", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(CliTest, MalformedJsonlReportsLine) {
  const auto dir = temp_dir("malformed");
  mvr::write_file_atomic(dir / "corpus.jsonl", "{\"doc_id\":\"a\",\"text\":\"x y\"}\n{\"doc_id\":\"b\",\"text\":\n");
  mvr::write_file_atomic(dir / "train.jsonl", "{\"query\":\"x\",\"positive_ids\":[\"a\"],\"negative_ids\":[]}\n");
  const auto r = run({"train", "--corpus", (dir / "corpus.jsonl").string(), "--train",
                      (dir / "train.jsonl").string(), "--checkpoint", (dir / "m.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: malformed_input:", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("corpus.jsonl:2"), std::string::npos) << r.err;
}

TEST(CliTest, UnknownConfigKey) {
  const auto dir = temp_dir("config");
  mvr::write_file_atomic(dir / "run.cfg", "epochs = 2\nwarp_speed = 9\n");
  const auto r = run({"train", "--config", (dir / "run.cfg").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: config:", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("warp_speed"), std::string::npos);
  const auto s = run({"train", "--set", "warp_speed=9"});
  EXPECT_EQ(s.code, 2);
}

TEST_F(PipelineTest, EndToEnd) {
  const auto dir = temp_dir("pipeline");
  const auto t = build(dir);
  const auto summary = json::parse(t.out);
  EXPECT_EQ(summary.at("epochs"), 2);
  EXPECT_TRUE(fs::exists(dir / "model.ckpt.vocab.tsv"));
  std::size_t metric_lines = 0;
  mvr::for_each_line(dir / "model.ckpt.metrics.jsonl", [&](std::string_view line, std::size_t) {
    EXPECT_TRUE(json::parse(line).contains("mean_loss"));
    ++metric_lines;
  });
  EXPECT_EQ(metric_lines, 2u);

  const auto manifest = json::parse(mvr::read_file(dir / "index/manifest.json"));
  EXPECT_EQ(manifest.at("k"), 2);
  EXPECT_EQ(manifest.at("count"), 100);
  EXPECT_EQ(manifest.at("checkpoint_hash"), summary.at("checkpoint_hash"));

  const auto e = eval(dir, {"--out", (dir / "eval.json").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = json::parse(e.out);
  for (const char* k : {"1", "5", "20", "100"}) {
    const double r = report.at("recall_at").at(k).get<double>();
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
  EXPECT_EQ(report.at("recall_at").at("100"), 1.0);
  EXPECT_EQ(report.at("n_queries"), 200);
  EXPECT_EQ(mvr::read_file(dir / "eval.json"), e.out);

  const auto s = run({"search", "--index", (dir / "index").string(), "--checkpoint", (dir / "model.ckpt").string(),
                      "--query", "t0w1 t0w2", "--query", "t3w9", "--top-k", "3"});
  ASSERT_EQ(s.code, 0) << s.err;
  std::istringstream lines(s.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j.at("results").size(), 3u);
    ++n;
  }
  EXPECT_EQ(n, 2u);

  const auto a = run({"analyze", "--checkpoint", (dir / "model.ckpt").string(), "--corpus",
                      (dir / "data/corpus.jsonl").string(), "--eval", (dir / "data/eval.jsonl").string(),
                      "--histogram", (dir / "hist.csv").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto diag = json::parse(a.out);
  EXPECT_GE(diag.at("ppl").get<double>(), 1.0);
  EXPECT_LE(diag.at("ppl").get<double>(), 2.0 + 1e-12);
  EXPECT_EQ(mvr::read_file(dir / "hist.csv").rfind("viewer,hits\n", 0), 0u);

  const auto ann = eval(dir, {"--mode", "ann"});
  ASSERT_EQ(ann.code, 0) << ann.err;
  EXPECT_EQ(json::parse(ann.out).at("mode"), "ann");
}

TEST_F(PipelineTest, RerunIsByteIdentical) {
  const auto a = temp_dir("rerun_a");
  const auto b = temp_dir("rerun_b");
  build(a);
  build(b);
  EXPECT_EQ(mvr::read_file(a / "model.ckpt"), mvr::read_file(b / "model.ckpt"));
  EXPECT_EQ(mvr::read_file(a / "model.ckpt.metrics.jsonl"), mvr::read_file(b / "model.ckpt.metrics.jsonl"));
  EXPECT_EQ(mvr::read_file(a / "index/vectors.bin"), mvr::read_file(b / "index/vectors.bin"));
  EXPECT_EQ(eval(a).out, eval(b).out);
}

TEST_F(PipelineTest, ResumeMatchesSingleRun) {
  const auto dir = temp_dir("resume");
  build(dir);
  const auto data = dir / "data";
  auto train = [&](const std::string& ckpt, const std::string& epochs, bool resume) {
    std::vector<std::string> args{"train", "--corpus", (data / "corpus.jsonl").string(), "--train",
                                  (data / "train.jsonl").string(), "--checkpoint", (dir / ckpt).string()};
    for (const auto& f : small_model_flags()) args.push_back(f);
    args.push_back("--epochs");
    args.push_back(epochs);
    if (resume) args.push_back("--resume");
    return run(args);
  };
  ASSERT_EQ(train("one.ckpt", "3", false).code, 0);
  ASSERT_EQ(train("two.ckpt", "1", false).code, 0);
  const auto r = train("two.ckpt", "3", true);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(mvr::read_file(dir / "one.ckpt"), mvr::read_file(dir / "two.ckpt"));
  EXPECT_EQ(mvr::read_file(dir / "one.ckpt.metrics.jsonl"), mvr::read_file(dir / "two.ckpt.metrics.jsonl"));
}

TEST_F(PipelineTest, SearchErrors) {
  const auto dir = temp_dir("search_errors");
  build(dir);
  const auto zero = run({"search", "--index", (dir / "index").string(), "--checkpoint",
                         (dir / "model.ckpt").string(), "--query", "t0w1", "--top-k", "0"});
  EXPECT_EQ(zero.code, 2);
  EXPECT_EQ(zero.err.rfind("error: usage:", 0), 0u) << zero.err;

  const auto none = run({"search", "--index", (dir / "index").string(), "--checkpoint", (dir / "model.ckpt").string()});
  EXPECT_EQ(none.code, 2);

  // A checkpoint that differs from the one the index was built with.
  std::vector<std::string> train{"train", "--corpus", (dir / "data/corpus.jsonl").string(), "--train",
                                 (dir / "data/train.jsonl").string(), "--checkpoint", (dir / "other.ckpt").string()};
  for (const auto& f : small_model_flags()) train.push_back(f);
  for (const char* f : {"--seed", "99", "--epochs", "1"}) train.push_back(f);
  ASSERT_EQ(run(train).code, 0);
  const auto mismatch = run({"search", "--index", (dir / "index").string(), "--checkpoint",
                             (dir / "other.ckpt").string(), "--query", "t0w1"});
  EXPECT_EQ(mismatch.code, 1);
  EXPECT_EQ(mismatch.err.rfind("error: index_mismatch:", 0), 0u) << mismatch.err;
}

TEST_F(PipelineTest, QueriesFileFormats) {
  const auto dir = temp_dir("queries_file");
  build(dir);
  mvr::write_file_atomic(dir / "plain.txt", "t0w1 t0w2\nt1w3\n");
  mvr::write_file_atomic(dir / "q.jsonl", "{\"query\": \"t0w1 t0w2\"}\n{\"query\": \"t1w3\"}\n");
  auto search = [&](const fs::path& file) {
    return run({"search", "--index", (dir / "index").string(), "--checkpoint", (dir / "model.ckpt").string(),
                "--queries", file.string()});
  };
  const auto plain = search(dir / "plain.txt");
  const auto jsonl = search(dir / "q.jsonl");
  ASSERT_EQ(plain.code, 0) << plain.err;
  EXPECT_EQ(plain.out, jsonl.out);
  mvr::write_file_atomic(dir / "bad.jsonl", "{\"query\": \"ok\"}\n{\"q\": 1}\n");
  const auto bad = search(dir / "bad.jsonl");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("bad.jsonl:2"), std::string::npos) << bad.err;
}

}  // namespace
