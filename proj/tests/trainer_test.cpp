#include "mvr/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "mvr/io_util.hpp"
#include "mvr/synthetic.hpp"

namespace {

namespace fs = std::filesystem;
using mvr::EncoderConfig;
using mvr::TrainConfig;

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mvr_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

class TrainerTest : public ::testing::Test {
 protected:
  TrainerTest() {
    mvr::SyntheticSpec spec;
    spec.n_docs = 16;
    spec.vocab_size = 160;
    spec.seed = 5;
    data_ = mvr::generate_synthetic(spec);
    corpus_ = mvr::Corpus(data_.corpus);
    vocab_ = mvr::build_vocab(corpus_.passages(), 0, 4);
    enc_.d_model = 16;
    enc_.n_heads = 2;
    enc_.d_ff = 16;
    enc_.n_viewers = 2;
    enc_.max_len = 48;
    enc_.vocab_size = vocab_.size();
    train_.batch_size = 8;
    train_.epochs = 2;
    train_.learning_rate = 5e-3;
  }

  mvr::Trainer trainer(const EncoderConfig& enc, const TrainConfig& cfg) const {
    return mvr::Trainer(corpus_, data_.train, vocab_, enc, cfg);
  }
  mvr::Trainer trainer() const { return trainer(enc_, train_); }

  mvr::SyntheticData data_;
  mvr::Corpus corpus_;
  mvr::Vocab vocab_;
  EncoderConfig enc_;
  TrainConfig train_;
};

TEST(TrainConfigTest, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.in_batch_negatives = false;
  cfg.hard_negatives_per_query = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.learning_rate = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(TrainConfigTest, JsonRoundTrip) {
  TrainConfig cfg;
  cfg.batch_size = 7;
  cfg.loss.lambda = 0.25;
  cfg.loss.tau_mode = mvr::TauMode::fixed;
  cfg.optimizer = mvr::OptimizerKind::sgd;
  EXPECT_EQ(mvr::train_config_from_json(mvr::to_json(cfg)), cfg);
  EncoderConfig enc;
  enc.vocab_size = 99;
  enc.tied = true;
  enc.view_mode = mvr::ViewMode::first_k;
  enc.viewer_init_scale = 0.125;
  enc.attention_init_scale = 2.5;
  EXPECT_EQ(mvr::encoder_config_from_json(mvr::to_json(enc)), enc);
}

TEST(BuildBatchTest, InBatchAndHardNegatives) {
  const mvr::Corpus corpus({{"d0", "", "a"}, {"d1", "", "b"}, {"d2", "", "c"}, {"d3", "", "d"}, {"h", "", "e"}});
  std::vector<mvr::TrainExample> ex;
  for (int i = 0; i < 4; ++i) ex.push_back({"q", {"d" + std::to_string(i)}, {"h"}, {}});
  TrainConfig cfg;
  cfg.batch_size = 4;
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto b = mvr::build_batch(ex, idx, corpus, cfg, 1);
  EXPECT_EQ(b.docs.size(), 5u);
  for (std::size_t q = 0; q < 4; ++q) {
    EXPECT_EQ(b.negatives[q].size(), 4u);
    const std::set<std::size_t> negs(b.negatives[q].begin(), b.negatives[q].end());
    EXPECT_EQ(negs.size(), 4u);
    EXPECT_FALSE(negs.count(b.positive[q]));
  }
}

TEST(BuildBatchTest, SharedPositiveIsNotANegative) {
  const mvr::Corpus corpus({{"d0", "", "a"}, {"d1", "", "b"}});
  const std::vector<mvr::TrainExample> ex{{"q1", {"d0"}, {}, {}}, {"q2", {"d0"}, {}, {}}, {"q3", {"d1"}, {}, {}}};
  TrainConfig cfg;
  cfg.hard_negatives_per_query = 0;
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto b = mvr::build_batch(ex, idx, corpus, cfg, 1);
  EXPECT_EQ(b.docs.size(), 2u);
  EXPECT_EQ(b.negatives[0], std::vector<std::size_t>{b.positive[2]});
  EXPECT_EQ(b.negatives[2], std::vector<std::size_t>{b.positive[0]});
}

TEST(BuildBatchTest, MissingHardNegativesThrow) {
  const mvr::Corpus corpus({{"d0", "", "a"}, {"d1", "", "b"}});
  const std::vector<mvr::TrainExample> ex{{"q1", {"d0"}, {}, {}}, {"q2", {"d1"}, {}, {}}};
  TrainConfig cfg;
  const std::vector<std::size_t> idx{0, 1};
  EXPECT_THROW(mvr::build_batch(ex, idx, corpus, cfg, 1), std::invalid_argument);
}

TEST(EpochOrderTest, PermutationAndDeterminism) {
  const auto a = mvr::epoch_order(50, 3, 0);
  EXPECT_EQ(a, mvr::epoch_order(50, 3, 0));
  EXPECT_NE(a, mvr::epoch_order(50, 3, 1));
  EXPECT_NE(a, mvr::epoch_order(50, 4, 0));
  std::set<std::size_t> s(a.begin(), a.end());
  EXPECT_EQ(s.size(), 50u);
  EXPECT_EQ(*s.rbegin(), 49u);
}

TEST_F(TrainerTest, RejectsEmptyExamplesAndVocabMismatch) {
  EXPECT_THROW(mvr::Trainer(corpus_, {}, vocab_, enc_, train_), std::invalid_argument);
  auto enc = enc_;
  enc.vocab_size += 1;
  EXPECT_THROW(trainer(enc, train_), std::invalid_argument);
}

TEST_F(TrainerTest, NoNegativesAnywhereIsAnError) {
  auto cfg = train_;
  cfg.in_batch_negatives = false;
  cfg.hard_negatives_per_query = 0;
  EXPECT_THROW(trainer(enc_, cfg), std::invalid_argument);
}

TEST_F(TrainerTest, DeterministicTraining) {
  const auto t = trainer();
  auto a = t.initial_state();
  auto b = t.initial_state();
  t.train_epoch(a);
  t.train_epoch(b);
  EXPECT_EQ(a, b);
  EXPECT_EQ(mvr::checkpoint_hash(a.params), mvr::checkpoint_hash(b.params));
}

TEST_F(TrainerTest, LossDecreases) {
  const auto t = trainer();
  auto s = t.initial_state();
  const double before = t.epoch_loss(s.params, s.seed, 0, 1.0);
  for (int e = 0; e < 4; ++e) t.train_epoch(s);
  const double after = t.epoch_loss(s.params, s.seed, 0, 1.0);
  EXPECT_LT(after, before);
}

// Final-epoch training loss on 4-segment synthetic data, k=8 against k=1
// with everything else equal.
TEST(TrainerPropertyTest, MoreViewersLowerFinalLoss) {
  mvr::SyntheticSpec spec;
  spec.n_docs = 100;
  spec.n_topics = 16;
  spec.vocab_size = 1000;
  spec.queries_per_segment = 4;
  const auto data = mvr::generate_synthetic(spec);
  const mvr::Corpus corpus(data.corpus);
  auto final_loss = [&](std::size_t k) {
    const auto vocab = mvr::build_vocab(corpus.passages(), 0, k);
    EncoderConfig enc;
    enc.n_viewers = k;
    enc.vocab_size = vocab.size();
    enc.tied = true;
    enc.viewer_init_scale = 0.1;
    enc.attention_init_scale = 6.0;
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.learning_rate = 2e-3;
    const mvr::Trainer t(corpus, data.train, vocab, enc, cfg);
    auto s = t.initial_state();
    mvr::EpochMetrics last;
    for (std::size_t e = 0; e < cfg.epochs; ++e) last = t.train_epoch(s);
    return last.mean_loss;
  };
  const double multi = final_loss(8);
  const double single = final_loss(1);
  EXPECT_LT(multi, single);
}

TEST_F(TrainerTest, ZeroLearningRateLeavesParameters) {
  auto cfg = train_;
  cfg.learning_rate = 0.0;
  const auto t = trainer(enc_, cfg);
  auto s = t.initial_state();
  const auto init = s.params;
  t.train_epoch(s);
  EXPECT_EQ(s.params, init);
  EXPECT_EQ(s.epoch, 1u);
}

TEST_F(TrainerTest, TemperatureFollowsSchedule) {
  auto cfg = train_;
  cfg.loss.alpha = 0.5;
  const auto t = trainer(enc_, cfg);
  auto s = t.initial_state();
  EXPECT_DOUBLE_EQ(s.tau, 1.0);
  const auto m0 = t.train_epoch(s);
  EXPECT_DOUBLE_EQ(m0.tau, 1.0);
  EXPECT_DOUBLE_EQ(s.tau, std::exp(-0.5));
  t.train_epoch(s);
  t.train_epoch(s);
  EXPECT_DOUBLE_EQ(s.tau, 0.3);
}

TEST_F(TrainerTest, StepsPerEpoch) {
  const auto t = trainer();
  EXPECT_EQ(t.steps_per_epoch(), data_.train.size() / 8);
  auto s = t.initial_state();
  const auto m = t.train_epoch(s);
  EXPECT_EQ(m.steps, t.steps_per_epoch());
  EXPECT_EQ(s.step, t.steps_per_epoch());
  EXPECT_EQ(s.step_in_epoch, 0u);
}

TEST_F(TrainerTest, ClipBoundsGradientNorm) {
  const auto t = trainer();
  const auto s = t.initial_state();
  auto grads = mvr::zeros_like(s.params);
  t.batch_loss(s.params, t.batch_at(s.seed, 0, 0), 1.0, &grads);
  auto norm = [](const mvr::EncoderParams& g) {
    double sq = 0.0;
    mvr::for_each_tensor(g, [&](const std::string&, const mvr::Matrix& m) {
      for (double x : m.data()) sq += x * x;
    });
    return std::sqrt(sq);
  };
  const double raw = norm(grads);
  ASSERT_GT(raw, 1e-6);
  auto copy = grads;
  EXPECT_NEAR(mvr::clip_global_norm(copy, raw * 10), raw, 1e-12);
  EXPECT_EQ(copy, grads);
  EXPECT_NEAR(mvr::clip_global_norm(grads, raw / 2), raw, 1e-12);
  EXPECT_NEAR(norm(grads), raw / 2, 1e-12);
}

// Per-step loss against a hand-written single-vector contrastive loss with
// in-batch and hard negatives, computed from the raw forward passes.
TEST_F(TrainerTest, SingleViewWithoutLocalLossIsPlainContrastive) {
  auto enc = enc_;
  enc.n_viewers = 1;
  auto cfg = train_;
  cfg.loss.lambda = 0.0;
  cfg.loss.tau_mode = mvr::TauMode::fixed;
  const auto t = trainer(enc, cfg);
  auto s = t.initial_state();
  for (int step = 0; step < 6; ++step) {
    const auto batch = t.batch_at(s.seed, s.epoch, s.step_in_epoch);
    std::vector<mvr::Matrix> dv;
    for (auto d : batch.docs) dv.push_back(mvr::forward_doc(s.params, mvr::encode_document(corpus_[d], vocab_, enc)).views);
    double expected = 0.0;
    for (std::size_t q = 0; q < batch.examples.size(); ++q) {
      const auto qv = mvr::forward_query(s.params, mvr::encode_query(data_.train[batch.examples[q]].query, vocab_, enc)).views;
      auto score = [&](std::size_t slot) {
        double acc = 0.0;
        for (std::size_t c = 0; c < enc.d_model; ++c) acc += qv(0, c) * dv[slot](0, c);
        return acc;
      };
      const double pos = score(batch.positive[q]);
      double denom = std::exp(pos);
      for (auto n : batch.negatives[q]) denom += std::exp(score(n));
      expected += -(pos - std::log(denom));
    }
    expected /= static_cast<double>(batch.examples.size());
    const auto got = t.train_step(s);
    EXPECT_NEAR(got.loss, expected, 1e-10) << step;
    EXPECT_EQ(got.local, 0.0);
  }
}

TEST_F(TrainerTest, CheckpointRoundTripIsBitExact) {
  const auto dir = temp_dir("ckpt");
  const auto t = trainer();
  auto s = t.initial_state();
  t.train_epoch(s);
  mvr::save_checkpoint(s, dir / "a.ckpt");
  const auto loaded = mvr::load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(loaded, s);
  mvr::save_checkpoint(loaded, dir / "b.ckpt");
  EXPECT_EQ(mvr::read_file(dir / "a.ckpt"), mvr::read_file(dir / "b.ckpt"));
  EXPECT_EQ(mvr::read_file(dir / "a.ckpt").substr(0, 8), "MVRCKPT1");
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  const auto dir = temp_dir("resume");
  const auto t = trainer();
  auto straight = t.initial_state();
  t.train_epoch(straight);
  t.train_epoch(straight);

  auto first = t.initial_state();
  t.train_epoch(first);
  // Stop mid-epoch too.
  t.train_step(first);
  mvr::save_checkpoint(first, dir / "mid.ckpt");
  auto resumed = mvr::load_checkpoint(dir / "mid.ckpt");
  t.train_epoch(resumed);
  EXPECT_EQ(resumed, straight);
}

TEST_F(TrainerTest, CorruptedCheckpointRejected) {
  const auto dir = temp_dir("corrupt");
  const auto t = trainer();
  mvr::save_checkpoint(t.initial_state(), dir / "c.ckpt");
  auto bytes = mvr::read_file(dir / "c.ckpt");
  bytes[bytes.size() / 2] ^= 0x01;
  mvr::write_file_atomic(dir / "bad.ckpt", bytes);
  EXPECT_THROW(mvr::load_checkpoint(dir / "bad.ckpt"), std::runtime_error);
  mvr::write_file_atomic(dir / "short.ckpt", bytes.substr(0, 20));
  EXPECT_THROW(mvr::load_checkpoint(dir / "short.ckpt"), std::runtime_error);
  mvr::write_file_atomic(dir / "junk.ckpt", "hello");
  EXPECT_THROW(mvr::load_checkpoint(dir / "junk.ckpt"), std::runtime_error);
}

TEST_F(TrainerTest, UnknownVersionRejected) {
  const auto dir = temp_dir("version");
  const auto t = trainer();
  mvr::save_checkpoint(t.initial_state(), dir / "c.ckpt");
  auto bytes = mvr::read_file(dir / "c.ckpt");
  bytes[8] = 2;
  mvr::write_file_atomic(dir / "v2.ckpt", bytes);
  try {
    mvr::load_checkpoint(dir / "v2.ckpt");
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST_F(TrainerTest, HashCoversParametersOnly) {
  const auto t = trainer();
  auto a = t.initial_state();
  auto b = a;
  b.epoch = 7;
  EXPECT_EQ(mvr::checkpoint_hash(a.params), mvr::checkpoint_hash(b.params));
  b.params.doc_tower().token_embedding(4, 0) += 1e-12;
  EXPECT_NE(mvr::checkpoint_hash(a.params), mvr::checkpoint_hash(b.params));
}

TEST_F(TrainerTest, SgdStepIsPlainGradientDescent) {
  auto cfg = train_;
  cfg.optimizer = mvr::OptimizerKind::sgd;
  cfg.grad_clip = 0.0;
  cfg.learning_rate = 0.1;
  const auto t = trainer(enc_, cfg);
  auto s = t.initial_state();
  auto grads = mvr::zeros_like(s.params);
  t.batch_loss(s.params, t.batch_at(s.seed, 0, 0), s.tau, &grads);
  auto expected = s.params;
  std::vector<mvr::Matrix*> e;
  mvr::for_each_tensor(expected, [&](const std::string&, mvr::Matrix& m) { e.push_back(&m); });
  std::size_t i = 0;
  mvr::for_each_tensor(grads, [&](const std::string&, const mvr::Matrix& g) {
    for (std::size_t j = 0; j < g.size(); ++j) e[i]->data()[j] -= 0.1 * g.data()[j];
    ++i;
  });
  t.train_step(s);
  EXPECT_EQ(s.params, expected);
}

}  // namespace
