#include "mvr/mv_index.hpp"

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "mvr/io_util.hpp"

namespace {

namespace fs = std::filesystem;
using mvr::Matrix;
using mvr::MultiVectorIndex;
using mvr::SearchMode;

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mvr_index_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Matrix random_views(std::mt19937_64& rng, std::size_t k, std::size_t d) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(k, d);
  for (auto& x : m.data()) x = dist(rng);
  return m;
}

std::vector<double> random_query(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> q(d);
  for (auto& x : q) x = dist(rng);
  return q;
}

MultiVectorIndex random_index(std::size_t n_docs, std::size_t k, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MultiVectorIndex index(d, k, "hash");
  for (std::size_t i = 0; i < n_docs; ++i) index.add("doc" + std::to_string(i), random_views(rng, k, d));
  return index;
}

// Every entry scored in a plain double loop over the stored float32 values,
// then grouped by doc_id.
mvr::RetrievalResult brute_force(const MultiVectorIndex& index, const std::vector<double>& q, std::size_t top_k) {
  std::vector<mvr::RetrievedDoc> best;
  for (std::size_t e = 0; e < index.size(); ++e) {
    double s = 0.0;
    const auto v = index.vector(e);
    for (std::size_t i = 0; i < index.dim(); ++i) s += static_cast<double>(v[i]) * q[i];
    const auto& entry = index.entry(e);
    auto it = std::find_if(best.begin(), best.end(), [&](const auto& r) { return r.doc_id == entry.doc_id; });
    if (it == best.end()) {
      best.push_back({entry.doc_id, s, entry.viewer_id});
    } else if (s > it->score) {
      it->score = s;
      it->best_viewer = entry.viewer_id;
    }
  }
  std::sort(best.begin(), best.end(), [](const auto& a, const auto& b) {
    return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
  });
  best.resize(std::min(top_k, best.size()));
  return best;
}

TEST(IndexTest, EntryCountGrowsWithK) {
  EXPECT_EQ(random_index(100, 8, 4, 1).size(), 800u);
  const auto single = random_index(100, 1, 4, 1);
  EXPECT_EQ(single.size(), 100u);
  EXPECT_EQ(single.doc_count(), 100u);
}

TEST(IndexTest, EntriesRecordViewerIds) {
  const auto index = random_index(3, 4, 2, 1);
  for (std::size_t e = 0; e < index.size(); ++e) {
    EXPECT_EQ(index.entry(e).doc_id, "doc" + std::to_string(e / 4));
    EXPECT_EQ(index.entry(e).viewer_id, e % 4);
  }
}

TEST(IndexTest, AddRejectsMismatches) {
  MultiVectorIndex index(4, 2);
  EXPECT_THROW(index.add("a", Matrix(2, 3)), std::invalid_argument);
  EXPECT_THROW(index.add("a", Matrix(3, 4)), std::invalid_argument);
  index.add("a", Matrix(2, 4));
  EXPECT_THROW(index.add("a", Matrix(2, 4)), std::invalid_argument);
  EXPECT_THROW(index.add("b\tc", Matrix(2, 4)), std::invalid_argument);
  EXPECT_THROW(MultiVectorIndex(0, 2), std::invalid_argument);
}

TEST(IndexTest, BestViewerWins) {
  MultiVectorIndex index(2, 4);
  Matrix a(4, 2), b(4, 2, 0.5);
  a(3, 0) = 5.0;
  index.add("A", a);
  index.add("B", b);
  const std::vector<double> q{1.0, 0.0};
  const auto r = index.search(q, 2, SearchMode::flat());
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].doc_id, "A");
  EXPECT_EQ(r[0].best_viewer, 3u);
  EXPECT_DOUBLE_EQ(r[0].score, 5.0);
  EXPECT_EQ(r[1].doc_id, "B");
  EXPECT_EQ(r[1].best_viewer, 0u);
}

TEST(IndexTest, DuplicateDocumentsBothReturned) {
  std::mt19937_64 rng(4);
  MultiVectorIndex index(8, 3);
  const auto views = random_views(rng, 3, 8);
  index.add("twin_b", views);
  index.add("other", random_views(rng, 3, 8));
  index.add("twin_a", views);
  const auto q = random_query(rng, 8);
  const auto r = index.search(q, 3, SearchMode::flat());
  std::vector<mvr::RetrievedDoc> twins;
  for (const auto& d : r) {
    if (d.doc_id.rfind("twin", 0) == 0) twins.push_back(d);
  }
  ASSERT_EQ(twins.size(), 2u);
  EXPECT_EQ(twins[0].score, twins[1].score);
  EXPECT_EQ(twins[0].doc_id, "twin_a");
}

TEST(IndexTest, FlatMatchesBruteForce) {
  const auto index = random_index(300, 4, 16, 2);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 20; ++i) {
    const auto q = random_query(rng, 16);
    for (std::size_t top_k : {1u, 10u, 300u, 1000u}) {
      const auto got = index.search(q, top_k, SearchMode::flat());
      const auto want = brute_force(index, q, top_k);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t j = 0; j < got.size(); ++j) {
        EXPECT_EQ(got[j].doc_id, want[j].doc_id);
        EXPECT_EQ(got[j].best_viewer, want[j].best_viewer);
        EXPECT_NEAR(got[j].score, want[j].score, 1e-12);
      }
    }
  }
}

TEST(IndexTest, ResultsAreDedupedAndSorted) {
  const auto index = random_index(50, 8, 6, 3);
  std::mt19937_64 rng(1);
  const auto r = index.search(random_query(rng, 6), 50, SearchMode::flat());
  EXPECT_EQ(r.size(), 50u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < r.size(); ++i) {
    ids.insert(r[i].doc_id);
    if (i) EXPECT_GE(r[i - 1].score, r[i].score);
  }
  EXPECT_EQ(ids.size(), 50u);
}

TEST(IndexTest, EmptyIndexGivesEmptyResult) {
  MultiVectorIndex index(4, 2);
  const std::vector<double> q(4, 1.0);
  EXPECT_TRUE(index.search(q, 5, SearchMode::flat()).empty());
}

TEST(IndexTest, InvalidSearchesThrow) {
  auto index = random_index(5, 2, 4, 1);
  const std::vector<double> q(4, 1.0);
  EXPECT_THROW(index.search(q, 0, SearchMode::flat()), std::invalid_argument);
  EXPECT_THROW(index.search(std::vector<double>(3, 1.0), 1, SearchMode::flat()), std::invalid_argument);
  EXPECT_THROW(index.search(q, 1, SearchMode::ann()), std::logic_error);
}

TEST(IndexTest, AnnAgreesWithFlat) {
  auto index = random_index(500, 4, 16, 5);
  index.build_graph();
  std::mt19937_64 rng(6);
  std::vector<std::vector<double>> queries;
  for (int i = 0; i < 50; ++i) queries.push_back(random_query(rng, 16));
  EXPECT_GE(mvr::flat_ann_agreement(index, queries, 10, SearchMode::ann(200)), 0.99);
  EXPECT_EQ(mvr::flat_ann_agreement(index, queries, 500, SearchMode::ann()), 1.0);
}

TEST(IndexTest, AnnScoresAreExact) {
  auto index = random_index(200, 3, 8, 7);
  index.build_graph();
  std::mt19937_64 rng(8);
  const auto q = random_query(rng, 8);
  const auto flat = index.search(q, 200, SearchMode::flat());
  for (const auto& d : index.search(q, 10, SearchMode::ann())) {
    auto it = std::find_if(flat.begin(), flat.end(), [&](const auto& f) { return f.doc_id == d.doc_id; });
    ASSERT_NE(it, flat.end());
    EXPECT_EQ(*it, d);
  }
}

TEST(IndexTest, GraphSearchIsDeterministic) {
  auto a = random_index(300, 2, 8, 9);
  auto b = random_index(300, 2, 8, 9);
  a.build_graph();
  b.build_graph();
  std::mt19937_64 rng(10);
  for (int i = 0; i < 10; ++i) {
    const auto q = random_query(rng, 8);
    EXPECT_EQ(a.search(q, 10, SearchMode::ann()), b.search(q, 10, SearchMode::ann()));
  }
}

TEST(IndexTest, SaveLoadIsBitExact) {
  const auto dir = temp_dir("persist");
  const auto index = random_index(40, 3, 5, 11);
  index.save(dir);
  for (const char* f : {"manifest.json", "vectors.bin", "ids.tsv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto loaded = MultiVectorIndex::load(dir);
  EXPECT_EQ(loaded.dim(), 5u);
  EXPECT_EQ(loaded.views_per_doc(), 3u);
  EXPECT_EQ(loaded.checkpoint_hash(), "hash");
  ASSERT_EQ(loaded.size(), index.size());
  EXPECT_TRUE(std::equal(index.raw_vectors().begin(), index.raw_vectors().end(), loaded.raw_vectors().begin()));
  const auto dir2 = temp_dir("persist2");
  loaded.save(dir2);
  for (const char* f : {"manifest.json", "vectors.bin", "ids.tsv"}) {
    EXPECT_EQ(mvr::read_file(dir / f), mvr::read_file(dir2 / f)) << f;
  }
  std::mt19937_64 rng(1);
  const auto q = random_query(rng, 5);
  EXPECT_EQ(index.search(q, 7, SearchMode::flat()), loaded.search(q, 7, SearchMode::flat()));
}

TEST(IndexTest, LoadRejectsTruncatedVectors) {
  const auto dir = temp_dir("truncated");
  random_index(10, 2, 4, 1).save(dir);
  auto bytes = mvr::read_file(dir / "vectors.bin");
  mvr::write_file_atomic(dir / "vectors.bin", bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(MultiVectorIndex::load(dir), std::runtime_error);
}

TEST(IndexTest, LoadRejectsFormatVersion) {
  const auto dir = temp_dir("version");
  random_index(10, 2, 4, 1).save(dir);
  auto manifest = nlohmann::json::parse(mvr::read_file(dir / "manifest.json"));
  manifest["format_version"] = 99;
  mvr::write_file_atomic(dir / "manifest.json", manifest.dump());
  EXPECT_THROW(MultiVectorIndex::load(dir), std::runtime_error);
}

class EncodedIndexTest : public ::testing::Test {
 protected:
  EncodedIndexTest()
      : corpus_({{"a", "", "red green blue"}, {"b", "", "cat dog"}, {"c", "t", "red cat sun moon"}}),
        vocab_(mvr::build_vocab(corpus_.passages(), 0, 3)) {
    cfg_.d_model = 8;
    cfg_.n_heads = 2;
    cfg_.d_ff = 8;
    cfg_.n_viewers = 3;
    cfg_.max_len = 16;
    cfg_.vocab_size = vocab_.size();
    params_ = mvr::init_params(cfg_);
  }
  mvr::Corpus corpus_;
  mvr::Vocab vocab_;
  mvr::EncoderConfig cfg_;
  mvr::EncoderParams params_;
};

TEST_F(EncodedIndexTest, RebuildIsIdentical) {
  const auto a = mvr::build_index(corpus_, vocab_, params_, "h");
  const auto b = mvr::build_index(corpus_, vocab_, params_, "h");
  EXPECT_EQ(a.size(), 9u);
  EXPECT_TRUE(std::equal(a.raw_vectors().begin(), a.raw_vectors().end(), b.raw_vectors().begin()));
}

TEST_F(EncodedIndexTest, StoresDocumentViews) {
  const auto index = mvr::build_index(corpus_, vocab_, params_, "h");
  const auto views = mvr::forward_doc(params_, mvr::encode_document(corpus_[2], vocab_, cfg_)).views;
  for (std::size_t v = 0; v < 3; ++v) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(index.vector(6 + v)[c], static_cast<float>(views(v, c)));
  }
}

TEST_F(EncodedIndexTest, DimensionMismatchThrows) {
  MultiVectorIndex wrong_dim(16, 3);
  EXPECT_THROW(mvr::add_documents(wrong_dim, corpus_, vocab_, params_), std::invalid_argument);
  MultiVectorIndex wrong_k(8, 2);
  EXPECT_THROW(mvr::add_documents(wrong_k, corpus_, vocab_, params_), std::invalid_argument);
}

TEST_F(EncodedIndexTest, QueriesEncodeToOneRow) {
  const std::vector<std::string> qs{"red", "cat dog"};
  const auto enc = mvr::encode_queries(qs, vocab_, params_);
  ASSERT_EQ(enc.size(), 2u);
  EXPECT_EQ(enc[0].size(), 8u);
}

}  // namespace
