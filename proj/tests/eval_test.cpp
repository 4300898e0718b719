#include <gtest/gtest.h>

#include <cmath>

#include "dpruner/errors.hpp"
#include "dpruner/eval.hpp"
#include "test_support.hpp"

namespace dpruner {
namespace {

using testing::corpus_of;
using testing::random_scores;
using testing::random_tokens;
using testing::tiny_config;

Mask random_mask(const std::vector<Shape>& shapes, double sparsity, Rng& rng) {
  return select_mask_per_matrix(random_scores(shapes, rng), sparsity);
}

std::vector<Shape> model_shapes() {
  const auto model = init_model(tiny_config());
  std::vector<Shape> out;
  for (const auto& m : prunable_matrices(model)) out.push_back(m.weight->shape());
  return out;
}

TEST(Perplexity, UntrainedModelIsNearVocabSize) {
  const auto model = init_model(ModelConfig{});
  Rng rng(1);
  std::vector<std::vector<TokenId>> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(random_tokens(64, rng));
  const auto r = perplexity(model, corpus_of(seqs));
  EXPECT_GT(r.perplexity, 256.0 * 0.75);
  EXPECT_LT(r.perplexity, 256.0 * 1.25);
  EXPECT_EQ(r.token_count, 4u * 63u);
  EXPECT_EQ(r.perplexity, std::exp(r.mean_loss));
}

TEST(Perplexity, TokenWeightedMean) {
  const auto model = init_model(tiny_config());
  Rng rng(2);
  const auto a = random_tokens(4, rng);
  const auto b = random_tokens(16, rng);
  const auto r = perplexity(model, corpus_of({a, b}));
  double total = 0.0;
  for (double l : position_losses(model, a)) total += l;
  for (double l : position_losses(model, b)) total += l;
  EXPECT_EQ(r.token_count, 18u);
  EXPECT_NEAR(r.mean_loss, total / 18.0, 1e-14);
}

TEST(Perplexity, MemorizedSequence) {
  const std::string text = "the quick brown fox. ";
  std::string repeated;
  for (int i = 0; i < 20; ++i) repeated += text;
  TokenStream s;
  s.tokens = tokenize(repeated);
  std::vector<TokenStream> streams = {s};
  PretrainOptions opts;
  opts.steps = 600;
  const auto trained = pretrain(init_model(tiny_config()), streams, opts).model;
  const std::vector<TokenId> probe(s.tokens.begin(), s.tokens.begin() + 16);
  const auto r = perplexity(trained, corpus_of({probe}));
  EXPECT_LE(r.perplexity, 2.0);
  EXPECT_GE(r.perplexity, 1.0);
}

TEST(Perplexity, DeterministicReport) {
  const auto model = init_model(tiny_config());
  Rng rng(3);
  const auto c = corpus_of({random_tokens(10, rng), random_tokens(12, rng)});
  EXPECT_EQ(eval_report_csv(perplexity(model, c)), eval_report_csv(perplexity(model, c)));
}

TEST(Perplexity, EmptyCorpusRejected) {
  EXPECT_THROW(perplexity(init_model(tiny_config()), corpus_of({})), ValidationError);
}

TEST(MaskSimilarity, IdenticalMasksAtHalfSparsity) {
  Rng rng(4);
  const auto m = random_mask(model_shapes(), 0.5, rng);
  const auto r = mask_similarity(m, m);
  for (const auto& s : r.matrices) EXPECT_EQ(s.fraction, 0.5);
  EXPECT_EQ(r.overall, 0.5);
}

TEST(MaskSimilarity, ComplementaryMasks) {
  Rng rng(5);
  const auto a = random_mask({{8, 8}}, 0.5, rng);
  auto b = a;
  for (auto& k : b.matrices[0].keep) k = 1 - k;
  EXPECT_EQ(mask_similarity(a, b).matrices[0].fraction, 0.0);
}

TEST(MaskSimilarity, IndependentRandomMasksNearQuarter) {
  Rng rng(6);
  const auto a = random_mask({{128, 128}}, 0.5, rng);
  const auto b = random_mask({{128, 128}}, 0.5, rng);
  const double s = mask_similarity(a, b).matrices[0].fraction;
  EXPECT_NEAR(s, 0.25, 0.05);
}

TEST(MaskSimilarity, BoundsSelfSimilarityAndSymmetry) {
  Rng rng(7);
  const auto shapes = model_shapes();
  for (int trial = 0; trial < 20; ++trial) {
    const double s = 0.05 * static_cast<double>(uniform_index(rng, 19));
    const auto a = random_mask(shapes, s, rng);
    const auto b = random_mask(shapes, s, rng);
    const auto ab = mask_similarity(a, b);
    const auto ba = mask_similarity(b, a);
    const auto aa = mask_similarity(a, a);
    for (std::size_t m = 0; m < ab.matrices.size(); ++m) {
      const auto n = a.matrices[m].keep.size();
      const double size = static_cast<double>(n);
      const double kept = static_cast<double>(n - a.matrices[m].zeros()) / size;
      const double other_kept = static_cast<double>(n - b.matrices[m].zeros()) / size;
      EXPECT_GE(ab.matrices[m].fraction, std::max(0.0, kept + other_kept - 1.0) - 1e-15);
      EXPECT_LE(ab.matrices[m].fraction, std::min(kept, other_kept) + 1e-15);
      EXPECT_GE(ab.matrices[m].fraction, std::max(0.0, 1.0 - 2.0 * s) - 1.0 / size - 1e-15);
      EXPECT_LE(ab.matrices[m].fraction, 1.0 - s + 1.0 / size);
      EXPECT_EQ(ab.matrices[m].fraction, ba.matrices[m].fraction);
      EXPECT_EQ(aa.matrices[m].fraction, kept);
    }
  }
}

TEST(MaskSimilarity, Aggregates) {
  Rng rng(8);
  const auto shapes = model_shapes();
  const auto a = random_mask(shapes, 0.5, rng);
  const auto b = random_mask(shapes, 0.5, rng);
  const auto r = mask_similarity(a, b);
  ASSERT_EQ(r.by_projection.size(), 7u);
  ASSERT_EQ(r.by_layer.size(), 2u);
  const double q_mean = (r.matrices[0].fraction + r.matrices[7].fraction) / 2.0;
  EXPECT_EQ(r.by_projection[0].first, Projection::q);
  EXPECT_DOUBLE_EQ(r.by_projection[0].second, q_mean);
  double layer1 = 0.0;
  for (std::size_t m = 7; m < 14; ++m) layer1 += r.matrices[m].fraction;
  EXPECT_DOUBLE_EQ(r.by_layer[1].second, layer1 / 7.0);
}

TEST(MaskSimilarity, RejectsMismatchedManifests) {
  Rng rng(9);
  const auto a = random_mask({{4, 4}, {4, 8}}, 0.5, rng);
  const auto b = random_mask({{4, 4}}, 0.5, rng);
  const auto c = random_mask({{4, 4}, {8, 4}}, 0.5, rng);
  EXPECT_THROW(mask_similarity(a, b), ValidationError);
  EXPECT_THROW(mask_similarity(a, c), ValidationError);
}

TEST(Reports, CsvLayouts) {
  Rng rng(10);
  const auto shapes = model_shapes();
  const auto a = random_mask(shapes, 0.5, rng);
  const auto r = mask_similarity(a, a);
  const auto csv = similarity_csv(r);
  EXPECT_EQ(csv.rfind("matrix,layer,projection,similarity\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 15);
  const auto grid = similarity_grid_csv(r);
  EXPECT_EQ(grid.rfind("projection,layer0,layer1\nq,0.5,0.5\n", 0), 0u);
  EXPECT_EQ(std::count(grid.begin(), grid.end(), '\n'), 8);
  EXPECT_NE(similarity_text(r).find("overall"), std::string::npos);
}

class SweepTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::string text;
    for (int i = 0; i < 30; ++i) text += "one two three four five six. ";
    TokenStream s;
    s.tokens = tokenize(text);
    std::vector<TokenStream> streams = {s};
    PretrainOptions opts;
    opts.steps = 300;
    model_ = new TransformerModel(pretrain(init_model(tiny_config()), streams, opts).model);
    std::vector<std::vector<TokenId>> seqs;
    for (std::size_t off = 0; off + 16 <= 160; off += 16) seqs.emplace_back(s.tokens.begin() + off, s.tokens.begin() + off + 16);
    corpus_ = new Corpus(corpus_of(seqs));
  }
  static void TearDownTestSuite() {
    delete model_;
    delete corpus_;
  }
  static TransformerModel* model_;
  static Corpus* corpus_;
};

TransformerModel* SweepTest::model_ = nullptr;
Corpus* SweepTest::corpus_ = nullptr;

TEST_F(SweepTest, ZeroSparsityEqualsDense) {
  const auto r = sparsity_sweep(*model_, magnitude_scores(*model_), *corpus_, {0.0});
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].perplexity, perplexity(*model_, *corpus_).perplexity);
}

TEST_F(SweepTest, HighSparsityHurts) {
  const auto r = sparsity_sweep(*model_, magnitude_scores(*model_), *corpus_, {0.1, 0.5, 0.7});
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_GT(r.rows[2].perplexity, r.rows[0].perplexity);
}

TEST_F(SweepTest, Deterministic) {
  const auto scores = magnitude_scores(*model_);
  const std::vector<double> list = {0.1, 0.3, 0.5};
  EXPECT_EQ(sweep_csv(sparsity_sweep(*model_, scores, *corpus_, list)),
            sweep_csv(sparsity_sweep(*model_, scores, *corpus_, list)));
}

TEST_F(SweepTest, CsvHasHeaderAndRows) {
  const auto r = sparsity_sweep(*model_, magnitude_scores(*model_), *corpus_, {0.1, 0.2});
  const auto csv = sweep_csv(r);
  EXPECT_EQ(csv.rfind("sparsity,perplexity\n0.1,", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(SweepCsv, ShortestNumberFormat) {
  SweepResult r;
  r.rows = {{0.1, 2.0}, {0.2, 3.0}};
  EXPECT_EQ(sweep_csv(r), "sparsity,perplexity\n0.1,2\n0.2,3\n");
}

}  // namespace
}  // namespace dpruner
