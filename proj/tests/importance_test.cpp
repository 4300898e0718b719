#include <gtest/gtest.h>

#include <cmath>

#include "dpruner/errors.hpp"
#include "dpruner/importance.hpp"
#include "test_support.hpp"

namespace dpruner {
namespace {

using testing::corpus_of;
using testing::random_tokens;
using testing::relative_error;
using testing::TempDir;
using testing::tiny_config;

Corpus random_corpus(std::size_t n, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<TokenId>> seqs;
  for (std::size_t i = 0; i < n; ++i) seqs.push_back(random_tokens(len, rng));
  return corpus_of(std::move(seqs));
}

MatrixSet filled(const TransformerModel& model, double v) {
  auto set = zeros_like_prunable(model);
  for (auto& e : set)
    for (auto& x : e.values.data()) x = v;
  return set;
}

Tensor prunable_grad(const Gradients& g, const MatrixKey& k) { return g.at(k.name()); }

TEST(Fisher, SingleSampleIsSquaredGradient) {
  const auto model = init_model(tiny_config());
  const auto corpus = random_corpus(1, 12, 1);
  const auto fisher = estimate_fisher_diagonal(model, corpus);
  const auto grads = loss_and_gradients(model, corpus.sequences[0]).gradients;
  EXPECT_EQ(fisher.samples, 1u);
  for (const auto& e : fisher.diagonal) {
    const auto g = prunable_grad(grads, e.key);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(e.values[i], g[i] * g[i]);
  }
}

TEST(Fisher, TwoSamplesAverageSquares) {
  const auto model = init_model(tiny_config());
  const auto corpus = random_corpus(2, 12, 2);
  const auto fisher = estimate_fisher_diagonal(model, corpus);
  const auto g1 = loss_and_gradients(model, corpus.sequences[0]).gradients;
  const auto g2 = loss_and_gradients(model, corpus.sequences[1]).gradients;
  for (const auto& e : fisher.diagonal) {
    const auto a = prunable_grad(g1, e.key);
    const auto b = prunable_grad(g2, e.key);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(e.values[i], (a[i] * a[i] + b[i] * b[i]) / 2.0);
  }
}

TEST(Fisher, InvariantUnderDuplication) {
  const auto model = init_model(tiny_config());
  auto corpus = random_corpus(3, 10, 3);
  auto doubled = corpus;
  for (const auto& s : corpus.sequences) doubled.sequences.push_back(s);
  const auto a = estimate_fisher_diagonal(model, corpus);
  const auto b = estimate_fisher_diagonal(model, doubled);
  for (std::size_t m = 0; m < a.diagonal.size(); ++m) {
    for (std::size_t i = 0; i < a.diagonal[m].values.size(); ++i) {
      EXPECT_NEAR(a.diagonal[m].values[i], b.diagonal[m].values[i], 1e-12 * a.diagonal[m].values[i] + 1e-300);
    }
  }
}

TEST(Fisher, NonNegative) {
  const auto fisher = estimate_fisher_diagonal(init_model(tiny_config()), random_corpus(4, 10, 4));
  for (const auto& e : fisher.diagonal)
    for (double v : e.values.data()) EXPECT_GE(v, 0.0);
}

TEST(Fisher, EmptyCorpusRejected) {
  EXPECT_THROW(estimate_fisher_diagonal(init_model(tiny_config()), corpus_of({})), ValidationError);
}

TEST(NextTokenGradients, SingleSampleEqualsItsGradient) {
  const auto model = init_model(tiny_config());
  const auto corpus = random_corpus(1, 9, 5);
  const auto n = next_token_gradients(model, corpus);
  const auto g = loss_and_gradients(model, corpus.sequences[0]);
  EXPECT_EQ(n.mean_loss, g.loss);
  for (const auto& e : n.mean) EXPECT_TRUE(e.values.bit_equal(prunable_grad(g.gradients, e.key)));
}

TEST(NextTokenGradients, RepeatedSampleKeepsMean) {
  const auto model = init_model(tiny_config());
  const auto once = random_corpus(1, 9, 6);
  auto twice = once;
  twice.sequences.push_back(once.sequences[0]);
  const auto a = next_token_gradients(model, once);
  const auto b = next_token_gradients(model, twice);
  for (std::size_t m = 0; m < a.mean.size(); ++m) EXPECT_TRUE(a.mean[m].values.bit_equal(b.mean[m].values));
}

TEST(NextTokenGradients, MatchesFiniteDifferences) {
  auto model = init_model(tiny_config(21));
  const auto corpus = random_corpus(3, 10, 7);
  const auto n = next_token_gradients(model, corpus);
  Rng rng(99);
  auto loss = [&] { return mean_loss(model, corpus.sequences); };
  for (int trial = 0; trial < 5; ++trial) {
    const auto& e = n.mean[uniform_index(rng, n.mean.size())];
    const auto idx = uniform_index(rng, e.values.size());
    const double fd = finite_difference_gradient(loss, model.matrix(e.key), idx, 1e-5);
    EXPECT_LT(relative_error(e.values[idx], fd), 1e-4) << e.key.name() << "[" << idx << "]";
  }
}

TEST(GeneralImportance, ZeroWeightHasZeroImportance) {
  auto model = init_model(tiny_config());
  const MatrixKey key{0, Projection::v};
  for (auto& w : model.matrix(key).data()) w = 0.0;
  const auto g = general_importance(model, random_corpus(2, 8, 8));
  for (double v : find_matrix(g.scores, key).data()) EXPECT_EQ(v, 0.0);
}

TEST(GeneralImportance, HandArithmetic) {
  auto model = init_model(tiny_config());
  model.matrix({0, Projection::q})[0] = 2.0;
  FisherDiagonal fisher{filled(model, 1.0), 1};
  const auto g = general_importance_from_fisher(model, fisher, 1e-12);
  EXPECT_NEAR(find_matrix(g.scores, {0, Projection::q})[0], 2.0, 1e-11);
  const auto damped = general_importance_from_fisher(model, fisher, 1e-4);
  EXPECT_DOUBLE_EQ(find_matrix(damped.scores, {0, Projection::q})[0], 0.5 * 4.0 * (1.0 + 1e-4));
}

TEST(GeneralImportance, QuadraticInWeightsAtFixedFisher) {
  auto model = init_model(tiny_config());
  const auto fisher = estimate_fisher_diagonal(model, random_corpus(2, 8, 9));
  const auto base = general_importance_from_fisher(model, fisher, 1e-4);
  auto doubled = model;
  for (const auto& k : prunable_keys(model.config()))
    for (auto& w : doubled.matrix(k).data()) w *= 2.0;
  const auto scaled = general_importance_from_fisher(doubled, fisher, 1e-4);
  for (std::size_t m = 0; m < base.scores.size(); ++m) {
    for (std::size_t i = 0; i < base.scores[m].values.size(); ++i) {
      EXPECT_DOUBLE_EQ(scaled.scores[m].values[i], 4.0 * base.scores[m].values[i]);
    }
  }
}

TEST(GeneralImportance, DampingBounds) {
  const auto model = init_model(tiny_config());
  FisherDiagonal fisher{filled(model, 1.0), 1};
  // The zero-damping limit is allowed when the Fisher diagonal is given.
  EXPECT_NO_THROW(general_importance_from_fisher(model, fisher, 0.0));
  EXPECT_THROW(general_importance_from_fisher(model, fisher, -1.0), ValidationError);
  const auto corpus = testing::corpus_of({{1, 2, 3, 4}});
  EXPECT_THROW(general_importance(model, corpus, {0.0, false}), ValidationError);
}

TEST(GeneralImportance, NormalizedMatricesPeakAtOne) {
  const auto model = init_model(tiny_config());
  const auto g = general_importance(model, random_corpus(2, 8, 10), {1e-4, true});
  EXPECT_TRUE(g.normalized);
  for (const auto& e : g.scores) {
    double peak = 0.0;
    for (double v : e.values.data()) peak = std::max(peak, v);
    EXPECT_DOUBLE_EQ(peak, 1.0);
  }
}

TEST(GeneralImportance, RecordsProvenance) {
  const auto model = init_model(tiny_config());
  const auto corpus = random_corpus(3, 8, 11);
  const auto g = general_importance(model, corpus);
  EXPECT_EQ(g.samples, 3u);
  EXPECT_EQ(g.damping, 1e-4);
  EXPECT_EQ(g.corpus_fingerprint, corpus.fingerprint());
  EXPECT_EQ(g.model_fingerprint, model.fingerprint());
  for (const auto& e : g.scores)
    for (double v : e.values.data()) EXPECT_GE(v, 0.0);
}

TEST(RegularizerGradient, ZeroLambdaGivesZeros) {
  const auto model = init_model(tiny_config());
  ImportanceMatrixG g{filled(model, 3.0)};
  const auto r = regularizer_gradient(g, filled(model, 0.7), FisherDiagonal{filled(model, 2.0), 1}, 0.0, 0.03);
  for (const auto& e : r)
    for (double v : e.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(RegularizerGradient, HandArithmetic) {
  const auto model = init_model(tiny_config());
  ImportanceMatrixG g{filled(model, 1.0)};
  const auto r = regularizer_gradient(g, filled(model, 0.5), FisherDiagonal{filled(model, 2.0), 1}, 0.1, 0.03);
  for (const auto& e : r)
    for (double v : e.values.data()) EXPECT_NEAR(v, 1.8e-4, 1e-18);
}

TEST(RegularizerGradient, SignFollowsNextGradient) {
  const auto model = init_model(tiny_config());
  Rng rng(12);
  auto next = zeros_like_prunable(model);
  auto gen = zeros_like_prunable(model);
  auto h = zeros_like_prunable(model);
  for (std::size_t m = 0; m < next.size(); ++m) {
    for (std::size_t i = 0; i < next[m].values.size(); ++i) {
      next[m].values[i] = standard_normal(rng);
      gen[m].values[i] = uniform01(rng) + 0.01;
      h[m].values[i] = uniform01(rng) + 0.01;
    }
  }
  const auto r = regularizer_gradient(ImportanceMatrixG{gen}, next, FisherDiagonal{h, 1}, 0.1, 0.03);
  for (std::size_t m = 0; m < r.size(); ++m) {
    for (std::size_t i = 0; i < r[m].values.size(); ++i) {
      EXPECT_EQ(std::signbit(r[m].values[i]), std::signbit(next[m].values[i]));
    }
  }
}

TEST(RegularizerGradient, FactorsOutLambdaAlphaSquared) {
  const auto model = init_model(tiny_config());
  Rng rng(13);
  auto next = zeros_like_prunable(model);
  for (auto& e : next)
    for (auto& v : e.values.data()) v = standard_normal(rng);
  ImportanceMatrixG g{filled(model, 0.3)};
  FisherDiagonal h{filled(model, 1.7), 1};
  const auto a = regularizer_gradient(g, next, h, 0.1, 0.03);
  const auto b = regularizer_gradient(g, next, h, 2.5, 0.7);
  for (std::size_t m = 0; m < a.size(); ++m) {
    for (std::size_t i = 0; i < a[m].values.size(); ++i) {
      EXPECT_NEAR(a[m].values[i] / (0.1 * 0.03 * 0.03), b[m].values[i] / (2.5 * 0.7 * 0.7),
                  1e-12 * std::abs(b[m].values[i] / (2.5 * 0.49)) + 1e-300);
    }
  }
}

TEST(RegularizerGradient, RejectsBadInputs) {
  const auto model = init_model(tiny_config());
  ImportanceMatrixG g{filled(model, 1.0)};
  FisherDiagonal h{filled(model, 1.0), 1};
  EXPECT_THROW(regularizer_gradient(g, filled(model, 1.0), h, -0.1, 0.03), ValidationError);
  EXPECT_THROW(regularizer_gradient(g, filled(model, 1.0), h, 0.1, 0.0), ValidationError);
  auto short_set = filled(model, 1.0);
  short_set.pop_back();
  EXPECT_THROW(regularizer_gradient(g, short_set, h, 0.1, 0.03), ValidationError);
  auto wrong_shape = filled(model, 1.0);
  wrong_shape[0].values = Tensor({2, 2});
  EXPECT_THROW(regularizer_gradient(g, wrong_shape, h, 0.1, 0.03), ValidationError);
}

class DualGradientTest : public ::testing::Test {
 protected:
  TransformerModel model = init_model(tiny_config(31));
  Corpus open = random_corpus(4, 12, 40);
  Corpus domain = random_corpus(4, 12, 41);
  ImportanceMatrixG general = general_importance(model, open);
};

TEST_F(DualGradientTest, ZeroLambdaIsBitIdenticalToNextGradient) {
  const auto d = dual_loss_gradient(model, domain, general, 0.0, 0.03);
  const auto n = next_token_gradients(model, domain);
  for (std::size_t m = 0; m < n.mean.size(); ++m) EXPECT_TRUE(d.gradient[m].values.bit_equal(n.mean[m].values));
}

TEST_F(DualGradientTest, PositiveLambdaChangesSomething) {
  const auto a = dual_loss_gradient(model, domain, general, 0.0, 0.03);
  const auto b = dual_loss_gradient(model, domain, general, 0.1, 0.03);
  bool differs = false;
  for (std::size_t m = 0; m < a.gradient.size(); ++m) differs |= !a.gradient[m].values.bit_equal(b.gradient[m].values);
  EXPECT_TRUE(differs);
}

TEST_F(DualGradientTest, IsNextPlusRegularizer) {
  const auto d = dual_loss_gradient(model, domain, general, 0.1, 0.03);
  const auto n = next_token_gradients(model, domain);
  const auto r = regularizer_gradient(general, n.mean, FisherDiagonal{n.mean_squared, n.samples}, 0.1, 0.03);
  for (std::size_t m = 0; m < n.mean.size(); ++m) {
    for (std::size_t i = 0; i < n.mean[m].values.size(); ++i) {
      EXPECT_EQ(d.gradient[m].values[i], n.mean[m].values[i] + r[m].values[i]);
    }
  }
}

TEST_F(DualGradientTest, FisherOverrideIsUsed) {
  const auto fisher = estimate_fisher_diagonal(model, open);
  const auto d = dual_loss_gradient(model, domain, general, 0.1, 0.03, &fisher);
  const auto r = regularizer_gradient(general, d.next.mean, fisher, 0.1, 0.03);
  for (std::size_t m = 0; m < r.size(); ++m) {
    for (std::size_t i = 0; i < r[m].values.size(); ++i) {
      EXPECT_EQ(d.gradient[m].values[i], d.next.mean[m].values[i] + r[m].values[i]);
    }
  }
}

TEST_F(DualGradientTest, DoesNotModifyModel) {
  const auto before = model.fingerprint();
  dual_importance_scores(model, domain, general, 0.1, 0.03);
  EXPECT_EQ(model.fingerprint(), before);
}

TEST_F(DualGradientTest, ZeroLambdaScoresEqualUnregularized) {
  const auto a = dual_importance_scores(model, domain, general, 0.0, 0.03);
  const auto b = unregularized_scores(model, domain);
  EXPECT_EQ(b.method, "noreg");
  for (std::size_t m = 0; m < a.scores.size(); ++m) EXPECT_TRUE(a.scores[m].values.bit_equal(b.scores[m].values));
}

TEST_F(DualGradientTest, ScoresNonNegativeAndDeterministic) {
  const auto a = dual_importance_scores(model, domain, general, 0.1, 0.03);
  const auto b = dual_importance_scores(model, domain, general, 0.1, 0.03);
  EXPECT_EQ(matrix_set_fingerprint(a.scores), matrix_set_fingerprint(b.scores));
  for (const auto& e : a.scores)
    for (double v : e.values.data()) EXPECT_GE(v, 0.0);
  EXPECT_EQ(a.samples, 4u);
  EXPECT_EQ(a.domain_corpus_fingerprint, domain.fingerprint());
  EXPECT_EQ(a.open_corpus_fingerprint, open.fingerprint());
}

TEST(TaylorScores, ZeroWeightScoresZero) {
  auto model = init_model(tiny_config());
  for (auto& w : model.matrix({1, Projection::gate}).data()) w = 0.0;
  const auto s = taylor_scores(model, filled(model, 3.0));
  for (double v : find_matrix(s, {1, Projection::gate}).data()) EXPECT_EQ(v, 0.0);
}

TEST(TaylorScores, HandArithmetic) {
  auto model = init_model(tiny_config());
  for (auto& w : model.matrix({0, Projection::k}).data()) w = 1.0;
  const auto s = taylor_scores(model, filled(model, -1.0));
  for (double v : find_matrix(s, {0, Projection::k}).data()) EXPECT_EQ(v, 0.5);
}

TEST(BruteForce, AlreadyZeroWeightGivesZero) {
  auto model = init_model(tiny_config());
  const MatrixKey key{0, Projection::o};
  model.matrix(key)[5] = 0.0;
  const std::vector<std::size_t> idx = {5, 6};
  const auto d = brute_force_importance(model, random_corpus(2, 8, 14), key, idx);
  EXPECT_EQ(d[0], 0.0);
  EXPECT_GE(d[1], 0.0);
}

TEST(BruteForce, MatchesDirectZeroing) {
  const auto model = init_model(tiny_config());
  const auto corpus = random_corpus(2, 8, 15);
  const MatrixKey key{1, Projection::up};
  const std::vector<std::size_t> idx = {0, 17, 40};
  const auto d = brute_force_importance(model, corpus, key, idx);
  const double base = mean_loss(model, corpus.sequences);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto copy = model;
    copy.matrix(key)[idx[i]] = 0.0;
    EXPECT_EQ(d[i], std::abs(mean_loss(copy, corpus.sequences) - base));
  }
}

TEST(BruteForce, RejectsBadIndex) {
  const auto model = init_model(tiny_config());
  const std::vector<std::size_t> idx = {100000};
  EXPECT_THROW(brute_force_importance(model, random_corpus(1, 8, 1), {0, Projection::q}, idx), ValidationError);
}

TEST(ScoreFiles, GeneralRoundTrip) {
  TempDir dir;
  const auto model = init_model(tiny_config());
  const auto g = general_importance(model, random_corpus(2, 8, 16), {1e-3, false});
  save_general_importance(dir / "g.scores", g);
  const auto back = load_general_importance(dir / "g.scores");
  EXPECT_EQ(back.damping, 1e-3);
  EXPECT_EQ(back.samples, 2u);
  EXPECT_EQ(back.model_fingerprint, g.model_fingerprint);
  EXPECT_EQ(back.corpus_fingerprint, g.corpus_fingerprint);
  EXPECT_EQ(matrix_set_fingerprint(back.scores), matrix_set_fingerprint(g.scores));
  save_general_importance(dir / "g2.scores", back);
  EXPECT_EQ(read_file_bytes(dir / "g.scores"), read_file_bytes(dir / "g2.scores"));
}

TEST(ScoreFiles, DualRoundTripAndTypeCheck) {
  TempDir dir;
  const auto model = init_model(tiny_config());
  const auto g = general_importance(model, random_corpus(2, 8, 17));
  const auto s = dual_importance_scores(model, random_corpus(2, 8, 18), g, 0.1, 0.03);
  save_dual_scores(dir / "s.scores", s);
  const auto back = load_dual_scores(dir / "s.scores");
  EXPECT_EQ(back.lambda, 0.1);
  EXPECT_EQ(back.alpha, 0.03);
  EXPECT_EQ(back.method, "dual");
  EXPECT_EQ(back.general_fingerprint, s.general_fingerprint);
  EXPECT_EQ(matrix_set_fingerprint(back.scores), matrix_set_fingerprint(s.scores));
  EXPECT_THROW(load_general_importance(dir / "s.scores"), ValidationError);
  save_general_importance(dir / "g.scores", g);
  EXPECT_THROW(load_dual_scores(dir / "g.scores"), ValidationError);
}

TEST(ScoreFiles, TamperedScoresRejected) {
  TempDir dir;
  const auto model = init_model(tiny_config());
  save_general_importance(dir / "g.scores", general_importance(model, random_corpus(2, 8, 19)));
  auto bytes = read_file_bytes(dir / "g.scores");
  bytes[bytes.size() - 2] ^= 0x11;
  write_file_bytes(dir / "g.scores", bytes);
  EXPECT_THROW(load_general_importance(dir / "g.scores"), FormatError);
}

}  // namespace
}  // namespace dpruner
