#include <gtest/gtest.h>

#include <Eigen/QR>
#include <cmath>
#include <numeric>

#include "hatesub/subspace.hpp"
#include "support.hpp"

using namespace hatesub;
using testsupport::profile;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index n, Eigen::Index c) {
  Eigen::MatrixXd m(n, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Diagonal of the hat matrix A * pinv(A), computed through a complete
// orthogonal decomposition rather than an SVD.
Eigen::VectorXd hat_diagonal(const Eigen::MatrixXd& a) {
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  const Eigen::MatrixXd h = a * cod.pseudoInverse();
  return h.diagonal();
}

// Frobenius distance from S to its projection onto the row span of the given rows.
double projection_error(const Eigen::MatrixXd& s, const std::vector<std::size_t>& rows) {
  if (rows.empty()) return s.norm();
  Eigen::MatrixXd b(static_cast<Eigen::Index>(rows.size()), s.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) b.row(static_cast<Eigen::Index>(i)) = s.row(static_cast<Eigen::Index>(rows[i]));
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(b);
  const Eigen::MatrixXd proj = cod.pseudoInverse() * b;  // c x c projector onto row span
  return (s - s * proj).norm();
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> o(n);
  std::iota(o.begin(), o.end(), std::size_t{0});
  return o;
}

FactorModel model_with_rows(const std::vector<std::vector<double>>& rows, std::size_t d) {
  FactorModel f(rows.size(), 1, d);
  for (std::size_t l = 0; l < rows.size(); ++l) {
    for (std::size_t k = 0; k < d; ++k) f.P(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = rows[l][k];
    f.bc[static_cast<Eigen::Index>(l)] = rows[l][d];
  }
  return f;
}

}  // namespace

TEST(HatePerception, SingletonIsTheRow) {
  const auto f = model_with_rows({{0.3, -1.2, 0.7}}, 2);
  const std::vector<std::size_t> idx{0};
  const auto hp = hate_perception(idx, f, MixingWeights::constant(1, 1.0), Pooling::weighted);
  EXPECT_FALSE(hp.cold_start);
  EXPECT_EQ(hp.vector, (Eigen::Vector3d(0.3, -1.2, 0.7)));
}

TEST(HatePerception, HandWeightedSum) {
  const auto f = model_with_rows({{1.0, 2.0, 4.0}, {-2.0, 0.5, 8.0}}, 2);
  const std::vector<std::size_t> idx{0, 1};
  const auto hp = hate_perception(idx, f, MixingWeights{{0.25, 0.75}}, Pooling::weighted);
  EXPECT_NEAR(hp.vector[0], 0.25 * 1.0 + 0.75 * -2.0, 1e-15);
  EXPECT_NEAR(hp.vector[1], 0.25 * 2.0 + 0.75 * 0.5, 1e-15);
  EXPECT_NEAR(hp.vector[2], 0.25 * 4.0 + 0.75 * 8.0, 1e-15);
}

TEST(HatePerception, MeanOfIdenticalRows) {
  const auto f = model_with_rows({{0.2, 0.4, 0.6}, {0.2, 0.4, 0.6}, {0.2, 0.4, 0.6}}, 2);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto hp = hate_perception(idx, f, MixingWeights::constant(3, 9.0), Pooling::mean);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(hp.vector[k], 0.2 * (k + 1), 1e-15);
}

TEST(HatePerception, SumMatchesWeightedWithUnitAlphaExactly) {
  Rng rng(51);
  FactorModel f(12, 1, 5);
  for (Eigen::Index i = 0; i < f.P.size(); ++i) f.P.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < f.bc.size(); ++i) f.bc[i] = rng.normal();
  const std::vector<std::size_t> idx{1, 4, 5, 9, 11};
  const auto a = hate_perception(idx, f, MixingWeights::constant(12, 1.0), Pooling::weighted);
  const auto b = hate_perception(idx, f, MixingWeights::constant(12, 0.3), Pooling::sum);
  EXPECT_EQ(a.vector, b.vector);
}

TEST(HatePerception, LinearInAlpha) {
  Rng rng(52);
  FactorModel f(8, 1, 4);
  for (Eigen::Index i = 0; i < f.P.size(); ++i) f.P.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < f.bc.size(); ++i) f.bc[i] = rng.normal();
  const std::vector<std::size_t> idx{0, 2, 3, 7};
  MixingWeights a1{std::vector<double>(8)}, a2{std::vector<double>(8)}, both{std::vector<double>(8)};
  for (std::size_t l = 0; l < 8; ++l) {
    a1.alpha[l] = rng.normal();
    a2.alpha[l] = rng.normal();
    both.alpha[l] = a1.alpha[l] + a2.alpha[l];
  }
  const Eigen::VectorXd sum =
      hate_perception(idx, f, a1, Pooling::weighted).vector + hate_perception(idx, f, a2, Pooling::weighted).vector;
  EXPECT_LT((hate_perception(idx, f, both, Pooling::weighted).vector - sum).norm(), 1e-12);
}

TEST(HatePerception, ColdStartIsZero) {
  const auto uni = build_universe({profile("a", {{"x", "1"}})});
  const FactorModel f(uni.z(), 1, 3);
  const auto hp = hate_perception(profile("new", {{"x", "2"}}), f, uni, MixingWeights::inverse_mean(uni), Pooling::weighted);
  EXPECT_TRUE(hp.cold_start);
  EXPECT_EQ(hp.vector.size(), 4);
  EXPECT_EQ(hp.vector.norm(), 0.0);
}

TEST(HatePerception, InverseMeanInitialisation) {
  const auto uni = build_universe({profile("a", {{"x", "1"}}), profile("b", {{"x", "1"}, {"y", "1"}, {"z", "1"}})});
  // 1 and 7 combinations -> mean 4.
  const auto w = MixingWeights::inverse_mean(uni);
  ASSERT_EQ(w.alpha.size(), uni.z());
  for (double a : w.alpha) EXPECT_DOUBLE_EQ(a, 0.25);
}

TEST(BuildSubspace, RowsMirrorModel) {
  const auto f = model_with_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}}, 2);
  const auto s = build_subspace("u", {2, 0}, f);
  ASSERT_EQ(s.stacked.rows(), 2);
  EXPECT_EQ(s.stacked.row(0), (Eigen::RowVector3d(7, 8, 9)));
  EXPECT_EQ(s.stacked.row(1), (Eigen::RowVector3d(1, 2, 3)));
  EXPECT_THROW(build_subspace("u", {3}, f), Error);
}

TEST(Leverage, OrthonormalRowsAreOne) {
  Rng rng(61);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(random_matrix(rng, 6, 6)).householderQ();
  const Eigen::MatrixXd rows = q.topRows(4);
  const auto s = leverage_scores(rows);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(s[i], 1.0, 1e-12);
}

TEST(Leverage, DuplicatedPairSplitsEvenly) {
  Eigen::MatrixXd m(3, 3);
  m << 1, 0, 0, 1, 0, 0, 0, 2, 0;
  const auto s = leverage_scores(m);
  EXPECT_NEAR(s[0], 0.5, 1e-12);
  EXPECT_NEAR(s[1], 0.5, 1e-12);
  EXPECT_NEAR(s[2], 1.0, 1e-12);
  const auto oracle = hat_diagonal(m);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], oracle[i], 1e-12);
}

TEST(Leverage, InvariantsOverRandomMatrices) {
  Rng rng(62);
  for (int trial = 0; trial < 60; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.below(12));
    const auto c = static_cast<Eigen::Index>(1 + rng.below(8));
    Eigen::MatrixXd m = random_matrix(rng, n, c);
    // Inject rank deficiency in some trials.
    if (trial % 3 == 0 && n > 2) m.row(n - 1) = 2.0 * m.row(0) - m.row(1);
    const auto s = leverage_scores(m);
    EXPECT_NEAR(s.sum(), static_cast<double>(numerical_rank(m)), 1e-6) << "trial " << trial;
    EXPECT_GE(s.minCoeff(), 0.0);
    EXPECT_LE(s.maxCoeff(), 1.0);
    const auto oracle = hat_diagonal(m);
    EXPECT_LT((s - oracle).cwiseAbs().maxCoeff(), 1e-8) << "trial " << trial;
  }
}

TEST(Leverage, PermutationEquivarianceIsExact) {
  Rng rng(63);
  for (int trial = 0; trial < 60; ++trial) {
    const auto n = static_cast<Eigen::Index>(2 + rng.below(10));
    const auto c = static_cast<Eigen::Index>(1 + rng.below(6));
    const Eigen::MatrixXd m = random_matrix(rng, n, c);
    std::vector<std::size_t> perm = identity_order(static_cast<std::size_t>(n));
    rng.shuffle(perm);
    Eigen::MatrixXd pm(n, c);
    for (Eigen::Index r = 0; r < n; ++r) pm.row(r) = m.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(r)]));
    const auto s = leverage_scores(m);
    const auto ps = leverage_scores(pm);
    for (Eigen::Index r = 0; r < n; ++r) EXPECT_EQ(ps[r], s[static_cast<Eigen::Index>(perm[static_cast<std::size_t>(r)])]);
  }
}

TEST(Leverage, Errors) {
  EXPECT_THROW(leverage_scores(Eigen::MatrixXd(0, 3)), Error);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Ones(2, 2);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(leverage_scores(bad), Error);
  EXPECT_NEAR(leverage_scores(Eigen::MatrixXd::Zero(2, 2)).sum(), 0.0, 0.0);
}

TEST(Leverage, SubspaceMapKeysAreCombinations) {
  const auto f = model_with_rows({{1, 0, 0}, {0, 1, 0}, {1, 0, 0}}, 2);
  const auto scores = leverage_scores(build_subspace("u", {0, 2, 1}, f));
  EXPECT_NEAR(scores.at(0), 0.5, 1e-12);
  EXPECT_NEAR(scores.at(2), 0.5, 1e-12);
  EXPECT_NEAR(scores.at(1), 1.0, 1e-12);
}

TEST(ReconstructionCurve, FullPrefixAndRankOne) {
  Rng rng(71);
  const Eigen::MatrixXd m = random_matrix(rng, 7, 4);
  const auto curve = reconstruction_curve(m, identity_order(7));
  ASSERT_EQ(curve.size(), 8u);
  EXPECT_EQ(curve.front().count, 0u);
  EXPECT_NEAR(curve.front().error, m.norm(), 1e-12);
  EXPECT_LT(curve.back().error, 1e-8);

  Eigen::MatrixXd r1(4, 3);
  const Eigen::RowVector3d v(1.0, -2.0, 0.5);
  for (int i = 0; i < 4; ++i) r1.row(i) = (i + 1.0) * v;
  const auto c1 = reconstruction_curve(r1, identity_order(4));
  EXPECT_LT(c1[1].error, 1e-10);
}

TEST(ReconstructionCurve, MatchesProjectionOracle) {
  Rng rng(72);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = 1 + rng.below(9);
    const auto c = 1 + rng.below(6);
    Eigen::MatrixXd m = random_matrix(rng, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
    if (n > 2 && trial % 2) m.row(1) = m.row(0);
    auto order = identity_order(n);
    rng.shuffle(order);
    const auto curve = reconstruction_curve(m, order);
    for (std::size_t t = 0; t <= n; ++t) {
      const std::vector<std::size_t> prefix(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(t));
      EXPECT_NEAR(curve[t].error, projection_error(m, prefix), 1e-9) << "trial " << trial << " t " << t;
    }
  }
}

TEST(ReconstructionCurve, MonotoneForEveryOrderingTested) {
  Rng rng(73);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 1 + rng.below(10);
    const Eigen::MatrixXd m = random_matrix(rng, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(1 + rng.below(7)));
    auto order = identity_order(n);
    rng.shuffle(order);
    const auto curve = reconstruction_curve(m, order);
    for (std::size_t t = 1; t < curve.size(); ++t) EXPECT_LE(curve[t].error, curve[t - 1].error);
    EXPECT_LT(curve.back().error, 1e-8);
  }
}

TEST(ReconstructionCurve, RejectsNonPermutation) {
  const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(3, 3);
  EXPECT_THROW(reconstruction_curve(m, std::vector<std::size_t>{0, 1}), Error);
  EXPECT_THROW(reconstruction_curve(m, std::vector<std::size_t>{0, 1, 1}), Error);
  EXPECT_THROW(reconstruction_curve(m, std::vector<std::size_t>{0, 1, 3}), Error);
}

TEST(ReconstructionCurve, LeverageOrderingSkipsDuplicates) {
  // Row 0 repeated four times plus two independent rows: the duplicates share
  // leverage 0.25, so the leverage ordering spans everything after three rows.
  Eigen::MatrixXd m(6, 3);
  m << 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  const auto lev = leverage_scores(m);
  std::map<std::size_t, double> scores;
  for (std::size_t r = 0; r < 6; ++r) scores[r] = lev[static_cast<Eigen::Index>(r)];
  const auto curve = reconstruction_curve(m, descending_order(scores));
  EXPECT_LT(curve[3].error, 1e-12);
  const auto in_order = reconstruction_curve(m, identity_order(6));
  EXPECT_NEAR(in_order[3].error, std::sqrt(2.0), 1e-12);
}

TEST(AnalyzeSubspace, OrderingFollowsLeverage) {
  const auto f = model_with_rows({{1, 0, 0}, {0, 1, 0}, {1, 0, 0}, {0, 0, 1}}, 2);
  const auto a = analyze_subspace(build_subspace("u", {0, 1, 2, 3}, f));
  EXPECT_EQ(a.ordering, (std::vector<std::size_t>{1, 3, 0, 2}));
  ASSERT_EQ(a.recon_error_curve.size(), 5u);
  EXPECT_LT(a.recon_error_curve[3].error, 1e-12);
  EXPECT_NEAR(a.recon_error_curve[2].error, std::sqrt(2.0), 1e-12);
}

TEST(GlobalLeverage, SumsPerUserScores) {
  std::vector<UserProfile> users;
  Rng rng(81);
  for (int i = 0; i < 12; ++i) {
    users.push_back(profile("u" + std::to_string(i), {{"a", "v" + std::to_string(rng.below(2))},
                                                       {"b", "v" + std::to_string(rng.below(2))},
                                                       {"c", "v" + std::to_string(rng.below(2))}}));
  }
  const auto uni = build_universe(users);
  FactorModel f(uni.z(), 1, 2);
  for (Eigen::Index i = 0; i < f.P.size(); ++i) f.P.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < f.bc.size(); ++i) f.bc[i] = rng.normal();
  const auto g = global_leverage(uni, f);

  std::vector<double> expected(uni.z(), 0.0);
  for (const auto& u : users) {
    const auto& idx = uni.by_user.at(u.user_id);
    const auto h = hat_diagonal(build_subspace(u.user_id, idx, f).stacked);
    for (std::size_t r = 0; r < idx.size(); ++r) expected[idx[r]] += h[static_cast<Eigen::Index>(r)];
  }
  for (std::size_t l = 0; l < uni.z(); ++l) EXPECT_NEAR(g.totals[l], expected[l], 1e-8);
  for (std::size_t i = 1; i < g.ordering.size(); ++i) EXPECT_GE(g.totals[g.ordering[i - 1]], g.totals[g.ordering[i]]);
  for (std::size_t i = 0; i < g.ordering.size(); ++i) EXPECT_EQ(g.rank[g.ordering[i]], i);
}

TEST(RestrictToTop, KeepsRankedPrefix) {
  const std::vector<std::size_t> rank{2, 0, 3, 1};
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  EXPECT_TRUE(restrict_to_top(idx, rank, 0).empty());
  EXPECT_EQ(restrict_to_top(idx, rank, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(restrict_to_top(idx, rank, 3), (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(restrict_to_top(idx, rank, 4), idx);
}
