#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/factorization.hpp"
#include "hatesub/lattice.hpp"

namespace hatesub {

enum class Pooling { weighted, sum, mean };

inline std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::weighted: return "weighted";
    case Pooling::sum: return "sum";
    case Pooling::mean: return "mean";
  }
  return "?";
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "weighted") return Pooling::weighted;
  if (s == "sum") return Pooling::sum;
  if (s == "mean") return Pooling::mean;
  throw Error("unknown pooling '" + std::string(s) + "' (expected weighted, sum or mean)");
}

// One coefficient per combination, shared by every user holding it.
struct MixingWeights {
  std::vector<double> alpha;

  static MixingWeights constant(std::size_t z, double value) { return {std::vector<double>(z, value)}; }

  // 1 / (mean number of combinations per user), over users with at least one.
  static MixingWeights inverse_mean(const CombinationUniverse& universe) {
    std::size_t users = 0;
    std::size_t total = 0;
    for (const auto& [uid, idx] : universe.by_user) {
      (void)uid;
      if (idx.empty()) continue;
      ++users;
      total += idx.size();
    }
    const double mean = users ? static_cast<double>(total) / static_cast<double>(users) : 1.0;
    return constant(universe.z(), 1.0 / mean);
  }

  bool finite() const {
    return std::all_of(alpha.begin(), alpha.end(), [](double a) { return std::isfinite(a); });
  }

  bool operator==(const MixingWeights&) const = default;
};

// Rows [p_l ; b_c_l] for one user's combinations, in the order given.
struct HateSubspace {
  std::string user_id;
  std::vector<std::size_t> combination_indices;
  Eigen::MatrixXd stacked;  // n_l x (d + 1)
};

inline HateSubspace build_subspace(std::string user_id, std::vector<std::size_t> indices, const FactorModel& model) {
  const auto d = static_cast<Eigen::Index>(model.d());
  HateSubspace s{std::move(user_id), std::move(indices), {}};
  s.stacked.resize(static_cast<Eigen::Index>(s.combination_indices.size()), d + 1);
  for (std::size_t r = 0; r < s.combination_indices.size(); ++r) {
    const auto l = s.combination_indices[r];
    if (l >= model.z()) throw Error("combination index " + std::to_string(l) + " outside factor model");
    const auto ri = static_cast<Eigen::Index>(r);
    const auto li = static_cast<Eigen::Index>(l);
    s.stacked.row(ri).head(d) = model.P.row(li);
    s.stacked(ri, d) = model.bc[li];
  }
  return s;
}

struct HatePerception {
  Eigen::VectorXd vector;  // d + 1
  bool cold_start = false;
};

inline double pooling_coefficient(Pooling pooling, const MixingWeights& weights, std::size_t l, std::size_t n) {
  switch (pooling) {
    case Pooling::weighted: return weights.alpha.at(l);
    case Pooling::sum: return 1.0;
    case Pooling::mean: return 1.0 / static_cast<double>(n);
  }
  return 0.0;
}

// HP = sum_l coef_l * [p_l ; b_c_l]. No combinations -> zero vector, cold start.
inline HatePerception hate_perception(std::span<const std::size_t> indices, const FactorModel& model,
                                      const MixingWeights& weights, Pooling pooling) {
  const std::size_t d = model.d();
  HatePerception hp{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d + 1)), indices.empty()};
  for (const auto l : indices) {
    const double c = pooling_coefficient(pooling, weights, l, indices.size());
    const double* p = model.P.data() + l * d;
    for (std::size_t k = 0; k < d; ++k) hp.vector[static_cast<Eigen::Index>(k)] += c * p[k];
    hp.vector[static_cast<Eigen::Index>(d)] += c * model.bc[static_cast<Eigen::Index>(l)];
  }
  return hp;
}

inline HatePerception hate_perception(const UserProfile& user, const FactorModel& model,
                                      const CombinationUniverse& universe, const MixingWeights& weights,
                                      Pooling pooling) {
  const auto idx = resolve_combinations(user, universe);
  return hate_perception(std::span<const std::size_t>(idx), model, weights, pooling);
}

// ---------------------------------------------------------------------------
// Leverage scores

// Row leverage: squared norms of the rows of U_r, where U_r are the left
// singular vectors whose singular values exceed max(n, c) * eps * sigma_max.
// The SVD is taken over rows in a canonical (sorted) order, so permuting the
// input rows permutes the scores exactly.
inline Eigen::VectorXd leverage_scores(const Eigen::MatrixXd& stacked) {
  const Eigen::Index n = stacked.rows();
  const Eigen::Index c = stacked.cols();
  if (n == 0) throw Error("leverage scores need a non-empty matrix");
  if (!stacked.allFinite()) throw Error("leverage scores: matrix has non-finite entries");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index k = 0; k < c; ++k) {
      if (stacked(a, k) != stacked(b, k)) return stacked(a, k) < stacked(b, k);
    }
    return false;
  });
  Eigen::MatrixXd sorted(n, c);
  for (Eigen::Index r = 0; r < n; ++r) sorted.row(r) = stacked.row(order[static_cast<std::size_t>(r)]);

  Eigen::BDCSVD<Eigen::MatrixXd> svd(sorted, Eigen::ComputeThinU);
  if (svd.info() != Eigen::Success) throw Error("leverage scores: SVD did not converge");
  const auto& sigma = svd.singularValues();
  const double tol = static_cast<double>(std::max(n, c)) * std::numeric_limits<double>::epsilon() *
                     (sigma.size() ? sigma[0] : 0.0);
  Eigen::Index rank = 0;
  while (rank < sigma.size() && sigma[rank] > tol) ++rank;

  Eigen::VectorXd scores(n);
  const auto& u = svd.matrixU();
  for (Eigen::Index r = 0; r < n; ++r) {
    const double s = rank ? u.row(r).head(rank).squaredNorm() : 0.0;
    scores[order[static_cast<std::size_t>(r)]] = std::clamp(s, 0.0, 1.0);
  }
  return scores;
}

inline std::map<std::size_t, double> leverage_scores(const HateSubspace& subspace) {
  const auto scores = leverage_scores(subspace.stacked);
  std::map<std::size_t, double> out;
  for (std::size_t r = 0; r < subspace.combination_indices.size(); ++r) {
    out[subspace.combination_indices[r]] = scores[static_cast<Eigen::Index>(r)];
  }
  return out;
}

// Numerical rank with the same tolerance rule as leverage_scores.
inline std::size_t numerical_rank(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  const auto& sigma = svd.singularValues();
  const double tol = static_cast<double>(std::max(m.rows(), m.cols())) * std::numeric_limits<double>::epsilon() *
                     (sigma.size() ? sigma[0] : 0.0);
  std::size_t r = 0;
  while (static_cast<Eigen::Index>(r) < sigma.size() && sigma[static_cast<Eigen::Index>(r)] > tol) ++r;
  return r;
}

// ---------------------------------------------------------------------------
// Reconstruction curve

struct CurvePoint {
  std::size_t count = 0;
  double error = 0.0;
};

// error(t) = || S - S Pi_t ||_F, Pi_t projecting onto the span of the first t
// rows taken in `row_order`. Returned for t = 0..n.
//
// The first t rows are orthonormalized (Gram-Schmidt with one re-orthogonalization
// pass, dropping directions already spanned) and the basis is completed to the
// full column space. With C = S * B, the error at t is the energy of C outside
// the first r_t basis columns, evaluated as a suffix sum of non-negative column
// energies; the curve is therefore non-increasing in t.
inline std::vector<CurvePoint> reconstruction_curve(const Eigen::MatrixXd& stacked,
                                                    std::span<const std::size_t> row_order) {
  const Eigen::Index n = stacked.rows();
  const Eigen::Index c = stacked.cols();
  if (static_cast<Eigen::Index>(row_order.size()) != n) throw Error("row ordering must cover every row once");
  {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    for (auto r : row_order) {
      if (static_cast<Eigen::Index>(r) >= n || seen[r]) throw Error("row ordering must be a permutation");
      seen[r] = true;
    }
  }

  double scale = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) scale = std::max(scale, stacked.row(r).norm());
  const double tol = 16.0 * static_cast<double>(std::max(n, c)) * std::numeric_limits<double>::epsilon() * scale;

  Eigen::MatrixXd basis(c, c);
  Eigen::Index rank = 0;
  std::vector<Eigen::Index> rank_after(static_cast<std::size_t>(n) + 1, 0);
  for (std::size_t t = 0; t < row_order.size(); ++t) {
    if (rank < c) {
      Eigen::VectorXd v = stacked.row(static_cast<Eigen::Index>(row_order[t])).transpose();
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index k = 0; k < rank; ++k) v -= basis.col(k).dot(v) * basis.col(k);
      }
      const double norm = v.norm();
      if (norm > tol) basis.col(rank++) = v / norm;
    }
    rank_after[t + 1] = rank;
  }

  // Complete to an orthonormal basis of R^c. Householder QR keeps the span of
  // every leading column prefix, so the prefixes still match rank_after.
  Eigen::MatrixXd full = Eigen::MatrixXd::Identity(c, c);
  if (rank > 0) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis.leftCols(rank));
    full = qr.householderQ() * Eigen::MatrixXd::Identity(c, c);
  }

  const Eigen::MatrixXd coords = stacked * full;
  std::vector<double> suffix(static_cast<std::size_t>(c) + 1, 0.0);
  for (Eigen::Index k = c - 1; k >= 0; --k) {
    suffix[static_cast<std::size_t>(k)] = coords.col(k).squaredNorm() + suffix[static_cast<std::size_t>(k) + 1];
  }

  std::vector<CurvePoint> curve;
  curve.reserve(static_cast<std::size_t>(n) + 1);
  for (std::size_t t = 0; t <= row_order.size(); ++t) {
    curve.push_back({t, std::sqrt(suffix[static_cast<std::size_t>(rank_after[t])])});
  }
  return curve;
}

// Curve over a subspace with the ordering given as combination indices.
inline std::vector<CurvePoint> reconstruction_curve(const HateSubspace& subspace,
                                                    std::span<const std::size_t> ordering) {
  std::map<std::size_t, std::size_t> row_of;
  for (std::size_t r = 0; r < subspace.combination_indices.size(); ++r) row_of[subspace.combination_indices[r]] = r;
  std::vector<std::size_t> rows;
  rows.reserve(ordering.size());
  for (auto l : ordering) {
    auto it = row_of.find(l);
    if (it == row_of.end()) throw Error("ordering names combination " + std::to_string(l) + " outside the subspace");
    rows.push_back(it->second);
  }
  return reconstruction_curve(subspace.stacked, rows);
}

// Combination indices sorted by descending score, ties by ascending index.
inline std::vector<std::size_t> descending_order(const std::map<std::size_t, double>& scores) {
  std::vector<std::pair<std::size_t, double>> items(scores.begin(), scores.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::size_t> out;
  out.reserve(items.size());
  for (const auto& [l, s] : items) {
    (void)s;
    out.push_back(l);
  }
  return out;
}

struct SubspaceAnalysis {
  std::map<std::size_t, double> leverage;
  std::vector<std::size_t> ordering;
  std::vector<CurvePoint> recon_error_curve;
};

inline SubspaceAnalysis analyze_subspace(const HateSubspace& subspace) {
  SubspaceAnalysis a;
  a.leverage = leverage_scores(subspace);
  a.ordering = descending_order(a.leverage);
  a.recon_error_curve = reconstruction_curve(subspace, a.ordering);
  return a;
}

// Global ranking of combinations: each combination's leverage summed over the
// subspaces of all users holding it.
struct GlobalLeverage {
  std::vector<double> totals;         // indexed by combination
  std::vector<std::size_t> ordering;  // descending totals, ties by index
  std::vector<std::size_t> rank;      // inverse of ordering
};

inline GlobalLeverage global_leverage(const CombinationUniverse& universe, const FactorModel& model) {
  GlobalLeverage g;
  g.totals.assign(universe.z(), 0.0);
  for (const auto& [uid, idx] : universe.by_user) {
    if (idx.empty()) continue;
    const auto sub = build_subspace(uid, idx, model);
    const auto scores = leverage_scores(sub.stacked);
    for (std::size_t r = 0; r < idx.size(); ++r) g.totals[idx[r]] += scores[static_cast<Eigen::Index>(r)];
  }
  g.ordering.resize(universe.z());
  std::iota(g.ordering.begin(), g.ordering.end(), std::size_t{0});
  std::stable_sort(g.ordering.begin(), g.ordering.end(),
                   [&](std::size_t a, std::size_t b) { return g.totals[a] > g.totals[b]; });
  g.rank.assign(universe.z(), 0);
  for (std::size_t i = 0; i < g.ordering.size(); ++i) g.rank[g.ordering[i]] = i;
  return g;
}

// Keeps the combinations ranked in the top `top_t` of a global ordering.
inline std::vector<std::size_t> restrict_to_top(std::span<const std::size_t> indices,
                                                const std::vector<std::size_t>& rank, std::size_t top_t) {
  std::vector<std::size_t> out;
  for (auto l : indices) {
    if (rank.at(l) < top_t) out.push_back(l);
  }
  return out;
}

}  // namespace hatesub
