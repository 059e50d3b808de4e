#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "hatesub/classifier.hpp"
#include "hatesub/common.hpp"
#include "hatesub/data_model.hpp"
#include "hatesub/factorization.hpp"
#include "hatesub/lattice.hpp"
#include "hatesub/subspace.hpp"

namespace hatesub {

struct PerformancePoint {
  std::size_t count = 0;
  double frobenius_error = 0.0;  // mean over users of their reconstruction error
  Metrics metrics;
};

struct PerformanceCurve {
  std::vector<PerformancePoint> points;
  std::vector<std::string> warnings;
};

// Each user's reconstruction error after keeping only their combinations that
// rank in the global top t, averaged over users with a non-empty subspace.
class RestrictedError {
public:
  RestrictedError(const CombinationUniverse& universe, const FactorModel& model, const GlobalLeverage& global) {
    for (const auto& [uid, idx] : universe.by_user) {
      if (idx.empty()) continue;
      std::vector<std::size_t> ordered = idx;
      std::sort(ordered.begin(), ordered.end(),
                [&](std::size_t a, std::size_t b) { return global.rank[a] < global.rank[b]; });
      const auto sub = build_subspace(uid, idx, model);
      UserCurve uc;
      uc.curve = reconstruction_curve(sub, ordered);
      for (auto l : ordered) uc.ranks.push_back(global.rank[l]);
      users_.push_back(std::move(uc));
    }
  }

  double at(std::size_t t) const {
    if (users_.empty()) return 0.0;
    double total = 0.0;
    for (const auto& u : users_) {
      const auto kept = static_cast<std::size_t>(std::lower_bound(u.ranks.begin(), u.ranks.end(), t) - u.ranks.begin());
      total += u.curve[kept].error;
    }
    return total / static_cast<double>(users_.size());
  }

private:
  struct UserCurve {
    std::vector<CurvePoint> curve;
    std::vector<std::size_t> ranks;  // ascending
  };
  std::vector<UserCurve> users_;
};

// For every checkpoint t, restricts every user to their combinations in the
// top t of `global.ordering`, retrains the classifier head from scratch with the
// same seed and evaluates it on the test split. Checkpoints above z are clamped.
inline PerformanceCurve accumulate_performance(const Dataset& dataset, const FactorModel& model,
                                               const CombinationUniverse& universe, const ClassifierConfig& config,
                                               const GlobalLeverage& global, const std::vector<std::size_t>& checkpoints,
                                               const std::vector<std::string>& matrix_post_ids = {}) {
  PerformanceCurve out;
  const auto base = FeatureContext::make(dataset, model, universe, matrix_post_ids);
  const auto train = make_examples(dataset, Split::train);
  const auto val = make_examples(dataset, Split::val);
  const auto test = make_examples(dataset, Split::test);
  const auto weights = initial_weights(universe, config);
  const RestrictedError errors(universe, model, global);

  for (auto t : checkpoints) {
    if (t > universe.z()) {
      out.warnings.push_back("checkpoint " + std::to_string(t) + " exceeds z = " + std::to_string(universe.z()) +
                             "; clamped");
      t = universe.z();
    }
    FeatureContext ctx = base;
    for (auto& combos : ctx.user_combos) combos = restrict_to_top(combos, global.rank, t);
    const auto trained = train_head(ctx, train, val, weights, config);
    out.points.push_back({t, errors.at(t), evaluate(trained.head, ctx, test, config.averaging)});
  }
  return out;
}

inline std::string format_performance_csv(const PerformanceCurve& curve) {
  std::string out = "count,frobenius_error,accuracy,precision,recall,f1\n";
  for (const auto& p : curve.points) {
    out += std::to_string(p.count) + "," + text::format_double17(p.frobenius_error) + "," +
           text::format_double17(p.metrics.accuracy) + "," + text::format_double17(p.metrics.precision) + "," +
           text::format_double17(p.metrics.recall) + "," + text::format_double17(p.metrics.f1) + "\n";
  }
  return out;
}

}  // namespace hatesub
