#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/interaction_matrix.hpp"
#include "hatesub/rng.hpp"

namespace hatesub {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Biased matrix factorization of the culture-post matrix:
//   Y_hat(l, j) = mu + bc[l] + bw[j] + <Q.row(j), P.row(l)>
struct FactorModel {
  double mu = 0.0;
  RowMatrix P;  // z x d, combination embeddings
  RowMatrix Q;  // m x d, post embeddings
  Eigen::VectorXd bc;  // z
  Eigen::VectorXd bw;  // m

  FactorModel() = default;
  FactorModel(std::size_t z, std::size_t m, std::size_t d)
      : P(RowMatrix::Zero(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(d))),
        Q(RowMatrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d))),
        bc(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(z))),
        bw(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m))) {}

  std::size_t z() const { return static_cast<std::size_t>(P.rows()); }
  std::size_t m() const { return static_cast<std::size_t>(Q.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(P.cols()); }

  bool finite() const {
    return std::isfinite(mu) && P.allFinite() && Q.allFinite() && bc.allFinite() && bw.allFinite();
  }

  bool operator==(const FactorModel& o) const {
    return mu == o.mu && P.rows() == o.P.rows() && P.cols() == o.P.cols() && Q.rows() == o.Q.rows() &&
           Q.cols() == o.Q.cols() && P == o.P && Q == o.Q && bc == o.bc && bw == o.bw;
  }
};

// How the L2 penalty is accumulated.
//   per_cell:      every observed cell adds lambda * (bc_l^2 + bw_j^2 + |q_j|^2 + |p_l|^2),
//                  so a row touching n cells is penalized n times.
//   per_parameter: each row/column that has observed cells is penalized once.
enum class Regularization { per_cell, per_parameter };

struct TrainConfig {
  std::size_t d = 128;
  double learning_rate = 0.01;
  double lambda = 0.01;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  double init_scale = 0.01;
  // Stop once an epoch improves the loss by less than this fraction.
  double early_stop_tol = 1e-6;
  Regularization regularization = Regularization::per_cell;

  void validate() const {
    if (d < 1) throw Error("embedding dimension d must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be > 0");
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    if (!(init_scale >= 0.0)) throw Error("init_scale must be >= 0");
  }
};

inline double predict_cell(const FactorModel& model, std::size_t l, std::size_t j) {
  if (l >= model.z() || j >= model.m()) {
    throw std::out_of_range("cell (" + std::to_string(l) + ", " + std::to_string(j) + ") outside " +
                            std::to_string(model.z()) + " x " + std::to_string(model.m()) + " model");
  }
  const auto li = static_cast<Eigen::Index>(l);
  const auto ji = static_cast<Eigen::Index>(j);
  return model.mu + model.bc[li] + model.bw[ji] + model.Q.row(ji).dot(model.P.row(li));
}

namespace detail {

struct ObservedCounts {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> cols;
};

inline ObservedCounts observed_counts(const InteractionMatrix& y) {
  ObservedCounts c{std::vector<std::size_t>(y.z, 0), std::vector<std::size_t>(y.m, 0)};
  for (const auto& e : y.entries) {
    ++c.rows[e.row];
    ++c.cols[e.col];
  }
  return c;
}

inline void check_shapes(const FactorModel& model, const InteractionMatrix& y) {
  if (model.z() != y.z || model.m() != y.m) {
    throw Error("factor model shape " + std::to_string(model.z()) + " x " + std::to_string(model.m()) +
                " does not match matrix " + std::to_string(y.z) + " x " + std::to_string(y.m));
  }
}

}  // namespace detail

inline double loss(const FactorModel& model, const InteractionMatrix& y, double lambda,
                   Regularization reg = Regularization::per_cell) {
  detail::check_shapes(model, y);
  double total = 0.0;
  for (const auto& e : y.entries) {
    const double r = e.weight - predict_cell(model, e.row, e.col);
    total += r * r;
    if (reg == Regularization::per_cell) {
      const auto l = static_cast<Eigen::Index>(e.row);
      const auto j = static_cast<Eigen::Index>(e.col);
      total += lambda * (model.bc[l] * model.bc[l] + model.bw[j] * model.bw[j] + model.Q.row(j).squaredNorm() +
                         model.P.row(l).squaredNorm());
    }
  }
  if (reg == Regularization::per_parameter) {
    const auto counts = detail::observed_counts(y);
    double penalty = 0.0;
    for (std::size_t l = 0; l < y.z; ++l) {
      if (counts.rows[l] == 0) continue;
      const auto li = static_cast<Eigen::Index>(l);
      penalty += model.bc[li] * model.bc[li] + model.P.row(li).squaredNorm();
    }
    for (std::size_t j = 0; j < y.m; ++j) {
      if (counts.cols[j] == 0) continue;
      const auto ji = static_cast<Eigen::Index>(j);
      penalty += model.bw[ji] * model.bw[ji] + model.Q.row(ji).squaredNorm();
    }
    total += lambda * penalty;
  }
  return total;
}

// Gradient of `loss` with respect to bc, bw, P and Q (mu is held fixed).
struct FactorGradient {
  Eigen::VectorXd bc;
  Eigen::VectorXd bw;
  RowMatrix P;
  RowMatrix Q;
};

inline FactorGradient loss_gradient(const FactorModel& model, const InteractionMatrix& y, double lambda,
                                    Regularization reg = Regularization::per_cell) {
  detail::check_shapes(model, y);
  FactorGradient g{Eigen::VectorXd::Zero(model.bc.size()), Eigen::VectorXd::Zero(model.bw.size()),
                   RowMatrix::Zero(model.P.rows(), model.P.cols()), RowMatrix::Zero(model.Q.rows(), model.Q.cols())};
  for (const auto& e : y.entries) {
    const auto l = static_cast<Eigen::Index>(e.row);
    const auto j = static_cast<Eigen::Index>(e.col);
    const double r = e.weight - predict_cell(model, e.row, e.col);
    g.bc[l] += -2.0 * r;
    g.bw[j] += -2.0 * r;
    g.P.row(l) += -2.0 * r * model.Q.row(j);
    g.Q.row(j) += -2.0 * r * model.P.row(l);
    if (reg == Regularization::per_cell) {
      g.bc[l] += 2.0 * lambda * model.bc[l];
      g.bw[j] += 2.0 * lambda * model.bw[j];
      g.P.row(l) += 2.0 * lambda * model.P.row(l);
      g.Q.row(j) += 2.0 * lambda * model.Q.row(j);
    }
  }
  if (reg == Regularization::per_parameter) {
    const auto counts = detail::observed_counts(y);
    for (std::size_t l = 0; l < y.z; ++l) {
      if (counts.rows[l] == 0) continue;
      const auto li = static_cast<Eigen::Index>(l);
      g.bc[li] += 2.0 * lambda * model.bc[li];
      g.P.row(li) += 2.0 * lambda * model.P.row(li);
    }
    for (std::size_t j = 0; j < y.m; ++j) {
      if (counts.cols[j] == 0) continue;
      const auto ji = static_cast<Eigen::Index>(j);
      g.bw[ji] += 2.0 * lambda * model.bw[ji];
      g.Q.row(ji) += 2.0 * lambda * model.Q.row(ji);
    }
  }
  return g;
}

struct FitResult {
  FactorModel model;
  std::vector<double> epoch_losses;  // loss after each completed epoch
  double initial_loss = 0.0;
};

// Per-cell SGD on the observed cells. mu is fixed to the observed mean.
inline FitResult fit(const InteractionMatrix& y, const TrainConfig& config) {
  config.validate();
  if (y.entries.empty()) throw Error("cannot factorize a matrix without observed cells");

  FitResult result;
  auto& model = result.model;
  model = FactorModel(y.z, y.m, config.d);
  model.mu = y.mean();

  Rng init(config.seed);
  const double s = config.init_scale;
  for (Eigen::Index i = 0; i < model.bc.size(); ++i) model.bc[i] = init.uniform(-s, s);
  for (Eigen::Index i = 0; i < model.bw.size(); ++i) model.bw[i] = init.uniform(-s, s);
  for (Eigen::Index i = 0; i < model.P.size(); ++i) model.P.data()[i] = init.uniform(-s, s);
  for (Eigen::Index i = 0; i < model.Q.size(); ++i) model.Q.data()[i] = init.uniform(-s, s);

  const auto counts = detail::observed_counts(y);
  std::vector<double> row_reg(y.z, 1.0);
  std::vector<double> col_reg(y.m, 1.0);
  if (config.regularization == Regularization::per_parameter) {
    for (std::size_t l = 0; l < y.z; ++l) row_reg[l] = counts.rows[l] ? 1.0 / static_cast<double>(counts.rows[l]) : 0.0;
    for (std::size_t j = 0; j < y.m; ++j) col_reg[j] = counts.cols[j] ? 1.0 / static_cast<double>(counts.cols[j]) : 0.0;
  }

  std::vector<std::size_t> order(y.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffler(derive_seed(config.seed, 1));

  const double lr = config.learning_rate;
  const double lambda = config.lambda;
  Eigen::RowVectorXd p_old(static_cast<Eigen::Index>(config.d));

  double prev = loss(model, y, lambda, config.regularization);
  result.initial_loss = prev;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffler.shuffle(order);
    for (const auto idx : order) {
      const auto& e = y.entries[idx];
      const auto l = static_cast<Eigen::Index>(e.row);
      const auto j = static_cast<Eigen::Index>(e.col);
      const double r = e.weight - (model.mu + model.bc[l] + model.bw[j] + model.Q.row(j).dot(model.P.row(l)));
      const double rl = lambda * row_reg[e.row];
      const double rj = lambda * col_reg[e.col];
      model.bc[l] -= lr * (-2.0 * r + 2.0 * rl * model.bc[l]);
      model.bw[j] -= lr * (-2.0 * r + 2.0 * rj * model.bw[j]);
      p_old = model.P.row(l);
      model.P.row(l) -= lr * (-2.0 * r * model.Q.row(j) + 2.0 * rl * p_old);
      model.Q.row(j) -= lr * (-2.0 * r * p_old + 2.0 * rj * model.Q.row(j));
    }
    const double current = loss(model, y, lambda, config.regularization);
    if (!std::isfinite(current) || !model.finite()) {
      throw Error("factorization diverged at epoch " + std::to_string(epoch + 1) +
                  " (non-finite parameters); lower learning_rate (currently " + text::format_double(lr) + ")");
    }
    result.epoch_losses.push_back(current);
    const double improvement = (prev - current) / std::max(prev, 1e-300);
    prev = current;
    if (config.early_stop_tol > 0.0 && improvement < config.early_stop_tol) break;
  }
  return result;
}

// Largest relative disagreement between the analytic gradient and central
// finite differences over every trainable parameter. Entries where both
// gradients are below `abs_floor` in magnitude are compared against the floor.
inline double gradient_check(const FactorModel& model, const InteractionMatrix& y, double lambda, double epsilon,
                             Regularization reg = Regularization::per_cell, double abs_floor = 1e-6) {
  const auto g = loss_gradient(model, y, lambda, reg);
  FactorModel probe = model;
  double worst = 0.0;

  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + epsilon;
    const double up = loss(probe, y, lambda, reg);
    param = saved - epsilon;
    const double down = loss(probe, y, lambda, reg);
    param = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  };

  for (Eigen::Index i = 0; i < probe.bc.size(); ++i) check(probe.bc[i], g.bc[i]);
  for (Eigen::Index i = 0; i < probe.bw.size(); ++i) check(probe.bw[i], g.bw[i]);
  for (Eigen::Index i = 0; i < probe.P.size(); ++i) check(probe.P.data()[i], g.P.data()[i]);
  for (Eigen::Index i = 0; i < probe.Q.size(); ++i) check(probe.Q.data()[i], g.Q.data()[i]);
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoint text format:
//   z=<z> m=<m> d=<d> mu=<mu>
//   B_c <z values>
//   B_w <m values>
//   z lines of d values (P), then m lines of d values (Q)
// Values use 17 significant digits, so a write/read cycle is bit-exact.

inline std::string format_model(const FactorModel& model) {
  std::string out = "z=" + std::to_string(model.z()) + " m=" + std::to_string(model.m()) +
                    " d=" + std::to_string(model.d()) + " mu=" + text::format_double17(model.mu) + "\n";
  auto vec_line = [&](const char* tag, const Eigen::VectorXd& v) {
    out += tag;
    for (Eigen::Index i = 0; i < v.size(); ++i) out += " " + text::format_double17(v[i]);
    out += "\n";
  };
  auto mat_rows = [&](const RowMatrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) out += ' ';
        out += text::format_double17(m(r, c));
      }
      out += "\n";
    }
  };
  vec_line("B_c", model.bc);
  vec_line("B_w", model.bw);
  mat_rows(model.P);
  mat_rows(model.Q);
  return out;
}

inline FactorModel parse_model(std::string_view content) {
  const auto lines = text::split(content, '\n');
  std::size_t n = 0;
  auto next = [&]() -> std::vector<std::string> {
    if (n >= lines.size()) throw Error("factor model checkpoint truncated");
    return text::split_ws(lines[n++]);
  };
  const auto head = next();
  if (head.size() != 4) throw Error("factor model checkpoint: malformed header");
  auto field = [&](const std::string& tok, const char* key) {
    const std::string prefix = std::string(key) + "=";
    if (tok.rfind(prefix, 0) != 0) throw Error("factor model checkpoint: expected '" + prefix + "'");
    return tok.substr(prefix.size());
  };
  const auto z = static_cast<std::size_t>(text::require_int(field(head[0], "z"), "z"));
  const auto m = static_cast<std::size_t>(text::require_int(field(head[1], "m"), "m"));
  const auto d = static_cast<std::size_t>(text::require_int(field(head[2], "d"), "d"));
  FactorModel model(z, m, d);
  model.mu = text::require_double(field(head[3], "mu"), "mu");

  auto read_vec = [&](const char* tag, Eigen::VectorXd& v) {
    const auto toks = next();
    if (toks.empty() || toks[0] != tag || toks.size() != static_cast<std::size_t>(v.size()) + 1) {
      throw Error(std::string("factor model checkpoint: malformed ") + tag + " line");
    }
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = text::require_double(toks[static_cast<std::size_t>(i) + 1], tag);
  };
  auto read_rows = [&](RowMatrix& mat, const char* what) {
    for (Eigen::Index r = 0; r < mat.rows(); ++r) {
      const auto toks = next();
      if (toks.size() != static_cast<std::size_t>(mat.cols())) {
        throw Error(std::string("factor model checkpoint: wrong width in ") + what + " row " + std::to_string(r));
      }
      for (Eigen::Index c = 0; c < mat.cols(); ++c) mat(r, c) = text::require_double(toks[static_cast<std::size_t>(c)], what);
    }
  };
  read_vec("B_c", model.bc);
  read_vec("B_w", model.bw);
  read_rows(model.P, "P");
  read_rows(model.Q, "Q");
  if (!model.finite()) throw Error("factor model checkpoint contains non-finite values");
  return model;
}

}  // namespace hatesub
