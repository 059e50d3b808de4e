#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/data_model.hpp"
#include "hatesub/factorization.hpp"
#include "hatesub/lattice.hpp"
#include "hatesub/rng.hpp"
#include "hatesub/subspace.hpp"

namespace hatesub {

// Which of the three input blocks (HP(u), q_j, s_j) feed the classifier.
struct FeatureMask {
  bool hp = true;
  bool q = true;
  bool s = true;

  static FeatureMask all() { return {}; }

  // "hp+q+s", "q,s", "full"/"all", or "-hp" (everything but hp).
  static FeatureMask parse(std::string_view spec) {
    const auto t = text::trim(spec);
    if (t == "full" || t == "all") return all();
    if (!t.empty() && t.front() == '-') {
      FeatureMask m = all();
      m.set(t.substr(1), false);
      return m;
    }
    FeatureMask m{false, false, false};
    std::string normalized(t);
    std::replace(normalized.begin(), normalized.end(), ',', '+');
    for (const auto& item : text::split_list(normalized, '+')) m.set(item, true);
    if (!m.any()) throw Error("feature mask '" + std::string(spec) + "' enables no block");
    return m;
  }

  void set(std::string_view block, bool on) {
    if (block == "hp") {
      hp = on;
    } else if (block == "q") {
      q = on;
    } else if (block == "s") {
      s = on;
    } else {
      throw Error("unknown feature block '" + std::string(block) + "' (expected hp, q or s)");
    }
  }

  bool any() const { return hp || q || s; }

  std::string name() const {
    std::string out;
    auto add = [&](bool on, const char* n) {
      if (!on) return;
      if (!out.empty()) out += '+';
      out += n;
    };
    add(hp, "hp");
    add(q, "q");
    add(s, "s");
    return out;
  }

  bool operator==(const FeatureMask&) const = default;
};

struct FeatureVector {
  Eigen::VectorXd hp;
  Eigen::VectorXd q;
  Eigen::VectorXd s;
  FeatureMask mask;
};

// ---------------------------------------------------------------------------
// Metrics

enum class Averaging { macro, binary };

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }

  // Macro: per-class precision/recall/F1 averaged over the two classes. A class
  // with neither true nor predicted instances is left out of the average; any
  // other 0/0 ratio counts as 0. Binary: the hateful class alone.
  static Metrics from_confusion(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn,
                                Averaging averaging = Averaging::macro) {
    Metrics m{0, 0, 0, 0, tp, fp, tn, fn};
    const auto total = tp + fp + tn + fn;
    m.accuracy = total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
    auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    auto f1_of = [](double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; };

    struct ClassStats {
      double precision, recall, f1;
      bool present;
    };
    auto stats = [&](std::size_t hit, std::size_t false_pos, std::size_t miss) {
      const double p = ratio(hit, hit + false_pos);
      const double r = ratio(hit, hit + miss);
      return ClassStats{p, r, f1_of(p, r), (hit + false_pos + miss) > 0};
    };
    const auto pos = stats(tp, fp, fn);
    const auto neg = stats(tn, fn, fp);
    if (averaging == Averaging::binary) {
      m.precision = pos.precision;
      m.recall = pos.recall;
      m.f1 = pos.f1;
      return m;
    }
    double n = 0.0;
    for (const auto& c : {pos, neg}) {
      if (!c.present) continue;
      m.precision += c.precision;
      m.recall += c.recall;
      m.f1 += c.f1;
      n += 1.0;
    }
    if (n > 0.0) {
      m.precision /= n;
      m.recall /= n;
      m.f1 /= n;
    }
    return m;
  }

  bool operator==(const Metrics&) const = default;
};

inline int decide(double probability) { return probability >= 0.5 ? 1 : 0; }

// ---------------------------------------------------------------------------
// Feature context: everything frozen that the classifier reads per example.

struct FeatureContext {
  const FactorModel* model = nullptr;
  std::vector<std::vector<std::size_t>> user_combos;      // per dataset user
  std::vector<std::size_t> q_row;                         // per dataset post
  std::vector<const std::vector<double>*> embeddings;     // per dataset post, may be null
  std::size_t s_dim = 0;

  std::size_t hp_dim() const { return model->d() + 1; }
  std::size_t q_dim() const { return model->d(); }

  // `matrix_post_ids` maps factor-model columns to post ids; empty means the
  // columns follow the dataset's post order.
  static FeatureContext make(const Dataset& dataset, const FactorModel& model, const CombinationUniverse& universe,
                             const std::vector<std::string>& matrix_post_ids = {}) {
    FeatureContext ctx;
    ctx.model = &model;
    ctx.user_combos.reserve(dataset.users.size());
    for (const auto& u : dataset.users) {
      auto idx = resolve_combinations(u, universe);
      for (auto l : idx) {
        if (l >= model.z()) throw Error("universe and factor model disagree on the number of combinations");
      }
      ctx.user_combos.push_back(std::move(idx));
    }
    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < matrix_post_ids.size(); ++j) col.emplace(matrix_post_ids[j], j);
    if (matrix_post_ids.empty() && model.m() != dataset.posts.size()) {
      throw Error("factor model has " + std::to_string(model.m()) + " post rows but the dataset has " +
                  std::to_string(dataset.posts.size()) + " posts");
    }
    for (std::size_t j = 0; j < dataset.posts.size(); ++j) {
      const auto& p = dataset.posts[j];
      if (matrix_post_ids.empty()) {
        ctx.q_row.push_back(j);
      } else {
        auto it = col.find(p.post_id);
        if (it == col.end()) throw Error("post '" + p.post_id + "' has no column in the interaction matrix");
        ctx.q_row.push_back(it->second);
      }
      ctx.embeddings.push_back(p.text_embedding ? &*p.text_embedding : nullptr);
    }
    ctx.s_dim = dataset.embedding_dim;
    return ctx;
  }
};

struct Example {
  std::size_t user = 0;  // dataset user index
  std::size_t post = 0;  // dataset post index
  int label = 0;
};

inline std::vector<Example> make_examples(const Dataset& dataset, std::optional<Split> split) {
  const auto ui = dataset.user_index();
  const auto pi = dataset.post_index();
  std::vector<Example> out;
  for (const auto& a : dataset.annotations) {
    if (split && dataset.split_of(a.post_id) != *split) continue;
    out.push_back({ui.at(a.user_id), pi.at(a.post_id), a.label});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Two-layer head: input -> tanh(W1 x + b1) -> w2 . h + b2 -> logistic.

struct ClassifierHead {
  std::size_t hp_dim = 0;
  std::size_t q_dim = 0;
  std::size_t s_dim = 0;
  std::size_t hidden = 0;
  FeatureMask mask;    // blocks that carry information
  FeatureMask layout;  // blocks that occupy input slots; masked-but-present blocks read as zero
  Pooling pooling = Pooling::weighted;
  std::vector<double> theta;  // [W1 (hidden x input, row-major) | b1 | w2 | b2]
  MixingWeights weights;

  std::size_t input_dim() const {
    return (layout.hp ? hp_dim : 0) + (layout.q ? q_dim : 0) + (layout.s ? s_dim : 0);
  }
  std::size_t b1_offset() const { return hidden * input_dim(); }
  std::size_t w2_offset() const { return b1_offset() + hidden; }
  std::size_t b2_offset() const { return w2_offset() + hidden; }
  std::size_t parameter_count() const { return b2_offset() + 1; }

  bool finite() const {
    return std::all_of(theta.begin(), theta.end(), [](double v) { return std::isfinite(v); }) && weights.finite();
  }

  bool operator==(const ClassifierHead&) const = default;
};

struct HeadShape {
  std::size_t hp_dim = 0;
  std::size_t q_dim = 0;
  std::size_t s_dim = 0;
  std::size_t hidden = 256;
  FeatureMask mask;
  bool zero_masked_blocks = false;
  Pooling pooling = Pooling::weighted;
};

// Xavier-uniform weights with one random stream per input block, scaled by the
// full (unmasked) fan-in, so a block's weights do not depend on which other
// blocks are enabled.
inline ClassifierHead init_head(const HeadShape& shape, MixingWeights weights, std::uint64_t seed) {
  if (!shape.mask.any()) throw Error("classifier needs at least one enabled feature block");
  if (shape.hidden < 1) throw Error("hidden width must be >= 1");
  ClassifierHead head;
  head.hp_dim = shape.hp_dim;
  head.q_dim = shape.q_dim;
  head.s_dim = shape.s_dim;
  head.hidden = shape.hidden;
  head.mask = shape.mask;
  head.layout = shape.zero_masked_blocks ? FeatureMask::all() : shape.mask;
  head.pooling = shape.pooling;
  head.weights = std::move(weights);
  head.theta.assign(head.parameter_count(), 0.0);

  const std::size_t d_in = head.input_dim();
  const double fan_in = static_cast<double>(shape.hp_dim + shape.q_dim + shape.s_dim);
  const double a = std::sqrt(6.0 / (fan_in + static_cast<double>(shape.hidden)));
  std::size_t offset = 0;
  auto fill_block = [&](bool present, std::size_t dim, std::uint64_t stream) {
    if (!present) return;
    Rng rng(derive_seed(seed, stream));
    for (std::size_t h = 0; h < head.hidden; ++h) {
      for (std::size_t k = 0; k < dim; ++k) head.theta[h * d_in + offset + k] = rng.uniform(-a, a);
    }
    offset += dim;
  };
  fill_block(head.layout.hp, head.hp_dim, 100);
  fill_block(head.layout.q, head.q_dim, 101);
  fill_block(head.layout.s, head.s_dim, 102);

  Rng out_rng(derive_seed(seed, 103));
  const double b = std::sqrt(6.0 / (static_cast<double>(shape.hidden) + 1.0));
  for (std::size_t h = 0; h < head.hidden; ++h) head.theta[head.w2_offset() + h] = out_rng.uniform(-b, b);
  return head;
}

namespace detail {

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Binary cross-entropy on the logit, log(1 + e^o) - y * o, without overflow.
inline double bce_with_logit(double o, int y) {
  const double softplus = o > 0.0 ? o + std::log1p(std::exp(-o)) : std::log1p(std::exp(o));
  return softplus - (y ? o : 0.0);
}

struct Forward {
  std::vector<double> hidden;
  double logit = 0.0;
  double probability = 0.5;
};

inline Forward forward(const ClassifierHead& head, std::span<const double> x) {
  const std::size_t d_in = head.input_dim();
  Forward f;
  f.hidden.resize(head.hidden);
  double o = head.theta[head.b2_offset()];
  for (std::size_t h = 0; h < head.hidden; ++h) {
    double acc = head.theta[head.b1_offset() + h];
    const double* w = head.theta.data() + h * d_in;
    for (std::size_t k = 0; k < d_in; ++k) acc += w[k] * x[k];
    f.hidden[h] = std::tanh(acc);
    o += head.theta[head.w2_offset() + h] * f.hidden[h];
  }
  f.logit = o;
  f.probability = logistic(o);
  return f;
}

// Accumulates d(loss)/d(theta) * scale for one example; returns dL/dx when wanted.
inline void backward(const ClassifierHead& head, std::span<const double> x, const Forward& f, int label, double scale,
                     std::vector<double>& grad, std::vector<double>* grad_x) {
  const std::size_t d_in = head.input_dim();
  const double g = (f.probability - static_cast<double>(label)) * scale;
  grad[head.b2_offset()] += g;
  for (std::size_t h = 0; h < head.hidden; ++h) {
    grad[head.w2_offset() + h] += g * f.hidden[h];
    const double dh = g * head.theta[head.w2_offset() + h] * (1.0 - f.hidden[h] * f.hidden[h]);
    grad[head.b1_offset() + h] += dh;
    double* gw = grad.data() + h * d_in;
    const double* w = head.theta.data() + h * d_in;
    for (std::size_t k = 0; k < d_in; ++k) gw[k] += dh * x[k];
    if (grad_x) {
      for (std::size_t k = 0; k < d_in; ++k) (*grad_x)[k] += dh * w[k];
    }
  }
}

}  // namespace detail

// Concatenates the blocks of `features` into the head's input layout.
inline std::vector<double> assemble_input(const ClassifierHead& head, const FeatureVector& features) {
  if (features.mask != head.mask) {
    throw Error("feature mask '" + features.mask.name() + "' does not match classifier mask '" + head.mask.name() + "'");
  }
  std::size_t actual = 0;
  if (features.mask.hp) actual += static_cast<std::size_t>(features.hp.size());
  if (features.mask.q) actual += static_cast<std::size_t>(features.q.size());
  if (features.mask.s) actual += static_cast<std::size_t>(features.s.size());
  const std::size_t expected =
      (head.mask.hp ? head.hp_dim : 0) + (head.mask.q ? head.q_dim : 0) + (head.mask.s ? head.s_dim : 0);
  auto check = [&](bool on, const Eigen::VectorXd& v, std::size_t want, const char* name) {
    if (on && static_cast<std::size_t>(v.size()) != want) {
      throw Error(std::string("feature block ") + name + " has dimension " + std::to_string(v.size()) +
                  ", expected " + std::to_string(want) + " (input dimension expected " + std::to_string(expected) +
                  ", actual " + std::to_string(actual) + ")");
    }
  };
  check(features.mask.hp, features.hp, head.hp_dim, "hp");
  check(features.mask.q, features.q, head.q_dim, "q");
  check(features.mask.s, features.s, head.s_dim, "s");

  std::vector<double> x;
  x.reserve(head.input_dim());
  auto put = [&](bool present, bool on, const Eigen::VectorXd& v, std::size_t dim) {
    if (!present) return;
    for (std::size_t k = 0; k < dim; ++k) x.push_back(on ? v[static_cast<Eigen::Index>(k)] : 0.0);
  };
  put(head.layout.hp, head.mask.hp, features.hp, head.hp_dim);
  put(head.layout.q, head.mask.q, features.q, head.q_dim);
  put(head.layout.s, head.mask.s, features.s, head.s_dim);
  return x;
}

// P(hate | user, post) in (0, 1).
inline double predict(const ClassifierHead& head, const FeatureVector& features) {
  const auto x = assemble_input(head, features);
  return detail::forward(head, x).probability;
}

namespace detail {

inline void write_post_blocks(const ClassifierHead& head, const FeatureContext& ctx, std::size_t post,
                              std::vector<double>& x, std::size_t& pos) {
  if (head.layout.q) {
    const double* q = ctx.model->Q.data() + ctx.q_row[post] * head.q_dim;
    for (std::size_t k = 0; k < head.q_dim; ++k) x[pos + k] = head.mask.q ? q[k] : 0.0;
    pos += head.q_dim;
  }
  if (head.layout.s) {
    const auto* s = ctx.embeddings[post];
    if (head.mask.s && !s) throw Error("post index " + std::to_string(post) + " has no text embedding");
    for (std::size_t k = 0; k < head.s_dim; ++k) x[pos + k] = head.mask.s ? (*s)[k] : 0.0;
    pos += head.s_dim;
  }
}

inline void fill_input(const ClassifierHead& head, const FeatureContext& ctx, const Eigen::VectorXd* hp,
                       std::size_t post, std::vector<double>& x) {
  x.assign(head.input_dim(), 0.0);
  std::size_t pos = 0;
  if (head.layout.hp) {
    if (head.mask.hp) {
      for (std::size_t k = 0; k < head.hp_dim; ++k) x[k] = (*hp)[static_cast<Eigen::Index>(k)];
    }
    pos += head.hp_dim;
  }
  write_post_blocks(head, ctx, post, x, pos);
}

inline bool alpha_trainable(const ClassifierHead& head) { return head.mask.hp && head.pooling == Pooling::weighted; }

}  // namespace detail

// Mean binary cross-entropy over `batch` and its gradient with respect to theta
// and (weighted pooling only) the mixing coefficients.
inline double head_loss_gradient(const ClassifierHead& head, const FeatureContext& ctx, std::span<const Example> batch,
                                 std::vector<double>* grad_theta, std::vector<double>* grad_alpha) {
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());

  // HP per distinct user, in order of first appearance.
  std::unordered_map<std::size_t, std::size_t> slot;
  std::vector<std::size_t> users;
  std::vector<Eigen::VectorXd> hps;
  if (head.mask.hp) {
    for (const auto& ex : batch) {
      if (slot.emplace(ex.user, users.size()).second) {
        users.push_back(ex.user);
        hps.push_back(hate_perception(ctx.user_combos[ex.user], *ctx.model, head.weights, head.pooling).vector);
      }
    }
  }
  const bool want_alpha = grad_alpha && detail::alpha_trainable(head);
  std::vector<Eigen::VectorXd> hp_grads(users.size(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(head.hp_dim)));
  std::vector<double> grad_x;

  double total = 0.0;
  std::vector<double> x;
  for (const auto& ex : batch) {
    const Eigen::VectorXd* hp = head.mask.hp ? &hps[slot.at(ex.user)] : nullptr;
    detail::fill_input(head, ctx, hp, ex.post, x);
    const auto f = detail::forward(head, x);
    total += detail::bce_with_logit(f.logit, ex.label);
    if (grad_theta) {
      if (want_alpha) grad_x.assign(x.size(), 0.0);
      detail::backward(head, x, f, ex.label, scale, *grad_theta, want_alpha ? &grad_x : nullptr);
      if (want_alpha) {
        auto& g = hp_grads[slot.at(ex.user)];
        for (std::size_t k = 0; k < head.hp_dim; ++k) g[static_cast<Eigen::Index>(k)] += grad_x[k];
      }
    }
  }
  if (want_alpha && grad_theta) {
    const std::size_t d = ctx.model->d();
    for (std::size_t u = 0; u < users.size(); ++u) {
      const auto& g = hp_grads[u];
      for (const auto l : ctx.user_combos[users[u]]) {
        const double* p = ctx.model->P.data() + l * d;
        double dot = g[static_cast<Eigen::Index>(d)] * ctx.model->bc[static_cast<Eigen::Index>(l)];
        for (std::size_t k = 0; k < d; ++k) dot += g[static_cast<Eigen::Index>(k)] * p[k];
        (*grad_alpha)[l] += dot;
      }
    }
  }
  return total * scale;
}

// Relative error between analytic and central-difference gradients of the
// mean batch loss, over theta and the coefficients of combinations in the batch.
inline double head_gradient_check(const ClassifierHead& head, const FeatureContext& ctx,
                                  std::span<const Example> batch, double epsilon, double abs_floor = 1e-6) {
  std::vector<double> g_theta(head.theta.size(), 0.0);
  std::vector<double> g_alpha(head.weights.alpha.size(), 0.0);
  head_loss_gradient(head, ctx, batch, &g_theta, &g_alpha);

  ClassifierHead probe = head;
  double worst = 0.0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + epsilon;
    const double up = head_loss_gradient(probe, ctx, batch, nullptr, nullptr);
    param = saved - epsilon;
    const double down = head_loss_gradient(probe, ctx, batch, nullptr, nullptr);
    param = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  };
  for (std::size_t i = 0; i < probe.theta.size(); ++i) check(probe.theta[i], g_theta[i]);
  if (detail::alpha_trainable(head)) {
    std::vector<bool> used(head.weights.alpha.size(), false);
    for (const auto& ex : batch) {
      for (auto l : ctx.user_combos[ex.user]) used[l] = true;
    }
    for (std::size_t l = 0; l < used.size(); ++l) {
      if (used[l]) check(probe.weights.alpha[l], g_alpha[l]);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Training

struct ClassifierConfig {
  std::size_t hidden = 256;
  Pooling pooling = Pooling::weighted;
  FeatureMask mask;
  // Keep masked blocks in the input layout as zeros instead of dropping them.
  bool zero_masked_blocks = false;
  std::size_t max_epochs = 30;
  std::size_t batch_size = 32;
  std::size_t patience = 5;
  double learning_rate = 1e-3;
  // Coefficient start value; unset means 1 / (mean combinations per user).
  std::optional<double> alpha_init;
  bool learn_alpha = true;
  Averaging averaging = Averaging::macro;
  std::uint64_t seed = 1;
};

namespace detail {

struct Adam {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;

  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr, std::size_t tick) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(tick));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(tick));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

}  // namespace detail

// Predicted probability for every example; HP computed once per user.
inline std::vector<double> predict_examples(const ClassifierHead& head, const FeatureContext& ctx,
                                            std::span<const Example> examples) {
  std::unordered_map<std::size_t, Eigen::VectorXd> cache;
  std::vector<double> out;
  out.reserve(examples.size());
  std::vector<double> x;
  for (const auto& ex : examples) {
    const Eigen::VectorXd* hp = nullptr;
    if (head.mask.hp) {
      auto it = cache.find(ex.user);
      if (it == cache.end()) {
        it = cache.emplace(ex.user, hate_perception(ctx.user_combos[ex.user], *ctx.model, head.weights, head.pooling).vector)
                 .first;
      }
      hp = &it->second;
    }
    detail::fill_input(head, ctx, hp, ex.post, x);
    out.push_back(detail::forward(head, x).probability);
  }
  return out;
}

inline Metrics evaluate(const ClassifierHead& head, const FeatureContext& ctx, std::span<const Example> examples,
                        Averaging averaging = Averaging::macro) {
  if (examples.empty()) throw Error("cannot evaluate on an empty split");
  const auto probs = predict_examples(head, ctx, examples);
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const int yhat = decide(probs[i]);
    const int y = examples[i].label;
    if (yhat == 1 && y == 1) ++tp;
    if (yhat == 1 && y == 0) ++fp;
    if (yhat == 0 && y == 0) ++tn;
    if (yhat == 0 && y == 1) ++fn;
  }
  return Metrics::from_confusion(tp, fp, tn, fn, averaging);
}

struct TrainOutcome {
  ClassifierHead head;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::vector<double> train_loss;  // mean loss per epoch
  std::vector<double> val_f1;      // per epoch, empty without a validation split
};

inline HeadShape head_shape(const FeatureContext& ctx, const ClassifierConfig& config) {
  return {ctx.hp_dim(), ctx.q_dim(), ctx.s_dim, config.hidden, config.mask, config.zero_masked_blocks, config.pooling};
}

// Mini-batch Adam on mean binary cross-entropy. The factor model is read-only;
// theta and (for weighted pooling) the mixing coefficients are learned. The
// head with the best validation F1 is kept; training stops after `patience`
// epochs without improvement.
inline TrainOutcome train_head(const FeatureContext& ctx, std::span<const Example> train,
                               std::span<const Example> val, const MixingWeights& initial_weights,
                               const ClassifierConfig& config) {
  if (train.empty()) throw Error("no training annotations");
  if (config.batch_size < 1) throw Error("batch_size must be >= 1");
  if (config.mask.s) {
    if (ctx.s_dim == 0) throw Error("feature block s is enabled but no text embeddings were loaded");
    for (const auto& ex : train) {
      if (!ctx.embeddings[ex.post]) throw Error("s block enabled but a training post has no text embedding");
    }
    for (const auto& ex : val) {
      if (!ctx.embeddings[ex.post]) throw Error("s block enabled but a validation post has no text embedding");
    }
  }

  TrainOutcome out;
  out.head = init_head(head_shape(ctx, config), initial_weights, config.seed);
  auto& head = out.head;
  const bool learn_alpha = config.learn_alpha && detail::alpha_trainable(head);

  detail::Adam opt_theta(head.theta.size());
  detail::Adam opt_alpha(head.weights.alpha.size());
  std::vector<Example> order(train.begin(), train.end());
  Rng shuffler(derive_seed(config.seed, 200));

  std::vector<double> g_theta(head.theta.size());
  std::vector<double> g_alpha(head.weights.alpha.size());
  std::optional<ClassifierHead> best;
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  std::size_t tick = 0;

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    shuffler.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const auto len = std::min(config.batch_size, order.size() - start);
      std::span<const Example> batch(order.data() + start, len);
      std::fill(g_theta.begin(), g_theta.end(), 0.0);
      std::fill(g_alpha.begin(), g_alpha.end(), 0.0);
      epoch_loss += head_loss_gradient(head, ctx, batch, &g_theta, learn_alpha ? &g_alpha : nullptr) *
                    static_cast<double>(len);
      ++tick;
      opt_theta.step(head.theta, g_theta, config.learning_rate, tick);
      if (learn_alpha) opt_alpha.step(head.weights.alpha, g_alpha, config.learning_rate, tick);
    }
    if (!head.finite()) {
      throw Error("classifier training diverged at epoch " + std::to_string(epoch + 1) + "; lower learning_rate");
    }
    out.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    out.epochs_run = epoch + 1;

    if (val.empty()) continue;
    const double f1 = evaluate(head, ctx, val, config.averaging).f1;
    out.val_f1.push_back(f1);
    if (f1 > best_f1) {
      best_f1 = f1;
      best = head;
      out.best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  if (best) {
    head = std::move(*best);
  } else {
    out.best_epoch = out.epochs_run;
  }
  return out;
}

inline MixingWeights initial_weights(const CombinationUniverse& universe, const ClassifierConfig& config) {
  if (config.alpha_init) return MixingWeights::constant(universe.z(), *config.alpha_init);
  return MixingWeights::inverse_mean(universe);
}

inline TrainOutcome train(const Dataset& dataset, const FactorModel& model, const CombinationUniverse& universe,
                          const ClassifierConfig& config, const std::vector<std::string>& matrix_post_ids = {}) {
  const auto ctx = FeatureContext::make(dataset, model, universe, matrix_post_ids);
  const auto tr = make_examples(dataset, Split::train);
  const auto va = make_examples(dataset, Split::val);
  return train_head(ctx, tr, va, initial_weights(universe, config), config);
}

inline Metrics evaluate(const ClassifierHead& head, const Dataset& dataset, const FactorModel& model,
                        const CombinationUniverse& universe, Split split, Averaging averaging = Averaging::macro,
                        const std::vector<std::string>& matrix_post_ids = {}) {
  const auto ctx = FeatureContext::make(dataset, model, universe, matrix_post_ids);
  const auto ex = make_examples(dataset, split);
  return evaluate(head, ctx, ex, averaging);
}

// Features for a (possibly unseen) annotator: HP comes from the overlap of
// their power set with the universe; an empty overlap gives a zero hp block.
inline FeatureVector features_for(const ClassifierHead& head, const FeatureContext& ctx,
                                  std::span<const std::size_t> combinations, std::size_t post) {
  FeatureVector fv;
  fv.mask = head.mask;
  if (head.mask.hp) fv.hp = hate_perception(combinations, *ctx.model, head.weights, head.pooling).vector;
  if (head.mask.q) fv.q = ctx.model->Q.row(static_cast<Eigen::Index>(ctx.q_row.at(post))).transpose();
  if (head.mask.s) {
    const auto* s = ctx.embeddings.at(post);
    if (!s) throw Error("post index " + std::to_string(post) + " has no text embedding");
    fv.s = Eigen::Map<const Eigen::VectorXd>(s->data(), static_cast<Eigen::Index>(s->size()));
  }
  return fv;
}

inline double predict_unseen_user(const ClassifierHead& head, const UserProfile& profile, std::size_t post,
                                  const FeatureContext& ctx, const CombinationUniverse& universe) {
  const auto overlap = observed_overlap(profile, universe);
  return predict(head, features_for(head, ctx, overlap, post));
}

}  // namespace hatesub
