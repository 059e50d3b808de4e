#include <gtest/gtest.h>

#include <cmath>

#include "hatesub/classifier.hpp"
#include "support.hpp"

using namespace hatesub;
using testsupport::profile;

namespace {

// Users over attributes a, b (two values each), posts with random embeddings,
// a random frozen factor model, and labels from `label_of(user, post)`.
struct Setup {
  Dataset ds;
  CombinationUniverse uni;
  FactorModel model;
};

template <class F>
std::unique_ptr<Setup> make_setup(std::uint64_t seed, std::size_t n_users, std::size_t n_posts, std::size_t d,
                                  std::size_t e, F label_of) {
  auto s = std::make_unique<Setup>();
  Rng rng(seed);
  for (std::size_t u = 0; u < n_users; ++u) {
    s->ds.users.push_back(profile("u" + std::to_string(u), {{"a", "v" + std::to_string(rng.below(2))},
                                                            {"b", "v" + std::to_string(rng.below(2))}}));
  }
  for (std::size_t j = 0; j < n_posts; ++j) {
    std::vector<double> emb(e);
    for (auto& v : emb) v = rng.normal();
    s->ds.posts.push_back({"p" + std::to_string(j), "", emb});
    s->ds.splits["p" + std::to_string(j)] = j % 5 == 0 ? Split::val : (j % 5 == 1 ? Split::test : Split::train);
  }
  s->ds.embedding_dim = e;
  for (std::size_t u = 0; u < n_users; ++u) {
    for (std::size_t j = 0; j < n_posts; ++j) {
      s->ds.annotations.push_back({s->ds.users[u].user_id, s->ds.posts[j].post_id, label_of(u, j, s->ds, rng)});
    }
  }
  s->uni = build_universe(s->ds.users);
  s->model = FactorModel(s->uni.z(), n_posts, d);
  for (Eigen::Index i = 0; i < s->model.P.size(); ++i) s->model.P.data()[i] = rng.normal(0.0, 0.5);
  for (Eigen::Index i = 0; i < s->model.Q.size(); ++i) s->model.Q.data()[i] = rng.normal(0.0, 0.5);
  for (Eigen::Index i = 0; i < s->model.bc.size(); ++i) s->model.bc[i] = rng.normal(0.0, 0.5);
  return s;
}

auto random_labels(double rate) {
  return [rate](std::size_t, std::size_t, const Dataset&, Rng& rng) { return rng.bernoulli(rate) ? 1 : 0; };
}

ClassifierConfig small_config() {
  ClassifierConfig c;
  c.hidden = 8;
  c.max_epochs = 15;
  c.batch_size = 16;
  c.learning_rate = 0.01;
  c.seed = 3;
  return c;
}

ClassifierHead hand_head() {
  ClassifierHead h;
  h.hp_dim = 2;
  h.hidden = 2;
  h.mask = FeatureMask{true, false, false};
  h.layout = h.mask;
  // W1 = [[0.5, -1], [2, 0.25]], b1 = [0.1, -0.2], w2 = [1.5, -0.5], b2 = 0.3
  h.theta = {0.5, -1.0, 2.0, 0.25, 0.1, -0.2, 1.5, -0.5, 0.3};
  return h;
}

FeatureVector hp_only(double a, double b) {
  FeatureVector fv;
  fv.mask = FeatureMask{true, false, false};
  fv.hp = Eigen::Vector2d(a, b);
  return fv;
}

}  // namespace

TEST(FeatureMask, ParseAndName) {
  EXPECT_EQ(FeatureMask::parse("full"), FeatureMask::all());
  EXPECT_EQ(FeatureMask::parse("-hp").name(), "q+s");
  EXPECT_EQ(FeatureMask::parse("hp,q").name(), "hp+q");
  EXPECT_EQ(FeatureMask::parse("s").name(), "s");
  EXPECT_THROW(FeatureMask::parse("x"), Error);
  EXPECT_THROW(FeatureMask::parse(""), Error);
}

TEST(Predict, ZeroHeadIsOneHalf) {
  auto h = hand_head();
  std::fill(h.theta.begin(), h.theta.end(), 0.0);
  EXPECT_EQ(predict(h, hp_only(3.0, -7.0)), 0.5);
}

TEST(Predict, HandComputedTwoTwoOne) {
  const auto h = hand_head();
  const double h1 = std::tanh(0.5 * 1.0 - 1.0 * 2.0 + 0.1);
  const double h2 = std::tanh(2.0 * 1.0 + 0.25 * 2.0 - 0.2);
  const double o = 0.3 + 1.5 * h1 - 0.5 * h2;
  EXPECT_NEAR(predict(h, hp_only(1.0, 2.0)), 1.0 / (1.0 + std::exp(-o)), 1e-15);
  EXPECT_EQ(predict(h, hp_only(1.0, 2.0)), predict(h, hp_only(1.0, 2.0)));
}

TEST(Predict, DimensionMismatchNamesDims) {
  const auto h = hand_head();
  FeatureVector fv;
  fv.mask = h.mask;
  fv.hp = Eigen::Vector3d(1, 2, 3);
  try {
    predict(h, fv);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("actual 3"), std::string::npos) << msg;
  }
  fv.mask = FeatureMask::all();
  EXPECT_THROW(predict(h, fv), Error);
}

TEST(Predict, ExtremeLogitsStayInOpenInterval) {
  auto h = hand_head();
  h.theta.back() = 30.0;
  const double p = predict(h, hp_only(0, 0));
  EXPECT_GT(p, 0.5);
  EXPECT_LE(p, 1.0);
  EXPECT_NEAR(detail::bce_with_logit(800.0, 1), 0.0, 1e-300);
  EXPECT_NEAR(detail::bce_with_logit(-800.0, 1), 800.0, 1e-9);
}

TEST(Decide, BoundaryInclusive) {
  EXPECT_EQ(decide(0.5), 1);
  EXPECT_EQ(decide(0.4999), 0);
  EXPECT_EQ(decide(1.0), 1);
  EXPECT_EQ(decide(0.0), 0);
  int prev = 0;
  for (int i = 0; i <= 1000; ++i) {
    const int y = decide(i / 1000.0);
    EXPECT_GE(y, prev);
    prev = y;
  }
}

TEST(Metrics, HandConfusion) {
  const auto m = Metrics::from_confusion(1, 1, 1, 1);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
}

TEST(Metrics, PerfectAndDegenerate) {
  const auto perfect = Metrics::from_confusion(3, 0, 5, 0);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);

  // Everything predicted hateful on a balanced split.
  const auto all_pos = Metrics::from_confusion(5, 5, 0, 0);
  EXPECT_DOUBLE_EQ(all_pos.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(all_pos.precision, (0.5 + 0.0) / 2.0);
  EXPECT_DOUBLE_EQ(all_pos.recall, (1.0 + 0.0) / 2.0);

  // A single-class split with every prediction correct scores 1, not 0.5.
  EXPECT_EQ(Metrics::from_confusion(0, 0, 4, 0).f1, 1.0);
}

TEST(Metrics, RecomputableFromConfusion) {
  Rng rng(91);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t tp = rng.below(20), fp = rng.below(20), tn = rng.below(20) + 1, fn = rng.below(20) + 1;
    const auto m = Metrics::from_confusion(tp, fp, tn, fn);
    const double p1 = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    const double r1 = double(tp) / double(tp + fn);
    const double p0 = double(tn) / double(tn + fn);
    const double r0 = tn + fp ? double(tn) / double(tn + fp) : 0.0;
    auto hm = [](double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; };
    EXPECT_NEAR(m.accuracy, double(tp + tn) / double(tp + fp + tn + fn), 1e-15);
    EXPECT_NEAR(m.precision, (p1 + p0) / 2, 1e-15);
    EXPECT_NEAR(m.recall, (r1 + r0) / 2, 1e-15);
    EXPECT_NEAR(m.f1, (hm(p1, r1) + hm(p0, r0)) / 2, 1e-15);
    const auto b = Metrics::from_confusion(tp, fp, tn, fn, Averaging::binary);
    EXPECT_NEAR(b.f1, hm(p1, r1), 1e-15);
    for (double v : {m.accuracy, m.precision, m.recall, m.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(HeadGradient, MatchesFiniteDifferencesTwentySeeds) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = make_setup(seed, 6, 10, 3, 4, random_labels(0.5));
    const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
    const auto ex = make_examples(s->ds, std::nullopt);
    const std::vector<Example> batch(ex.begin(), ex.begin() + 12);
    HeadShape shape{ctx.hp_dim(), ctx.q_dim(), ctx.s_dim, 5, FeatureMask::all(), false, Pooling::weighted};
    Rng rng(seed + 100);
    MixingWeights w = MixingWeights::constant(s->uni.z(), 0.0);
    for (auto& a : w.alpha) a = rng.uniform(0.1, 0.6);
    auto head = init_head(shape, w, seed);
    for (std::size_t h = 0; h < head.hidden; ++h) head.theta[head.b1_offset() + h] = rng.uniform(-0.2, 0.2);
    EXPECT_LT(head_gradient_check(head, ctx, batch, 1e-5), 1e-4) << "seed " << seed;

    shape.pooling = Pooling::mean;
    shape.mask = FeatureMask::parse("hp+q");
    EXPECT_LT(head_gradient_check(init_head(shape, w, seed), ctx, batch, 1e-5), 1e-4) << "seed " << seed;
  }
}

TEST(Train, SeparableFeaturesReachPerfectTrainingAccuracy) {
  const auto s = make_setup(7, 20, 60, 3, 4, [](std::size_t, std::size_t j, const Dataset& ds, Rng&) {
    return (*ds.posts[j].text_embedding)[0] > 0.0 ? 1 : 0;
  });
  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto tr = make_examples(s->ds, Split::train);
  auto cfg = small_config();
  cfg.mask = FeatureMask::parse("s");
  cfg.max_epochs = 100;
  cfg.learning_rate = 0.02;
  const auto out = train_head(ctx, tr, {}, initial_weights(s->uni, cfg), cfg);
  EXPECT_EQ(evaluate(out.head, ctx, tr).accuracy, 1.0);
  EXPECT_LT(out.train_loss.back(), out.train_loss.front());
}

TEST(Train, NullSignalStaysNearMajorityRate) {
  const auto s = make_setup(8, 40, 100, 4, 4, random_labels(0.3));
  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto tr = make_examples(s->ds, Split::train);
  const auto va = make_examples(s->ds, Split::val);
  const auto out = train_head(ctx, tr, va, initial_weights(s->uni, small_config()), small_config());
  std::size_t pos = 0;
  for (const auto& e : va) pos += static_cast<std::size_t>(e.label);
  const double majority = std::max(pos, va.size() - pos) / static_cast<double>(va.size());
  EXPECT_NEAR(evaluate(out.head, ctx, va).accuracy, majority, 0.05);
}

TEST(Train, DeterministicGivenSeed) {
  const auto s = make_setup(9, 10, 30, 3, 4, random_labels(0.4));
  const auto a = train(s->ds, s->model, s->uni, small_config());
  const auto b = train(s->ds, s->model, s->uni, small_config());
  EXPECT_TRUE(a.head == b.head);
  EXPECT_EQ(a.train_loss, b.train_loss);
  auto other = small_config();
  other.seed = 4;
  EXPECT_FALSE(train(s->ds, s->model, s->uni, other).head == a.head);
}

TEST(Train, FactorModelUntouchedAndAlphaLearned) {
  const auto s = make_setup(10, 10, 30, 3, 4, random_labels(0.4));
  const auto before = s->model;
  const auto out = train(s->ds, s->model, s->uni, small_config());
  EXPECT_TRUE(s->model == before);
  EXPECT_NE(out.head.weights, MixingWeights::inverse_mean(s->uni));
  EXPECT_TRUE(out.head.finite());

  auto frozen = small_config();
  frozen.learn_alpha = false;
  EXPECT_EQ(train(s->ds, s->model, s->uni, frozen).head.weights, MixingWeights::inverse_mean(s->uni));
}

TEST(Ablation, MaskingEqualsZeroingExactly) {
  const auto s = make_setup(11, 12, 40, 3, 4, random_labels(0.4));
  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto test = make_examples(s->ds, Split::test);
  for (const char* m : {"-hp", "-q", "-s", "hp"}) {
    auto dropped = small_config();
    dropped.mask = FeatureMask::parse(m);
    auto zeroed = dropped;
    zeroed.zero_masked_blocks = true;
    const auto a = train(s->ds, s->model, s->uni, dropped);
    const auto b = train(s->ds, s->model, s->uni, zeroed);
    EXPECT_LT(a.head.input_dim(), b.head.input_dim());
    EXPECT_EQ(a.train_loss, b.train_loss) << m;
    EXPECT_EQ(predict_examples(a.head, ctx, test), predict_examples(b.head, ctx, test)) << m;
    EXPECT_EQ(evaluate(a.head, ctx, test), evaluate(b.head, ctx, test)) << m;
  }
}

TEST(Ablation, SumEqualsWeightedUnderUnitAlpha) {
  const auto s = make_setup(12, 12, 40, 3, 4, random_labels(0.4));
  auto weighted = small_config();
  weighted.alpha_init = 1.0;
  weighted.learn_alpha = false;
  auto summed = weighted;
  summed.pooling = Pooling::sum;
  const auto a = train(s->ds, s->model, s->uni, weighted);
  const auto b = train(s->ds, s->model, s->uni, summed);
  EXPECT_EQ(a.head.theta, b.head.theta);
  EXPECT_EQ(evaluate(a.head, s->ds, s->model, s->uni, Split::test),
            evaluate(b.head, s->ds, s->model, s->uni, Split::test));
}

TEST(Train, Errors) {
  const auto s = make_setup(13, 4, 10, 2, 3, random_labels(0.5));
  auto no_train = s->ds;
  for (auto& [pid, sp] : no_train.splits) sp = Split::test;
  EXPECT_THROW(train(no_train, s->model, s->uni, small_config()), Error);

  auto no_text = s->ds;
  no_text.embedding_dim = 0;
  for (auto& p : no_text.posts) p.text_embedding.reset();
  EXPECT_THROW(train(no_text, s->model, s->uni, small_config()), Error);
  auto q_only = small_config();
  q_only.mask = FeatureMask::parse("hp+q");
  EXPECT_NO_THROW(train(no_text, s->model, s->uni, q_only));

  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto out = train(s->ds, s->model, s->uni, small_config());
  EXPECT_THROW(evaluate(out.head, ctx, std::vector<Example>{}), Error);
}

TEST(UnseenUser, FullOverlapMatchesStandardPath) {
  const auto s = make_setup(14, 10, 30, 3, 4, random_labels(0.4));
  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto head = train(s->ds, s->model, s->uni, small_config()).head;
  for (std::size_t u = 0; u < s->ds.users.size(); ++u) {
    auto stranger = s->ds.users[u];
    stranger.user_id = "stranger";
    const std::vector<Example> ex{{u, 1, 0}};
    EXPECT_EQ(predict_unseen_user(head, stranger, 1, ctx, s->uni), predict_examples(head, ctx, ex)[0]);
  }
}

TEST(UnseenUser, EmptyOverlapDependsOnlyOnPost) {
  const auto s = make_setup(15, 10, 30, 3, 4, random_labels(0.4));
  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto head = train(s->ds, s->model, s->uni, small_config()).head;
  const auto x = profile("x", {{"a", "zz"}});
  const auto y = profile("y", {{"c", "1"}, {"d", "2"}});
  for (std::size_t j = 0; j < 5; ++j) {
    const double px = predict_unseen_user(head, x, j, ctx, s->uni);
    EXPECT_EQ(px, predict_unseen_user(head, y, j, ctx, s->uni));
    auto fv = features_for(head, ctx, {}, j);
    EXPECT_EQ(fv.hp.norm(), 0.0);
    EXPECT_EQ(px, predict(head, fv));
  }
}

TEST(UnseenUser, PartialOverlapUsesIntersectingRows) {
  const auto s = make_setup(16, 10, 30, 3, 4, random_labels(0.4));
  const auto ctx = FeatureContext::make(s->ds, s->model, s->uni);
  const auto head = train(s->ds, s->model, s->uni, small_config()).head;
  // Only {a=v0} exists in the universe; {b=new} and the pair do not.
  const auto partial = profile("new", {{"a", "v0"}, {"b", "new"}});
  const auto l = *s->uni.find({AttributeValue::make("a", "v0")});
  const auto overlap = observed_overlap(partial, s->uni);
  ASSERT_EQ(overlap, std::vector<std::size_t>{l});
  const auto fv = features_for(head, ctx, overlap, 2);
  Eigen::VectorXd expected(ctx.hp_dim());
  expected << s->model.P.row(static_cast<Eigen::Index>(l)).transpose(), s->model.bc[static_cast<Eigen::Index>(l)];
  expected *= head.weights.alpha[l];
  EXPECT_LT((fv.hp - expected).norm(), 1e-15);
  EXPECT_EQ(predict_unseen_user(head, partial, 2, ctx, s->uni), predict(head, fv));
}
