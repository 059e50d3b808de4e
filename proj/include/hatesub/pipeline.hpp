#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hatesub/analysis.hpp"
#include "hatesub/classifier.hpp"
#include "hatesub/common.hpp"
#include "hatesub/data_model.hpp"
#include "hatesub/factorization.hpp"
#include "hatesub/interaction_matrix.hpp"
#include "hatesub/kv_config.hpp"
#include "hatesub/lattice.hpp"
#include "hatesub/subspace.hpp"
#include "hatesub/synthetic.hpp"

namespace hatesub {

namespace fs = std::filesystem;
using nlohmann::json;

// A named classifier input configuration, e.g. "full" or "no-hp".
struct MaskVariant {
  std::string name;
  FeatureMask mask;

  bool operator==(const MaskVariant&) const = default;
};

// Comma-separated variants. "full" keeps every block; a bare block name
// ("hp", "q", "s", also "-hp" or "no-hp") removes that block; a '+'-joined
// list ("q+s") keeps exactly those blocks.
inline std::vector<MaskVariant> parse_mask_variants(std::string_view spec) {
  std::vector<MaskVariant> out;
  std::set<std::string> seen;
  for (auto item : text::split_list(spec, ',')) {
    MaskVariant v;
    if (item == "full" || item == "all") {
      v = {"full", FeatureMask::all()};
    } else if (item.find('+') != std::string::npos) {
      v.mask = FeatureMask::parse(item);
      v.name = v.mask.name();
    } else {
      std::string block = item;
      if (block.rfind("no-", 0) == 0) block = block.substr(3);
      if (!block.empty() && block.front() == '-') block = block.substr(1);
      v.mask = FeatureMask::all();
      v.mask.set(block, false);
      v.name = "no-" + block;
    }
    if (seen.insert(v.name).second) out.push_back(std::move(v));
  }
  if (out.empty()) throw Error("no classifier mask variants given");
  return out;
}

inline std::vector<std::size_t> parse_checkpoints(std::string_view spec) {
  std::vector<std::size_t> out;
  for (const auto& item : text::split_list(spec, ',')) {
    const auto v = text::require_int(item, "checkpoint");
    if (v < 0) throw Error("checkpoints must be non-negative, got " + item);
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

struct PipelineConfig {
  KeyValueConfig raw;
  fs::path base_dir;
  fs::path out_dir;

  fs::path annotations;
  fs::path schema_path;
  fs::path embeddings;
  fs::path splits;
  fs::path ground_truth;
  SplitRatios ratios;
  std::uint64_t split_seed = 1;
  std::optional<DedupPolicy> dedup;

  std::size_t max_order = kUnlimitedOrder;
  std::string tf = "fraction";
  std::string idf = "smooth";
  TrainConfig factor;
  ClassifierConfig classifier;
  bool annotator_level = false;
  std::vector<MaskVariant> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::size_t> checkpoints;
  std::optional<GeneratorConfig> synthetic;

  bool uses_text_embeddings() const {
    return std::any_of(variants.begin(), variants.end(), [](const MaskVariant& v) { return v.mask.s; });
  }

  static PipelineConfig from(const KeyValueConfig& cfg, const fs::path& base_dir) {
    check_keys(cfg);
    PipelineConfig c;
    c.raw = cfg;
    c.base_dir = base_dir;
    auto path_of = [&](const std::string& key) -> fs::path {
      auto v = cfg.get(key);
      if (!v || v->empty()) return {};
      fs::path p(*v);
      return p.is_absolute() ? p : base_dir / p;
    };
    c.out_dir = path_of("output.dir");
    if (c.out_dir.empty()) c.out_dir = base_dir / "out";
    c.annotations = path_of("data.annotations");
    c.schema_path = path_of("data.schema");
    c.embeddings = path_of("data.embeddings");
    c.splits = path_of("data.splits");
    c.ground_truth = path_of("data.ground_truth");
    c.ratios = {cfg.get_double("data.train_ratio", 0.7), cfg.get_double("data.val_ratio", 0.15),
                cfg.get_double("data.test_ratio", 0.15)};
    c.split_seed = static_cast<std::uint64_t>(cfg.get_int("data.split_seed", 1));
    if (auto d = cfg.get("data.dedup")) {
      if (*d == "error") {
        c.dedup = DedupPolicy::error;
      } else if (*d == "keep-last" || *d == "keep_last") {
        c.dedup = DedupPolicy::keep_last;
      } else {
        throw Error("data.dedup must be 'error' or 'keep-last'");
      }
    }

    c.max_order = static_cast<std::size_t>(non_negative(cfg, "lattice.max_order", 0));
    c.tf = cfg.get_or("matrix.tf", "fraction");
    c.idf = cfg.get_or("matrix.idf", "smooth");
    WeightingScheme::named(c.tf, c.idf);

    auto& f = c.factor;
    f.d = static_cast<std::size_t>(non_negative(cfg, "factorization.d", 128));
    f.learning_rate = cfg.get_double("factorization.learning_rate", f.learning_rate);
    f.lambda = cfg.get_double("factorization.lambda", f.lambda);
    f.epochs = static_cast<std::size_t>(non_negative(cfg, "factorization.epochs", 200));
    f.seed = static_cast<std::uint64_t>(cfg.get_int("factorization.seed", 1));
    f.init_scale = cfg.get_double("factorization.init_scale", f.init_scale);
    f.early_stop_tol = cfg.get_double("factorization.early_stop_tol", f.early_stop_tol);
    const auto reg = cfg.get_or("factorization.regularization", "per-cell");
    if (reg == "per-cell" || reg == "per_cell") {
      f.regularization = Regularization::per_cell;
    } else if (reg == "per-parameter" || reg == "per_parameter") {
      f.regularization = Regularization::per_parameter;
    } else {
      throw Error("factorization.regularization must be 'per-cell' or 'per-parameter'");
    }
    f.validate();

    auto& k = c.classifier;
    k.hidden = static_cast<std::size_t>(non_negative(cfg, "classifier.hidden", 256));
    const auto pooling = cfg.get_or("classifier.pooling", "weighted");
    if (pooling == "anno") {
      c.annotator_level = true;
      k.pooling = Pooling::weighted;
    } else {
      k.pooling = parse_pooling(pooling);
    }
    k.max_epochs = static_cast<std::size_t>(non_negative(cfg, "classifier.epochs", 30));
    k.batch_size = static_cast<std::size_t>(non_negative(cfg, "classifier.batch_size", 32));
    k.patience = static_cast<std::size_t>(non_negative(cfg, "classifier.patience", 5));
    k.learning_rate = cfg.get_double("classifier.learning_rate", 1e-3);
    k.learn_alpha = cfg.get_bool("classifier.learn_alpha", true);
    if (cfg.contains("classifier.alpha_init")) k.alpha_init = cfg.get_double("classifier.alpha_init", 1.0);
    k.zero_masked_blocks = cfg.get_bool("classifier.zero_masked_blocks", false);
    const auto avg = cfg.get_or("classifier.averaging", "macro");
    if (avg == "macro") {
      k.averaging = Averaging::macro;
    } else if (avg == "binary") {
      k.averaging = Averaging::binary;
    } else {
      throw Error("classifier.averaging must be 'macro' or 'binary'");
    }
    c.variants = parse_mask_variants(cfg.get_or("classifier.masks", "full"));
    if (cfg.contains("classifier.seeds")) {
      c.seeds.clear();
      for (const auto& s : cfg.get_list("classifier.seeds")) {
        c.seeds.push_back(static_cast<std::uint64_t>(text::require_int(s, "classifier.seeds")));
      }
    }
    if (c.seeds.empty()) throw Error("classifier.seeds must list at least one seed");
    if (auto cp = cfg.get("analysis.checkpoints")) c.checkpoints = parse_checkpoints(*cp);

    if (!cfg.with_prefix("synthetic.").empty()) c.synthetic = generator_config(cfg);
    return c;
  }

  static PipelineConfig load(const fs::path& path, const std::map<std::string, std::string>& overrides = {}) {
    auto cfg = KeyValueConfig::load(path.string());
    for (const auto& [key, value] : overrides) cfg.set(key, value);
    return from(cfg, fs::absolute(path).parent_path());
  }

  // Hash of the effective configuration (after command-line overrides).
  std::string config_hash() const { return hex64(fnv1a64(raw.canonical())); }

  fs::path synthetic_dir() const { return out_dir / "synthetic"; }

  fs::path annotations_path() const { return annotations.empty() ? synthetic_dir() / "annotations.csv" : annotations; }

  fs::path embeddings_path() const {
    if (!embeddings.empty()) return embeddings;
    if (annotations.empty() && synthetic && synthetic->embedding_dim > 0) return synthetic_dir() / "embeddings.tsv";
    return {};
  }

  fs::path ground_truth_path() const {
    if (!ground_truth.empty()) return ground_truth;
    if (annotations.empty()) return synthetic_dir() / "ground_truth.json";
    return {};
  }

  AnnotationSchema schema() const {
    if (!schema_path.empty()) return AnnotationSchema::load(schema_path.string());
    const auto inline_keys = raw.with_prefix("schema.");
    if (!inline_keys.empty()) {
      KeyValueConfig s;
      for (const auto& [key, value] : inline_keys) s.set(key, value);
      return AnnotationSchema::from_config(s);
    }
    if (annotations.empty()) {
      const auto p = synthetic_dir() / "schema.cfg";
      if (!fs::exists(p)) throw Error("missing " + p.string() + "; run `hatesub generate` first");
      return AnnotationSchema::load(p.string());
    }
    throw Error("no annotation schema: set data.schema or add a [schema] section");
  }

private:
  static long long non_negative(const KeyValueConfig& cfg, const std::string& key, long long fallback) {
    const auto v = cfg.get_int(key, fallback);
    if (v < 0) throw Error(key + " must be non-negative");
    return v;
  }

  static GeneratorConfig generator_config(const KeyValueConfig& cfg) {
    GeneratorConfig g;
    g.n_users = static_cast<std::size_t>(non_negative(cfg, "synthetic.n_users", 200));
    g.n_posts = static_cast<std::size_t>(non_negative(cfg, "synthetic.n_posts", 150));
    if (cfg.contains("synthetic.attributes")) {
      g.attributes.clear();
      for (const auto& item : cfg.get_list("synthetic.attributes")) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw Error("synthetic.attributes items look like 'name:cardinality'");
        const auto card = text::require_int(item.substr(colon + 1), "attribute cardinality");
        if (card < 1) throw Error("attribute cardinality must be >= 1");
        g.attributes.push_back({std::string(text::trim(item.substr(0, colon))), static_cast<std::size_t>(card)});
      }
    }
    for (const auto& item : cfg.get_list("synthetic.effects")) g.effects.push_back(parse_planted_effect(item));
    g.base_rate = cfg.get_double("synthetic.base_rate", g.base_rate);
    g.label_noise = cfg.get_double("synthetic.label_noise", g.label_noise);
    g.annotation_rate = cfg.get_double("synthetic.annotation_rate", g.annotation_rate);
    g.post_score_sd = cfg.get_double("synthetic.post_score_sd", g.post_score_sd);
    g.embedding_dim = static_cast<std::size_t>(non_negative(cfg, "synthetic.embedding_dim", 8));
    g.embedding_noise = cfg.get_double("synthetic.embedding_noise", g.embedding_noise);
    g.seed = static_cast<std::uint64_t>(cfg.get_int("synthetic.seed", 1));
    g.validate();
    return g;
  }

  static void check_keys(const KeyValueConfig& cfg) {
    static const std::set<std::string> known{
        "output.dir",
        "data.annotations", "data.schema", "data.embeddings", "data.splits", "data.ground_truth",
        "data.train_ratio", "data.val_ratio", "data.test_ratio", "data.split_seed", "data.dedup",
        "lattice.max_order", "matrix.tf", "matrix.idf",
        "factorization.d", "factorization.learning_rate", "factorization.lambda", "factorization.epochs",
        "factorization.seed", "factorization.init_scale", "factorization.early_stop_tol",
        "factorization.regularization",
        "classifier.hidden", "classifier.pooling", "classifier.masks", "classifier.seeds", "classifier.epochs",
        "classifier.batch_size", "classifier.patience", "classifier.learning_rate", "classifier.learn_alpha",
        "classifier.alpha_init", "classifier.averaging", "classifier.zero_masked_blocks",
        "analysis.checkpoints",
        "synthetic.n_users", "synthetic.n_posts", "synthetic.attributes", "synthetic.effects",
        "synthetic.base_rate", "synthetic.label_noise", "synthetic.annotation_rate", "synthetic.post_score_sd",
        "synthetic.embedding_dim", "synthetic.embedding_noise", "synthetic.seed"};
    for (const auto& [key, value] : cfg.entries()) {
      (void)value;
      if (key.rfind("schema.", 0) == 0) continue;
      if (!known.count(key)) throw Error("unknown config key '" + key + "'");
    }
  }
};

// ---------------------------------------------------------------------------
// Serialization of heads and metrics

inline json metrics_json(const Metrics& m, std::optional<std::uint64_t> seed = std::nullopt) {
  json j{{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
         {"tp", m.tp},             {"fp", m.fp},               {"tn", m.tn},         {"fn", m.fn}};
  if (seed) j["seed"] = *seed;
  return j;
}

struct MetricSummary {
  std::map<std::string, double> mean;
  std::map<std::string, std::optional<double>> stddev;  // sample standard deviation, absent for one run
};

inline MetricSummary summarize(const std::vector<Metrics>& runs) {
  MetricSummary s;
  const std::map<std::string, double Metrics::*> fields{
      {"accuracy", &Metrics::accuracy}, {"precision", &Metrics::precision}, {"recall", &Metrics::recall},
      {"f1", &Metrics::f1}};
  const double n = static_cast<double>(runs.size());
  for (const auto& [name, field] : fields) {
    double total = 0.0;
    for (const auto& r : runs) total += r.*field;
    const double mean = runs.empty() ? 0.0 : total / n;
    s.mean[name] = mean;
    if (runs.size() < 2) {
      s.stddev[name] = std::nullopt;
      continue;
    }
    double ss = 0.0;
    for (const auto& r : runs) ss += (r.*field - mean) * (r.*field - mean);
    s.stddev[name] = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

inline json summary_json(const MetricSummary& s) {
  json mean = json::object();
  json sd = json::object();
  for (const auto& [k, v] : s.mean) mean[k] = v;
  for (const auto& [k, v] : s.stddev) sd[k] = v ? json(*v) : json(nullptr);
  return {{"mean", mean}, {"std", sd}};
}

inline json head_json(const ClassifierHead& h) {
  return {{"hp_dim", h.hp_dim}, {"q_dim", h.q_dim},   {"s_dim", h.s_dim},
          {"hidden", h.hidden}, {"mask", h.mask.name()}, {"layout", h.layout.name()},
          {"pooling", std::string(to_string(h.pooling))},  {"theta", h.theta},
          {"alpha", h.weights.alpha}};
}

inline ClassifierHead parse_head(const json& j) {
  ClassifierHead h;
  h.hp_dim = j.at("hp_dim").get<std::size_t>();
  h.q_dim = j.at("q_dim").get<std::size_t>();
  h.s_dim = j.at("s_dim").get<std::size_t>();
  h.hidden = j.at("hidden").get<std::size_t>();
  h.mask = FeatureMask::parse(j.at("mask").get<std::string>());
  h.layout = FeatureMask::parse(j.at("layout").get<std::string>());
  h.pooling = parse_pooling(j.at("pooling").get<std::string>());
  h.theta = j.at("theta").get<std::vector<double>>();
  h.weights.alpha = j.at("alpha").get<std::vector<double>>();
  if (h.theta.size() != h.parameter_count()) throw Error("classifier head has the wrong number of parameters");
  return h;
}

// ---------------------------------------------------------------------------
// Stages

struct BuildSummary {
  std::size_t z = 0;
  std::size_t m = 0;
  std::size_t nnz = 0;
};

class Pipeline {
public:
  explicit Pipeline(PipelineConfig config, std::ostream& log = std::cerr) : c_(std::move(config)), log_(log) {}

  const PipelineConfig& config() const { return c_; }

  // Synthetic population with planted effects, written in the standard input formats.
  void generate() {
    if (!c_.synthetic) throw Error("generate needs a [synthetic] config section");
    const auto data = hatesub::generate(*c_.synthetic);
    const auto dir = c_.synthetic_dir();
    fs::create_directories(dir);
    Outputs out(dir);
    out.write("annotations.csv", format_annotations_csv(data.dataset, c_.synthetic->attribute_names()));
    if (c_.synthetic->embedding_dim > 0) out.write("embeddings.tsv", format_embeddings(data.embeddings));
    out.write("schema.cfg", synthetic_schema_text(*c_.synthetic));
    out.write("ground_truth.json", ground_truth_json(data.truth, *c_.synthetic).dump(2) + "\n");
    write_manifest("generate", {}, out, {{"synthetic", c_.synthetic->seed}});
  }

  BuildSummary build() {
    if (c_.uses_text_embeddings() && c_.embeddings_path().empty()) {
      throw Error("a classifier mask uses the s block but data.embeddings is not set");
    }
    auto ds = load_dataset(true);
    if (!c_.splits.empty()) {
      apply_splits(ds, read_file(c_.splits.string()));
    } else {
      ds = split_posts(std::move(ds), c_.ratios, c_.split_seed);
    }
    const auto universe = make_universe(ds);
    const auto cells = aggregate(ds, universe, true);
    const auto y = build_matrix(cells, universe, ds.posts, WeightingScheme::named(c_.tf, c_.idf));

    fs::create_directories(c_.out_dir);
    Outputs out(c_.out_dir);
    out.write("universe.tsv", format_universe(universe));
    out.write("matrix.tsv", format_matrix(y));
    std::string posts;
    for (std::size_t j = 0; j < y.post_ids.size(); ++j) posts += std::to_string(j) + "\t" + y.post_ids[j] + "\n";
    out.write("posts.tsv", posts);
    out.write("splits.tsv", format_splits(ds));
    out.write("build.json", json{{"z", y.z}, {"m", y.m}, {"nnz", y.nnz()},
                                 {"annotator_level", universe.annotator_level}}.dump(2) + "\n");
    write_manifest("build", input_files(), out, {{"split", c_.split_seed}});
    return {y.z, y.m, y.nnz()};
  }

  FitResult factorize() {
    auto y = parse_matrix(require_artifact("matrix.tsv", "build"));
    const auto fit_result = fit(y, c_.factor);
    Outputs out(c_.out_dir);
    out.write("model.txt", format_model(fit_result.model));
    std::string losses = "epoch\tloss\n0\t" + text::format_double17(fit_result.initial_loss) + "\n";
    for (std::size_t e = 0; e < fit_result.epoch_losses.size(); ++e) {
      losses += std::to_string(e + 1) + "\t" + text::format_double17(fit_result.epoch_losses[e]) + "\n";
    }
    out.write("factorize_losses.tsv", losses);
    write_manifest("factorize", {artifact("matrix.tsv")}, out, {{"factorization", c_.factor.seed}});
    return fit_result;
  }

  void train() {
    const auto owned = load_state();
    const auto& state = *owned;
    const auto tr = make_examples(state.dataset, Split::train);
    const auto va = make_examples(state.dataset, Split::val);
    const auto weights = initial_weights(state.universe, c_.classifier);
    const auto dir = c_.out_dir / "heads";
    fs::create_directories(dir);
    Outputs out(dir);
    for (const auto& v : c_.variants) {
      for (const auto seed : c_.seeds) {
        auto cfg = classifier_config(v, seed);
        const auto result = train_head(state.ctx, tr, va, weights, cfg);
        auto j = head_json(result.head);
        j["seed"] = seed;
        j["epochs_run"] = result.epochs_run;
        j["best_epoch"] = result.best_epoch;
        out.write(head_file(v, seed), j.dump() + "\n");
      }
    }
    write_manifest("train", state_inputs(), out, seed_list());
  }

  // Writes metrics_<variant>.json for every mask variant; returns them by name.
  std::map<std::string, json> eval() {
    const auto owned = load_state();
    const auto& state = *owned;
    const auto test = make_examples(state.dataset, Split::test);
    Outputs out(c_.out_dir);
    std::vector<fs::path> inputs = state_inputs();
    std::map<std::string, json> all;
    for (const auto& v : c_.variants) {
      json runs = json::array();
      std::vector<Metrics> ms;
      for (const auto seed : c_.seeds) {
        const auto rel = fs::path("heads") / head_file(v, seed);
        const auto head = parse_head(json::parse(require_artifact(rel, "train")));
        if (head.mask != v.mask) throw Error(rel.string() + " was trained with a different mask; rerun train");
        inputs.push_back(c_.out_dir / rel);
        ms.push_back(evaluate(head, state.ctx, test, c_.classifier.averaging));
        runs.push_back(metrics_json(ms.back(), seed));
      }
      json j = summary_json(summarize(ms));
      j["variant"] = v.name;
      j["mask"] = v.mask.name();
      j["pooling"] = pooling_name();
      j["averaging"] = c_.classifier.averaging == Averaging::macro ? "macro" : "binary";
      j["runs"] = runs;
      out.write("metrics_" + v.name + ".json", j.dump(2) + "\n");
      all.emplace(v.name, std::move(j));
    }
    write_manifest("eval", inputs, out, seed_list());
    return all;
  }

  PerformanceCurve analyze() {
    const auto owned = load_state();
    const auto& state = *owned;
    const auto global = global_leverage(state.universe, state.model);
    Outputs out(c_.out_dir);

    std::string lev = "rank\tindex\ttotal_leverage\tcombination\n";
    for (std::size_t r = 0; r < global.ordering.size(); ++r) {
      const auto l = global.ordering[r];
      lev += std::to_string(r) + "\t" + std::to_string(l) + "\t" + text::format_double17(global.totals[l]) + "\t" +
             state.universe.combinations[l].canonical() + "\n";
    }
    out.write("leverage.tsv", lev);

    auto checkpoints = c_.checkpoints;
    if (checkpoints.empty()) {
      for (std::size_t t = 1; t < state.universe.z(); t *= 2) checkpoints.push_back(t);
      checkpoints.push_back(state.universe.z());
    }
    const auto full = MaskVariant{"full", FeatureMask{true, true, has_embeddings()}};
    PerformanceCurve averaged;
    std::vector<std::vector<Metrics>> per_point;
    for (const auto seed : c_.seeds) {
      const auto curve = accumulate_performance(state.dataset, state.model, state.universe, classifier_config(full, seed),
                                                global, checkpoints, state.post_ids);
      if (averaged.points.empty()) {
        averaged = curve;
        per_point.resize(curve.points.size());
        for (const auto& w : curve.warnings) log_ << "warning: " << w << "\n";
      }
      for (std::size_t i = 0; i < curve.points.size(); ++i) per_point[i].push_back(curve.points[i].metrics);
    }
    for (std::size_t i = 0; i < averaged.points.size(); ++i) {
      const auto s = summarize(per_point[i]);
      auto& m = averaged.points[i].metrics;
      m = Metrics{s.mean.at("accuracy"), s.mean.at("precision"), s.mean.at("recall"), s.mean.at("f1"), 0, 0, 0, 0};
    }
    out.write("analysis.csv", format_performance_csv(averaged));

    const auto gt_path = c_.ground_truth_path();
    std::vector<fs::path> inputs = state_inputs();
    if (!gt_path.empty() && fs::exists(gt_path)) {
      inputs.push_back(gt_path);
      const auto truth = parse_ground_truth(json::parse(read_file(gt_path.string())));
      const auto acc_full = mean_accuracy(state, full);
      const auto acc_no_hp = mean_accuracy(state, MaskVariant{"no-hp", FeatureMask{false, true, has_embeddings()}});
      const auto report = recoverability_report(state.universe, truth, global, acc_full, acc_no_hp);
      out.write("recoverability.json", recoverability_json(report).dump(2) + "\n");
    }
    write_manifest("analyze", inputs, out, seed_list());
    return averaged;
  }

  // Frozen state shared by train, eval and analyze.
  struct State {
    State() = default;
    State(const State&) = delete;
    State& operator=(const State&) = delete;

    Dataset dataset;
    CombinationUniverse universe;
    FactorModel model;
    std::vector<std::string> post_ids;
    FeatureContext ctx;
  };

  // Heap-allocated because the feature context points into the other members.
  std::unique_ptr<State> load_state() {
    auto owned = std::make_unique<State>();
    auto& s = *owned;
    s.universe = parse_universe(require_artifact("universe.tsv", "build"), c_.max_order);
    if (s.universe.annotator_level != c_.annotator_level) {
      throw Error(std::string("artifacts in ") + c_.out_dir.string() + " were built for the " +
                  (s.universe.annotator_level ? "annotator-level" : "combination") +
                  " universe; rerun build with the same --pooling");
    }
    s.model = parse_model(require_artifact("model.txt", "factorize"));
    for (const auto& line : text::split(require_artifact("posts.tsv", "build"), '\n')) {
      if (text::trim(line).empty()) continue;
      const auto f = text::split(line, '\t');
      if (f.size() != 2) throw Error("posts.tsv: malformed line '" + line + "'");
      s.post_ids.push_back(f[1]);
    }
    const bool need_s = c_.uses_text_embeddings();
    s.dataset = load_dataset(need_s);
    apply_splits(s.dataset, require_artifact("splits.tsv", "build"));
    attach_users(s.universe, s.dataset.users);
    if (s.model.z() != s.universe.z()) throw Error("model.txt does not match universe.tsv; rerun factorize");
    s.ctx = FeatureContext::make(s.dataset, s.model, s.universe, s.post_ids);
    return owned;
  }

private:
  class Outputs {
  public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
    void write(const std::string& name, const std::string& content) {
      write_file((dir_ / name).string(), content);
      checksums_[name] = hex64(fnv1a64(content));
    }
    const fs::path& dir() const { return dir_; }
    const std::map<std::string, std::string>& checksums() const { return checksums_; }

  private:
    fs::path dir_;
    std::map<std::string, std::string> checksums_;
  };

  Dataset load_dataset(bool with_embeddings) const {
    const auto path = c_.annotations_path();
    if (!fs::exists(path)) {
      throw Error("annotations file " + path.string() + " not found" +
                  (c_.annotations.empty() ? "; run `hatesub generate` first" : ""));
    }
    auto ds = load_annotations(path.string(), c_.schema(), c_.dedup);
    const auto emb = c_.embeddings_path();
    if (!emb.empty() && (with_embeddings || fs::exists(emb))) {
      if (!fs::exists(emb)) throw Error("embeddings file " + emb.string() + " not found");
      attach_embeddings(ds, load_embeddings(emb.string()));
    }
    return ds;
  }

  CombinationUniverse make_universe(const Dataset& ds) const {
    return c_.annotator_level ? build_annotator_universe(ds.users) : build_universe(ds.users, c_.max_order);
  }

  std::vector<fs::path> input_files() const {
    std::vector<fs::path> in{c_.annotations_path()};
    if (!c_.schema_path.empty()) in.push_back(c_.schema_path);
    if (!c_.embeddings_path().empty()) in.push_back(c_.embeddings_path());
    if (!c_.splits.empty()) in.push_back(c_.splits);
    return in;
  }

  std::vector<fs::path> state_inputs() const {
    auto in = input_files();
    for (const char* a : {"universe.tsv", "posts.tsv", "splits.tsv", "model.txt"}) in.push_back(artifact(a));
    return in;
  }

  fs::path artifact(const fs::path& rel) const { return c_.out_dir / rel; }

  std::string require_artifact(const fs::path& rel, const std::string& producer) const {
    const auto p = artifact(rel);
    if (!fs::exists(p)) {
      throw Error("missing artifact " + p.string() + "; run `hatesub " + producer + "` first");
    }
    return read_file(p.string());
  }

  static std::string head_file(const MaskVariant& v, std::uint64_t seed) {
    return "head_" + v.name + "_seed" + std::to_string(seed) + ".json";
  }

  bool has_embeddings() const { return !c_.embeddings_path().empty(); }

  std::string pooling_name() const { return c_.annotator_level ? "anno" : std::string(to_string(c_.classifier.pooling)); }

  ClassifierConfig classifier_config(const MaskVariant& v, std::uint64_t seed) const {
    auto cfg = c_.classifier;
    cfg.mask = v.mask;
    cfg.seed = seed;
    return cfg;
  }

  double mean_accuracy(const State& state, const MaskVariant& v) const {
    const auto tr = make_examples(state.dataset, Split::train);
    const auto va = make_examples(state.dataset, Split::val);
    const auto te = make_examples(state.dataset, Split::test);
    const auto weights = initial_weights(state.universe, c_.classifier);
    double total = 0.0;
    for (const auto seed : c_.seeds) {
      const auto r = train_head(state.ctx, tr, va, weights, classifier_config(v, seed));
      total += evaluate(r.head, state.ctx, te, c_.classifier.averaging).accuracy;
    }
    return total / static_cast<double>(c_.seeds.size());
  }

  std::map<std::string, json> seed_list() const {
    return {{"classifier", c_.seeds}, {"factorization", c_.factor.seed}, {"split", c_.split_seed}};
  }

  void write_manifest(const std::string& stage, const std::vector<fs::path>& inputs, const Outputs& out,
                      const std::map<std::string, json>& seeds) const {
    json in = json::object();
    for (const auto& p : inputs) {
      if (fs::exists(p)) in[p.lexically_relative(c_.out_dir).generic_string()] = hex64(fnv1a64(read_file(p.string())));
    }
    json outs = json::object();
    const auto prefix = out.dir().lexically_relative(c_.out_dir);
    for (const auto& [name, sum] : out.checksums()) outs[(prefix / name).lexically_normal().generic_string()] = sum;
    json seeds_j = json::object();
    for (const auto& [k, v] : seeds) seeds_j[k] = v;
    const json manifest{{"stage", stage},   {"config_hash", c_.config_hash()}, {"seeds", seeds_j},
                        {"inputs", in},     {"outputs", outs}};
    fs::create_directories(c_.out_dir);
    write_file((c_.out_dir / ("manifest_" + stage + ".json")).string(), manifest.dump(2) + "\n");
  }

  PipelineConfig c_;
  std::ostream& log_;
};

}  // namespace hatesub
