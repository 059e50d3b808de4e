#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/data_model.hpp"
#include "hatesub/lattice.hpp"
#include "hatesub/rng.hpp"
#include "hatesub/subspace.hpp"

namespace hatesub {

// Log-odds shift applied to every user whose attributes contain `combination`.
struct PlantedEffect {
  std::vector<AttributeValue> combination;  // sorted
  double effect = 0.0;

  std::string canonical() const { return Combination{combination}.canonical(); }
};

// "a=x;b=y:3.0" (members separated by ';', effect after the last ':').
inline PlantedEffect parse_planted_effect(std::string_view spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string_view::npos) throw Error("planted effect '" + std::string(spec) + "' lacks ':<effect>'");
  PlantedEffect e;
  for (const auto& item : text::split_list(spec.substr(0, colon), ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error("planted effect member '" + item + "' lacks '='");
    e.combination.push_back(AttributeValue::make(item.substr(0, eq), item.substr(eq + 1)));
  }
  std::sort(e.combination.begin(), e.combination.end());
  e.effect = text::require_double(spec.substr(colon + 1), "planted effect");
  return e;
}

struct SyntheticAttribute {
  std::string name;
  std::size_t cardinality = 2;  // values are "v0", "v1", ...
};

struct GeneratorConfig {
  std::size_t n_users = 200;
  std::size_t n_posts = 150;
  std::vector<SyntheticAttribute> attributes{{"a", 3}, {"b", 3}, {"c", 3}};
  std::vector<PlantedEffect> effects;
  double base_rate = 0.3;
  double label_noise = 0.0;
  double annotation_rate = 1.0;  // probability that a given user labels a given post
  double post_score_sd = 1.0;
  std::size_t embedding_dim = 8;
  double embedding_noise = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (attributes.empty()) throw Error("generator needs at least one attribute");
    for (const auto& a : attributes) {
      if (a.name.empty() || a.cardinality < 1) throw Error("attribute needs a name and cardinality >= 1");
    }
    if (n_users < 1 || n_posts < 1) throw Error("generator needs at least one user and one post");
    if (!(base_rate > 0.0 && base_rate < 1.0)) throw Error("base_rate must lie in (0, 1)");
    if (!(label_noise >= 0.0 && label_noise < 1.0)) throw Error("label_noise must lie in [0, 1)");
    if (!(annotation_rate > 0.0 && annotation_rate <= 1.0)) throw Error("annotation_rate must lie in (0, 1]");
    for (const auto& e : effects) {
      if (e.combination.empty()) throw Error("planted effect needs a non-empty combination");
      if (!std::isfinite(e.effect)) throw Error("planted effect must be finite");
    }
  }

  std::vector<std::string> attribute_names() const {
    std::vector<std::string> out;
    for (const auto& a : attributes) out.push_back(a.name);
    return out;
  }
};

struct GroundTruth {
  double base_logit = 0.0;
  double label_noise = 0.0;
  std::vector<PlantedEffect> effects;
  std::map<std::string, double> post_scores;

  // Hate probability before label noise.
  double clean_probability(const UserProfile& user, const std::string& post_id) const {
    return 1.0 / (1.0 + std::exp(-logit(user, post_id)));
  }

  // Probability of a hateful label after noise flips.
  double label_probability(const UserProfile& user, const std::string& post_id) const {
    const double p = clean_probability(user, post_id);
    return p * (1.0 - label_noise) + (1.0 - p) * label_noise;
  }

  double logit(const UserProfile& user, const std::string& post_id) const {
    double x = base_logit + post_scores.at(post_id);
    for (const auto& e : effects) {
      if (std::includes(user.attributes.begin(), user.attributes.end(), e.combination.begin(), e.combination.end())) {
        x += e.effect;
      }
    }
    return x;
  }
};

struct SyntheticData {
  Dataset dataset;
  EmbeddingTable embeddings;
  GroundTruth truth;
};

// Users draw each attribute value uniformly. Post j gets a latent score
// N(0, post_score_sd^2); its text embedding is score * w + N(0, noise^2) noise for a
// fixed random unit vector w. Every (user, post) pair is annotated with
// probability annotation_rate; the clean label is Bernoulli(logistic(logit(base)
// + score_j + planted effects held by the user)) and is flipped with
// probability label_noise.
inline SyntheticData generate(const GeneratorConfig& config) {
  config.validate();
  SyntheticData out;
  auto& ds = out.dataset;
  auto& truth = out.truth;
  truth.base_logit = std::log(config.base_rate / (1.0 - config.base_rate));
  truth.label_noise = config.label_noise;
  truth.effects = config.effects;

  const auto width = std::to_string(std::max(config.n_users, config.n_posts)).size();
  auto padded = [&](const char* prefix, std::size_t i) {
    auto s = std::to_string(i);
    return prefix + std::string(width - s.size(), '0') + s;
  };

  Rng user_rng(derive_seed(config.seed, 1));
  for (std::size_t u = 0; u < config.n_users; ++u) {
    UserProfile p;
    p.user_id = padded("u", u);
    for (const auto& a : config.attributes) {
      p.set(AttributeValue::make(a.name, "v" + std::to_string(user_rng.below(a.cardinality))));
    }
    ds.users.push_back(std::move(p));
  }

  Rng post_rng(derive_seed(config.seed, 2));
  std::vector<double> direction(config.embedding_dim);
  if (config.embedding_dim > 0) {
    double norm = 0.0;
    for (auto& w : direction) {
      w = post_rng.normal();
      norm += w * w;
    }
    norm = std::sqrt(norm);
    for (auto& w : direction) w /= norm;
  }
  out.embeddings.dim = config.embedding_dim;
  for (std::size_t j = 0; j < config.n_posts; ++j) {
    Post post;
    post.post_id = padded("p", j);
    post.text = "synthetic post " + std::to_string(j);
    const double score = post_rng.normal(0.0, config.post_score_sd);
    truth.post_scores[post.post_id] = score;
    if (config.embedding_dim > 0) {
      std::vector<double> s(config.embedding_dim);
      for (std::size_t k = 0; k < s.size(); ++k) s[k] = score * direction[k] + post_rng.normal(0.0, config.embedding_noise);
      post.text_embedding = s;
      out.embeddings.vectors.emplace(post.post_id, std::move(s));
    }
    ds.posts.push_back(std::move(post));
  }
  ds.embedding_dim = config.embedding_dim;

  Rng label_rng(derive_seed(config.seed, 3));
  for (const auto& user : ds.users) {
    for (const auto& post : ds.posts) {
      if (config.annotation_rate < 1.0 && !label_rng.bernoulli(config.annotation_rate)) continue;
      const double p = truth.clean_probability(user, post.post_id);
      int label = label_rng.bernoulli(p) ? 1 : 0;
      if (config.label_noise > 0.0 && label_rng.bernoulli(config.label_noise)) label = 1 - label;
      ds.annotations.push_back({user.user_id, post.post_id, label});
    }
  }
  ds.validate();
  return out;
}

inline nlohmann::json ground_truth_json(const GroundTruth& truth, const GeneratorConfig& config) {
  nlohmann::json j;
  j["seed"] = config.seed;
  j["base_rate"] = config.base_rate;
  j["base_logit"] = truth.base_logit;
  j["label_noise"] = truth.label_noise;
  j["effects"] = nlohmann::json::array();
  for (const auto& e : truth.effects) j["effects"].push_back({{"combination", e.canonical()}, {"effect", e.effect}});
  j["post_scores"] = truth.post_scores;
  return j;
}

inline GroundTruth parse_ground_truth(const nlohmann::json& j) {
  GroundTruth t;
  t.base_logit = j.at("base_logit").get<double>();
  t.label_noise = j.at("label_noise").get<double>();
  for (const auto& e : j.at("effects")) {
    t.effects.push_back(
        parse_planted_effect(e.at("combination").get<std::string>() + ":" + text::format_double17(e.at("effect").get<double>())));
  }
  t.post_scores = j.at("post_scores").get<std::map<std::string, double>>();
  return t;
}

// Schema text matching format_annotations_csv output for the generated data.
inline std::string synthetic_schema_text(const GeneratorConfig& config) {
  std::string attrs;
  for (const auto& a : config.attributes) {
    if (!attrs.empty()) attrs += ",";
    attrs += a.name;
  }
  return "user_id_col = user_id\npost_id_col = post_id\nlabel_col = label\ntext_col = text\nattribute_cols = " +
         attrs + "\n";
}

struct PlantedRank {
  std::string combination;
  double effect = 0.0;
  std::optional<std::size_t> index;  // absent when the combination never occurs
  std::optional<std::size_t> rank;   // 0-based position in the global ordering
  std::optional<double> rank_fraction;  // rank / z
};

struct RecoverabilityReport {
  std::size_t z = 0;
  std::vector<PlantedRank> planted;
  double accuracy_full = 0.0;
  double accuracy_without_hp = 0.0;

  double accuracy_lift() const { return accuracy_full - accuracy_without_hp; }
};

inline RecoverabilityReport recoverability_report(const CombinationUniverse& universe, const GroundTruth& truth,
                                                  const GlobalLeverage& global, double accuracy_full,
                                                  double accuracy_without_hp) {
  RecoverabilityReport r;
  r.z = universe.z();
  r.accuracy_full = accuracy_full;
  r.accuracy_without_hp = accuracy_without_hp;
  for (const auto& e : truth.effects) {
    PlantedRank pr;
    pr.combination = e.canonical();
    pr.effect = e.effect;
    if (auto l = universe.find(e.combination)) {
      pr.index = *l;
      pr.rank = global.rank.at(*l);
      pr.rank_fraction = r.z ? static_cast<double>(*pr.rank) / static_cast<double>(r.z) : 0.0;
    }
    r.planted.push_back(std::move(pr));
  }
  return r;
}

inline nlohmann::json recoverability_json(const RecoverabilityReport& r) {
  nlohmann::json j;
  j["z"] = r.z;
  j["accuracy_full"] = r.accuracy_full;
  j["accuracy_without_hp"] = r.accuracy_without_hp;
  j["accuracy_lift"] = r.accuracy_lift();
  j["planted"] = nlohmann::json::array();
  for (const auto& p : r.planted) {
    nlohmann::json e{{"combination", p.combination}, {"effect", p.effect}};
    e["index"] = p.index ? nlohmann::json(*p.index) : nlohmann::json(nullptr);
    e["rank"] = p.rank ? nlohmann::json(*p.rank) : nlohmann::json(nullptr);
    e["rank_fraction"] = p.rank_fraction ? nlohmann::json(*p.rank_fraction) : nlohmann::json(nullptr);
    j["planted"].push_back(std::move(e));
  }
  return j;
}

}  // namespace hatesub
