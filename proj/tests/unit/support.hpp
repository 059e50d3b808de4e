#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hatesub/data_model.hpp"
#include "hatesub/interaction_matrix.hpp"
#include "hatesub/rng.hpp"

namespace testsupport {

inline std::string fixture(const std::string& name) { return std::string(HATESUB_FIXTURE_DIR) + "/" + name; }

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("hatesub_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline hatesub::UserProfile profile(const std::string& id, const std::vector<std::pair<std::string, std::string>>& kv) {
  hatesub::UserProfile u;
  u.user_id = id;
  for (const auto& [a, v] : kv) u.set(hatesub::AttributeValue::make(a, v));
  return u;
}

// Users with `k` attributes drawn from `cardinality` values each (some
// attributes dropped with probability `drop`), posts labeled at random.
inline hatesub::Dataset random_dataset(hatesub::Rng& rng, std::size_t n_users, std::size_t n_posts, std::size_t k,
                                       std::size_t cardinality, double annotate = 0.7, double drop = 0.0) {
  hatesub::Dataset ds;
  for (std::size_t u = 0; u < n_users; ++u) {
    hatesub::UserProfile p;
    p.user_id = "u" + std::to_string(u);
    for (std::size_t a = 0; a < k; ++a) {
      if (drop > 0.0 && rng.bernoulli(drop)) continue;
      p.set(hatesub::AttributeValue::make("attr" + std::to_string(a), "v" + std::to_string(rng.below(cardinality))));
    }
    ds.users.push_back(p);
  }
  for (std::size_t j = 0; j < n_posts; ++j) ds.posts.push_back({"p" + std::to_string(j), "", std::nullopt});
  for (const auto& u : ds.users) {
    for (const auto& p : ds.posts) {
      if (rng.bernoulli(annotate)) ds.annotations.push_back({u.user_id, p.post_id, rng.bernoulli(0.4) ? 1 : 0});
    }
  }
  for (const auto& p : ds.posts) ds.splits[p.post_id] = hatesub::Split::train;
  return ds;
}

// Sparse matrix from a dense generator, observing each cell with probability `observe`.
template <class F>
hatesub::InteractionMatrix planted_matrix(std::size_t z, std::size_t m, double observe, hatesub::Rng& rng, F value) {
  hatesub::InteractionMatrix y;
  y.z = z;
  y.m = m;
  for (std::size_t l = 0; l < z; ++l) {
    for (std::size_t j = 0; j < m; ++j) {
      if (rng.bernoulli(observe)) y.entries.push_back({l, j, value(l, j)});
    }
  }
  return y;
}

}  // namespace testsupport
