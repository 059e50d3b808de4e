#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/data_model.hpp"
#include "hatesub/lattice.hpp"

namespace hatesub {

// Labels pooled for one (combination, post) pair: every contributing user
// holds the combination in their power set and labeled the post.
struct AggregationCell {
  std::size_t combination = 0;  // l
  std::size_t post = 0;         // j
  std::vector<std::string> contributing_users;  // sorted, unique
  std::size_t hate_count = 0;
  std::size_t total_count = 0;
};

// One-way label propagation: each annotation is credited to every combination
// of its annotator. Only training-split annotations are used when train_only
// is set. Cells come back sorted by (combination, post).
inline std::vector<AggregationCell> aggregate(const Dataset& dataset, const CombinationUniverse& universe,
                                              bool train_only = true) {
  const auto post_idx = dataset.post_index();
  const auto user_idx = dataset.user_index();
  std::map<std::pair<std::size_t, std::size_t>, AggregationCell> cells;
  std::vector<std::vector<std::size_t>> combos(dataset.users.size());
  for (std::size_t u = 0; u < dataset.users.size(); ++u) combos[u] = resolve_combinations(dataset.users[u], universe);

  for (const auto& a : dataset.annotations) {
    if (train_only && dataset.split_of(a.post_id) != Split::train) continue;
    const auto j = post_idx.at(a.post_id);
    for (const auto l : combos[user_idx.at(a.user_id)]) {
      auto& cell = cells[{l, j}];
      cell.combination = l;
      cell.post = j;
      cell.contributing_users.push_back(a.user_id);
      cell.hate_count += static_cast<std::size_t>(a.label);
      ++cell.total_count;
    }
  }

  std::vector<AggregationCell> out;
  out.reserve(cells.size());
  for (auto& [key, cell] : cells) {
    std::sort(cell.contributing_users.begin(), cell.contributing_users.end());
    out.push_back(std::move(cell));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighting. Combinations are the documents and posts are the terms.

using TfFunction = std::function<double(const AggregationCell&)>;
using IdfFunction = std::function<double(std::size_t df, std::size_t z)>;

// Hate fraction among the contributing users.
inline double tf(const AggregationCell& cell) {
  if (cell.total_count == 0) throw Error("tf undefined for a cell without labels");
  return static_cast<double>(cell.hate_count) / static_cast<double>(cell.total_count);
}

// Smoothed inverse document frequency: ln((1 + z) / (1 + df)) + 1.
inline double smoothed_idf(std::size_t df, std::size_t z) {
  return std::log((1.0 + static_cast<double>(z)) / (1.0 + static_cast<double>(df))) + 1.0;
}

struct WeightingScheme {
  std::string tf_name = "fraction";
  std::string idf_name = "smooth";
  TfFunction tf = hatesub::tf;
  IdfFunction idf = smoothed_idf;

  static WeightingScheme named(const std::string& tf_name, const std::string& idf_name) {
    WeightingScheme s;
    s.tf_name = tf_name;
    s.idf_name = idf_name;
    if (tf_name == "fraction") {
      s.tf = hatesub::tf;
    } else if (tf_name == "count") {
      s.tf = [](const AggregationCell& c) { return static_cast<double>(c.hate_count); };
    } else if (tf_name == "binary") {
      s.tf = [](const AggregationCell& c) { return c.hate_count > 0 ? 1.0 : 0.0; };
    } else {
      throw Error("unknown tf strategy '" + tf_name + "' (expected fraction, count or binary)");
    }
    if (idf_name == "smooth") {
      s.idf = smoothed_idf;
    } else if (idf_name == "unit") {
      s.idf = [](std::size_t, std::size_t) { return 1.0; };
    } else {
      throw Error("unknown idf strategy '" + idf_name + "' (expected smooth or unit)");
    }
    return s;
  }
};

// Number of combinations whose tf for `post` is positive.
inline std::size_t document_frequency(std::size_t post, const std::vector<AggregationCell>& cells,
                                      const TfFunction& tf_fn = tf) {
  std::size_t df = 0;
  for (const auto& c : cells) {
    if (c.post == post && c.total_count > 0 && tf_fn(c) > 0.0) ++df;
  }
  return df;
}

inline double idf(std::size_t post, const std::vector<AggregationCell>& cells, std::size_t z) {
  if (z == 0) throw Error("idf requires z >= 1");
  return smoothed_idf(document_frequency(post, cells), z);
}

struct MatrixEntry {
  std::size_t row = 0;  // combination l
  std::size_t col = 0;  // post j
  double weight = 0.0;

  bool operator==(const MatrixEntry&) const = default;
};

// Sparse culture-post matrix. Only observed cells are stored; an observed cell
// may carry weight 0 (labeled, never hateful).
struct InteractionMatrix {
  std::size_t z = 0;
  std::size_t m = 0;
  std::vector<MatrixEntry> entries;  // sorted by (row, col)
  std::vector<std::string> post_ids;  // column j -> post id, when known

  std::size_t nnz() const { return entries.size(); }

  const MatrixEntry* find(std::size_t l, std::size_t j) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), std::make_pair(l, j),
                               [](const MatrixEntry& e, const std::pair<std::size_t, std::size_t>& k) {
                                 return std::make_pair(e.row, e.col) < k;
                               });
    if (it == entries.end() || it->row != l || it->col != j) return nullptr;
    return &*it;
  }

  std::unordered_map<std::string, std::size_t> post_index() const {
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t j = 0; j < post_ids.size(); ++j) idx.emplace(post_ids[j], j);
    return idx;
  }

  double mean() const {
    if (entries.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : entries) s += e.weight;
    return s / static_cast<double>(entries.size());
  }
};

inline InteractionMatrix build_matrix(const std::vector<AggregationCell>& cells, const CombinationUniverse& universe,
                                      const std::vector<Post>& posts, const WeightingScheme& scheme = {}) {
  InteractionMatrix y;
  y.z = universe.z();
  y.m = posts.size();
  y.post_ids.reserve(posts.size());
  for (const auto& p : posts) y.post_ids.push_back(p.post_id);

  std::vector<std::size_t> df(y.m, 0);
  for (const auto& c : cells) {
    if (c.post >= y.m || c.combination >= y.z) throw Error("aggregation cell outside matrix bounds");
    if (c.total_count > 0 && scheme.tf(c) > 0.0) ++df[c.post];
  }
  y.entries.reserve(cells.size());
  for (const auto& c : cells) {
    if (c.total_count == 0) continue;
    const double w = scheme.tf(c) * scheme.idf(df[c.post], y.z);
    if (!std::isfinite(w) || w < 0.0) throw Error("non-finite or negative interaction weight");
    y.entries.push_back({c.combination, c.post, w});
  }
  std::sort(y.entries.begin(), y.entries.end(),
            [](const MatrixEntry& a, const MatrixEntry& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); });
  return y;
}

// Triplet text form: header "z=<z> m=<m>", then "l<TAB>j<TAB>weight" lines.
inline std::string format_matrix(const InteractionMatrix& y) {
  std::string out = "z=" + std::to_string(y.z) + " m=" + std::to_string(y.m) + "\n";
  for (const auto& e : y.entries) {
    out += std::to_string(e.row) + "\t" + std::to_string(e.col) + "\t" + text::format_double17(e.weight) + "\n";
  }
  return out;
}

inline InteractionMatrix parse_matrix(std::string_view content) {
  InteractionMatrix y;
  const auto lines = text::split(content, '\n');
  if (lines.empty() || text::trim(lines[0]).empty()) throw Error("matrix file: missing 'z=<z> m=<m>' header");
  const auto head = text::split_ws(lines[0]);
  if (head.size() != 2 || head[0].rfind("z=", 0) != 0 || head[1].rfind("m=", 0) != 0) {
    throw Error("matrix file: malformed header '" + lines[0] + "'");
  }
  y.z = static_cast<std::size_t>(text::require_int(head[0].substr(2), "z"));
  y.m = static_cast<std::size_t>(text::require_int(head[1].substr(2), "m"));
  for (std::size_t n = 1; n < lines.size(); ++n) {
    if (text::trim(lines[n]).empty()) continue;
    const auto f = text::split(text::trim(lines[n]), '\t');
    if (f.size() != 3) throw Error("matrix line " + std::to_string(n + 1) + ": expected 'l<TAB>j<TAB>weight'");
    MatrixEntry e{static_cast<std::size_t>(text::require_int(f[0], "l")),
                  static_cast<std::size_t>(text::require_int(f[1], "j")), text::require_double(f[2], "weight")};
    if (e.row >= y.z || e.col >= y.m) throw Error("matrix line " + std::to_string(n + 1) + ": index out of range");
    if (!y.entries.empty() && std::tie(y.entries.back().row, y.entries.back().col) >= std::tie(e.row, e.col)) {
      throw Error("matrix line " + std::to_string(n + 1) + ": entries must be sorted and unique");
    }
    y.entries.push_back(e);
  }
  return y;
}

}  // namespace hatesub
