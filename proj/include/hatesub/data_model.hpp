#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/kv_config.hpp"
#include "hatesub/rng.hpp"

namespace hatesub {

// One categorical cultural attribute of an annotator, e.g. country=US.
struct AttributeValue {
  std::string attribute;
  std::string value;

  static AttributeValue make(std::string_view attribute, std::string_view value) {
    AttributeValue av{std::string(text::trim(attribute)), std::string(text::trim(value))};
    if (av.attribute.empty() || av.value.empty()) {
      throw Error("attribute name and value must be non-empty");
    }
    return av;
  }

  std::string str() const { return attribute + "=" + value; }

  auto operator<=>(const AttributeValue&) const = default;
  bool operator==(const AttributeValue&) const = default;
};

struct UserProfile {
  std::string user_id;
  // Sorted by attribute name, at most one value per attribute.
  std::vector<AttributeValue> attributes;

  UserProfile() = default;
  UserProfile(std::string id, std::vector<AttributeValue> attrs) : user_id(std::move(id)) {
    for (auto& a : attrs) set(std::move(a));
  }

  const AttributeValue* find(std::string_view attribute) const {
    auto it = std::lower_bound(attributes.begin(), attributes.end(), attribute,
                               [](const AttributeValue& a, std::string_view n) { return a.attribute < n; });
    return (it != attributes.end() && it->attribute == attribute) ? &*it : nullptr;
  }

  // Throws if the attribute already holds a different value.
  void set(AttributeValue av) {
    auto it = std::lower_bound(attributes.begin(), attributes.end(), av.attribute,
                               [](const AttributeValue& a, const std::string& n) { return a.attribute < n; });
    if (it != attributes.end() && it->attribute == av.attribute) {
      if (it->value != av.value) {
        throw Error("user '" + user_id + "' has conflicting values for '" + av.attribute + "': '" + it->value +
                    "' vs '" + av.value + "'");
      }
      return;
    }
    attributes.insert(it, std::move(av));
  }

  bool operator==(const UserProfile&) const = default;
};

struct AnnotationRecord {
  std::string user_id;
  std::string post_id;
  int label = 0;  // 1 = hateful

  bool operator==(const AnnotationRecord&) const = default;
};

struct Post {
  std::string post_id;
  std::string text;
  std::optional<std::vector<double>> text_embedding;

  bool operator==(const Post&) const = default;
};

enum class Split : std::uint8_t { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  const auto t = text::trim(s);
  if (t == "train") return Split::train;
  if (t == "val") return Split::val;
  if (t == "test") return Split::test;
  throw Error("unknown split '" + std::string(t) + "' (expected train, val or test)");
}

struct Dataset {
  std::vector<UserProfile> users;
  std::vector<Post> posts;
  std::vector<AnnotationRecord> annotations;
  std::map<std::string, Split> splits;
  std::size_t embedding_dim = 0;

  std::optional<Split> split_of(const std::string& post_id) const {
    auto it = splits.find(post_id);
    if (it == splits.end()) return std::nullopt;
    return it->second;
  }

  std::unordered_map<std::string, std::size_t> user_index() const {
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < users.size(); ++i) idx.emplace(users[i].user_id, i);
    return idx;
  }

  std::unordered_map<std::string, std::size_t> post_index() const {
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t j = 0; j < posts.size(); ++j) idx.emplace(posts[j].post_id, j);
    return idx;
  }

  std::vector<AnnotationRecord> annotations_in(Split s) const {
    std::vector<AnnotationRecord> out;
    for (const auto& a : annotations) {
      if (split_of(a.post_id) == s) out.push_back(a);
    }
    return out;
  }

  // Checks referential integrity and label domain.
  void validate() const {
    const auto ui = user_index();
    const auto pi = post_index();
    if (ui.size() != users.size()) throw Error("duplicate user ids in dataset");
    if (pi.size() != posts.size()) throw Error("duplicate post ids in dataset");
    for (const auto& a : annotations) {
      if (!ui.count(a.user_id)) throw Error("annotation references unknown user '" + a.user_id + "'");
      if (!pi.count(a.post_id)) throw Error("annotation references unknown post '" + a.post_id + "'");
      if (a.label != 0 && a.label != 1) throw Error("label outside {0,1}");
    }
    for (const auto& [pid, s] : splits) {
      (void)s;
      if (!pi.count(pid)) throw Error("split assigned to unknown post '" + pid + "'");
    }
  }

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Annotation file schema

enum class DedupPolicy { error, keep_last };

struct AnnotationSchema {
  std::string user_id_col;
  std::string post_id_col;
  std::string label_col;
  std::string text_col;
  std::vector<std::string> attribute_cols;
  std::vector<std::string> label_true_tokens{"1", "true", "yes", "hate", "hateful"};
  std::vector<std::string> label_false_tokens{"0", "false", "no", "non-hate", "non-hateful", "not_hate", "nonhate"};
  std::vector<std::string> missing_tokens{"", "na", "n/a", "null"};
  // Numeric attribute columns must either be binned or declared categorical.
  std::map<std::string, std::vector<double>> bins;
  std::set<std::string> categorical_cols;
  DedupPolicy dedup = DedupPolicy::error;

  static AnnotationSchema from_config(const KeyValueConfig& cfg) {
    AnnotationSchema s;
    s.user_id_col = cfg.require("user_id_col");
    s.post_id_col = cfg.require("post_id_col");
    s.label_col = cfg.require("label_col");
    s.text_col = cfg.get_or("text_col", "");
    s.attribute_cols = cfg.get_list("attribute_cols");
    if (cfg.contains("label_true_tokens")) s.label_true_tokens = cfg.get_list("label_true_tokens");
    if (cfg.contains("label_false_tokens")) s.label_false_tokens = cfg.get_list("label_false_tokens");
    for (auto& t : s.label_true_tokens) t = text::lower(t);
    for (auto& t : s.label_false_tokens) t = text::lower(t);
    if (cfg.contains("missing_tokens")) {
      s.missing_tokens = {""};
      for (auto& t : cfg.get_list("missing_tokens")) s.missing_tokens.push_back(text::lower(t));
    }
    for (auto& c : cfg.get_list("categorical_cols")) s.categorical_cols.insert(c);
    for (const auto& [col, edges_text] : cfg.with_prefix("bin.")) {
      std::vector<double> edges;
      for (const auto& e : text::split_list(edges_text)) edges.push_back(text::require_double(e, "bin." + col));
      if (edges.empty() || !std::is_sorted(edges.begin(), edges.end()) ||
          std::adjacent_find(edges.begin(), edges.end()) != edges.end()) {
        throw Error("bin." + col + " must list strictly increasing edges");
      }
      s.bins.emplace(col, std::move(edges));
    }
    const auto dedup = cfg.get_or("dedup", "error");
    if (dedup == "error") {
      s.dedup = DedupPolicy::error;
    } else if (dedup == "keep-last" || dedup == "keep_last") {
      s.dedup = DedupPolicy::keep_last;
    } else {
      throw Error("dedup must be 'error' or 'keep-last', got '" + dedup + "'");
    }
    return s;
  }

  static AnnotationSchema load(const std::string& path) { return from_config(KeyValueConfig::load(path)); }

  bool is_missing(std::string_view cell) const {
    const auto t = text::lower(text::trim(cell));
    return std::find(missing_tokens.begin(), missing_tokens.end(), t) != missing_tokens.end();
  }
};

// Maps a numeric value to its bin label: "<e0", "[e_i,e_{i+1})", ">=e_n".
inline std::string bin_label(double x, const std::vector<double>& edges) {
  if (x < edges.front()) return "<" + text::format_double(edges.front());
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    if (x < edges[i + 1]) {
      return "[" + text::format_double(edges[i]) + "," + text::format_double(edges[i + 1]) + ")";
    }
  }
  return ">=" + text::format_double(edges.back());
}

// ---------------------------------------------------------------------------
// Delimited text

struct DelimitedRecord {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

inline char detect_delimiter(std::string_view content) {
  const auto nl = content.find('\n');
  const auto header = content.substr(0, nl);
  return header.find('\t') != std::string_view::npos ? '\t' : ',';
}

// RFC 4180 style: quoted fields may contain the delimiter, doubled quotes and newlines.
inline std::vector<DelimitedRecord> parse_delimited(std::string_view content, char delim) {
  std::vector<DelimitedRecord> records;
  if (content.size() >= 3 && static_cast<unsigned char>(content[0]) == 0xEF &&
      static_cast<unsigned char>(content[1]) == 0xBB && static_cast<unsigned char>(content[2]) == 0xBF) {
    content.remove_prefix(3);
  }
  std::size_t i = 0;
  std::size_t line = 1;
  while (i < content.size()) {
    DelimitedRecord rec;
    rec.line = line;
    std::string field;
    bool in_quotes = false;
    bool done = false;
    while (!done) {
      if (i >= content.size()) {
        if (in_quotes) throw Error("line " + std::to_string(rec.line) + ": unterminated quoted field");
        rec.fields.push_back(std::move(field));
        break;
      }
      const char c = content[i];
      if (in_quotes) {
        if (c == '"') {
          if (i + 1 < content.size() && content[i + 1] == '"') {
            field += '"';
            i += 2;
          } else {
            in_quotes = false;
            ++i;
          }
        } else {
          if (c == '\n') ++line;
          field += c;
          ++i;
        }
        continue;
      }
      if (c == '"' && field.empty()) {
        in_quotes = true;
        ++i;
      } else if (c == delim) {
        rec.fields.push_back(std::move(field));
        field.clear();
        ++i;
      } else if (c == '\n' || c == '\r') {
        rec.fields.push_back(std::move(field));
        if (c == '\r' && i + 1 < content.size() && content[i + 1] == '\n') ++i;
        ++i;
        ++line;
        done = true;
      } else {
        field += c;
        ++i;
      }
    }
    const bool blank = rec.fields.size() == 1 && text::trim(rec.fields[0]).empty();
    if (!blank) records.push_back(std::move(rec));
  }
  return records;
}

inline std::string quote_field(std::string_view s, char delim) {
  if (s.find_first_of(std::string{delim, '"', '\n', '\r'}) == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// ---------------------------------------------------------------------------
// Loading

inline Dataset load_annotations_text(std::string_view content, const AnnotationSchema& schema,
                                     std::optional<DedupPolicy> dedup_override = std::nullopt) {
  const DedupPolicy dedup = dedup_override.value_or(schema.dedup);
  Dataset ds;
  if (text::trim(content).empty()) throw Error("annotation file is empty (missing header row)");
  const char delim = detect_delimiter(content);
  auto records = parse_delimited(content, delim);
  if (records.empty()) throw Error("annotation file has no header row");

  const auto& header = records.front().fields;
  auto column = [&](const std::string& name) -> std::size_t {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (text::trim(header[c]) == name) return c;
    }
    throw Error("column '" + name + "' not found in header");
  };
  const auto user_col = column(schema.user_id_col);
  const auto post_col = column(schema.post_id_col);
  const auto label_col = column(schema.label_col);
  const std::optional<std::size_t> text_col =
      schema.text_col.empty() ? std::nullopt : std::optional<std::size_t>(column(schema.text_col));
  std::vector<std::size_t> attr_cols;
  for (const auto& a : schema.attribute_cols) attr_cols.push_back(column(a));

  // Unbinned numeric attribute columns cannot form lattice nodes.
  for (std::size_t a = 0; a < attr_cols.size(); ++a) {
    const auto& name = schema.attribute_cols[a];
    if (schema.bins.count(name) || schema.categorical_cols.count(name)) continue;
    bool any = false;
    bool all_numeric = true;
    for (std::size_t r = 1; r < records.size() && all_numeric; ++r) {
      const auto& f = records[r].fields;
      if (attr_cols[a] >= f.size() || schema.is_missing(f[attr_cols[a]])) continue;
      any = true;
      all_numeric = text::parse_double(f[attr_cols[a]]).has_value();
    }
    if (any && all_numeric) {
      throw Error("attribute column '" + name + "' is numeric; declare bins with 'bin." + name +
                  " = e1,e2,...' or list it in categorical_cols");
    }
  }

  auto accepted_tokens = [&] {
    std::string s;
    for (const auto& t : schema.label_true_tokens) s += (s.empty() ? "" : ", ") + t;
    for (const auto& t : schema.label_false_tokens) s += ", " + t;
    return s;
  };

  std::unordered_map<std::string, std::size_t> user_pos;
  std::unordered_map<std::string, std::size_t> post_pos;
  std::map<std::pair<std::string, std::string>, std::size_t> seen;

  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const auto row = "row " + std::to_string(rec.line);
    if (rec.fields.size() != header.size()) {
      throw Error(row + ": expected " + std::to_string(header.size()) + " fields, found " +
                  std::to_string(rec.fields.size()));
    }
    const std::string uid(text::trim(rec.fields[user_col]));
    const std::string pid(text::trim(rec.fields[post_col]));
    if (uid.empty()) throw Error(row + ": empty user id");
    if (pid.empty()) throw Error(row + ": empty post id");

    const auto token = text::lower(text::trim(rec.fields[label_col]));
    int label = -1;
    if (std::find(schema.label_true_tokens.begin(), schema.label_true_tokens.end(), token) !=
        schema.label_true_tokens.end()) {
      label = 1;
    } else if (std::find(schema.label_false_tokens.begin(), schema.label_false_tokens.end(), token) !=
               schema.label_false_tokens.end()) {
      label = 0;
    } else {
      throw Error(row + ": unknown label token '" + std::string(text::trim(rec.fields[label_col])) +
                  "'; accepted tokens: " + accepted_tokens());
    }

    auto [uit, new_user] = user_pos.emplace(uid, ds.users.size());
    if (new_user) ds.users.push_back(UserProfile{uid, {}});
    auto& user = ds.users[uit->second];
    for (std::size_t a = 0; a < attr_cols.size(); ++a) {
      const auto& cell = rec.fields[attr_cols[a]];
      if (schema.is_missing(cell)) continue;
      const auto& name = schema.attribute_cols[a];
      std::string value(text::trim(cell));
      if (auto b = schema.bins.find(name); b != schema.bins.end()) {
        auto x = text::parse_double(value);
        if (!x) throw Error(row + ": binned attribute '" + name + "' has non-numeric value '" + value + "'");
        value = bin_label(*x, b->second);
      }
      try {
        user.set(AttributeValue::make(name, value));
      } catch (const Error& e) {
        throw Error(row + ": " + e.what());
      }
    }

    auto [pit, new_post] = post_pos.emplace(pid, ds.posts.size());
    if (new_post) {
      Post p;
      p.post_id = pid;
      if (text_col) p.text = rec.fields[*text_col];
      ds.posts.push_back(std::move(p));
    }

    auto [sit, fresh] = seen.emplace(std::make_pair(uid, pid), ds.annotations.size());
    if (fresh) {
      ds.annotations.push_back({uid, pid, label});
    } else {
      auto& prev = ds.annotations[sit->second];
      if (prev.label != label) {
        if (dedup == DedupPolicy::error) {
          throw Error(row + ": conflicting duplicate annotation for user '" + uid + "' on post '" + pid +
                      "' (set dedup = keep-last to accept the last label)");
        }
        prev.label = label;
      }
    }
  }
  ds.validate();
  return ds;
}

inline Dataset load_annotations(const std::string& path, const AnnotationSchema& schema,
                                std::optional<DedupPolicy> dedup_override = std::nullopt) {
  try {
    return load_annotations_text(read_file(path), schema, dedup_override);
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

struct EmbeddingTable {
  std::size_t dim = 0;
  std::map<std::string, std::vector<double>> vectors;
};

inline EmbeddingTable parse_embeddings(std::string_view content) {
  EmbeddingTable table;
  const auto lines = text::split(content, '\n');
  std::size_t n = 0;
  bool have_header = false;
  for (const auto& raw : lines) {
    ++n;
    const auto line = text::trim(raw);
    if (line.empty()) continue;
    if (!have_header) {
      if (line.substr(0, 4) != "dim=") throw Error("line 1: expected header 'dim=<e>'");
      const auto d = text::parse_int(line.substr(4));
      if (!d || *d < 1) throw Error("line 1: invalid embedding dimension '" + std::string(line.substr(4)) + "'");
      table.dim = static_cast<std::size_t>(*d);
      have_header = true;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw Error("line " + std::to_string(n) + ": expected 'post_id<TAB>values'");
    }
    const std::string pid(text::trim(line.substr(0, tab)));
    if (pid.empty()) throw Error("line " + std::to_string(n) + ": empty post id");
    std::vector<double> v;
    for (const auto& tok : text::split_ws(line.substr(tab + 1))) {
      auto x = text::parse_double(tok);
      if (!x) throw Error("line " + std::to_string(n) + ": post '" + pid + "' has non-numeric component '" + tok + "'");
      v.push_back(*x);
    }
    if (v.size() != table.dim) {
      throw Error("dimension mismatch for post '" + pid + "': expected " + std::to_string(table.dim) + ", got " +
                  std::to_string(v.size()));
    }
    if (!table.vectors.emplace(pid, std::move(v)).second) throw Error("duplicate post id '" + pid + "'");
  }
  if (!have_header) throw Error("missing header 'dim=<e>'");
  return table;
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  try {
    return parse_embeddings(read_file(path));
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

inline void attach_embeddings(Dataset& ds, const EmbeddingTable& table) {
  ds.embedding_dim = table.dim;
  for (auto& p : ds.posts) {
    auto it = table.vectors.find(p.post_id);
    if (it != table.vectors.end()) p.text_embedding = it->second;
  }
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

// Split sizes for n posts: train = round(n*r_train), val = round(n*r_val) with
// halves rounded up, test takes the remainder. Any empty split borrows one post
// from the largest split.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& r) {
  auto round_half_up = [](double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); };
  std::array<std::size_t, 3> sizes{};
  sizes[0] = std::min(n, round_half_up(static_cast<double>(n) * r.train));
  sizes[1] = std::min(n - sizes[0], round_half_up(static_cast<double>(n) * r.val));
  sizes[2] = n - sizes[0] - sizes[1];
  for (auto& s : sizes) {
    if (s == 0) {
      auto largest = std::max_element(sizes.begin(), sizes.end());
      --*largest;
      s = 1;
    }
  }
  return sizes;
}

inline Dataset split_posts(Dataset dataset, const SplitRatios& ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0)) throw Error("split ratios must be positive");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) throw Error("split ratios must sum to 1");
  if (dataset.posts.size() < 3) throw Error("need at least 3 posts to split, have " + std::to_string(dataset.posts.size()));

  std::vector<std::string> ids;
  ids.reserve(dataset.posts.size());
  for (const auto& p : dataset.posts) ids.push_back(p.post_id);
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(ids);

  const auto sizes = split_sizes(ids.size(), ratios);
  dataset.splits.clear();
  std::size_t i = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t c = 0; c < sizes[s]; ++c) dataset.splits[ids[i++]] = static_cast<Split>(s);
  }
  return dataset;
}

inline std::string format_splits(const Dataset& ds) {
  std::string out;
  for (const auto& p : ds.posts) {
    auto s = ds.split_of(p.post_id);
    if (s) out += p.post_id + "\t" + std::string(to_string(*s)) + "\n";
  }
  return out;
}

inline void apply_splits(Dataset& ds, std::string_view content) {
  ds.splits.clear();
  const auto pi = ds.post_index();
  std::size_t n = 0;
  for (const auto& raw : text::split(content, '\n')) {
    ++n;
    const auto line = text::trim(raw);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw Error("splits line " + std::to_string(n) + ": expected 'post_id<TAB>split'");
    const std::string pid(line.substr(0, tab));
    if (!pi.count(pid)) throw Error("splits line " + std::to_string(n) + ": unknown post '" + pid + "'");
    ds.splits[pid] = parse_split(line.substr(tab + 1));
  }
}

// ---------------------------------------------------------------------------
// Writing (used by the synthetic generator)

inline std::string format_annotations_csv(const Dataset& ds, const std::vector<std::string>& attribute_cols) {
  const char d = ',';
  std::string out = "user_id,post_id,label,text";
  for (const auto& a : attribute_cols) out += "," + quote_field(a, d);
  out += "\n";
  const auto ui = ds.user_index();
  const auto pi = ds.post_index();
  for (const auto& a : ds.annotations) {
    const auto& user = ds.users[ui.at(a.user_id)];
    const auto& post = ds.posts[pi.at(a.post_id)];
    out += quote_field(a.user_id, d) + "," + quote_field(a.post_id, d) + "," + std::to_string(a.label) + "," +
           quote_field(post.text, d);
    for (const auto& col : attribute_cols) {
      const auto* av = user.find(col);
      out += ",";
      if (av) out += quote_field(av->value, d);
    }
    out += "\n";
  }
  return out;
}

inline std::string format_embeddings(const EmbeddingTable& table) {
  std::string out = "dim=" + std::to_string(table.dim) + "\n";
  for (const auto& [pid, v] : table.vectors) {
    out += pid + "\t";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ' ';
      out += text::format_double17(v[i]);
    }
    out += "\n";
  }
  return out;
}

}  // namespace hatesub
