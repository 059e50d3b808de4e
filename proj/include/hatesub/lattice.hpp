#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hatesub/common.hpp"
#include "hatesub/data_model.hpp"

namespace hatesub {

inline constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();
inline constexpr std::size_t kUnlimitedOrder = 0;

// Attribute name used to tag per-annotator nodes in the annotator-level universe.
inline constexpr std::string_view kAnnotatorAttribute = "@annotator";

// Non-empty set of attribute values, one value per attribute, kept sorted.
struct Combination {
  std::vector<AttributeValue> members;
  std::size_t index = kUnassigned;

  std::size_t order() const { return members.size(); }

  std::string canonical() const {
    std::string out;
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (i) out += ';';
      out += members[i].str();
    }
    return out;
  }

  bool contains(const Combination& other) const {
    return std::includes(members.begin(), members.end(), other.members.begin(), other.members.end());
  }

  bool operator==(const Combination& o) const { return members == o.members; }
};

// Every non-empty subset of the profile's attribute set, up to `max_order`
// members (0 = no cap). Ordered by size, then lexicographically.
inline std::vector<Combination> power_set(const UserProfile& profile, std::size_t max_order = kUnlimitedOrder) {
  const auto& attrs = profile.attributes;
  const std::size_t k = attrs.size();
  if (k > 30) throw Error("profile '" + profile.user_id + "' has too many attributes for subset enumeration");
  const std::size_t top = (max_order == kUnlimitedOrder) ? k : std::min(k, max_order);

  std::vector<Combination> out;
  for (std::size_t size = 1; size <= top; ++size) {
    // Walk index tuples i0 < i1 < ... < i_{size-1} in lexicographic order.
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    while (true) {
      Combination c;
      c.members.reserve(size);
      for (auto i : idx) c.members.push_back(attrs[i]);
      out.push_back(std::move(c));

      std::size_t pos = size;
      while (pos > 0 && idx[pos - 1] == k - size + pos - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (std::size_t i = pos; i < size; ++i) idx[i] = idx[i - 1] + 1;
    }
  }
  return out;
}

struct CombinationUniverse {
  std::vector<Combination> combinations;
  std::map<std::string, std::vector<std::size_t>> by_user;
  std::size_t max_order = kUnlimitedOrder;
  bool annotator_level = false;

  std::size_t z() const { return combinations.size(); }

  std::optional<std::size_t> find(const std::vector<AttributeValue>& members) const {
    auto it = lookup_.find(members);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  const std::vector<std::size_t>* user_combinations(const std::string& user_id) const {
    auto it = by_user.find(user_id);
    return it == by_user.end() ? nullptr : &it->second;
  }

  // Takes the deduplicated member sets and assigns indices in lexicographic order.
  void assign(std::set<std::vector<AttributeValue>> member_sets) {
    combinations.clear();
    lookup_.clear();
    combinations.reserve(member_sets.size());
    for (auto& m : member_sets) {
      const auto idx = combinations.size();
      lookup_.emplace(m, idx);
      combinations.push_back(Combination{m, idx});
    }
  }

private:
  std::map<std::vector<AttributeValue>, std::size_t> lookup_;
};

inline std::vector<AttributeValue> annotator_members(const UserProfile& u) {
  auto members = u.attributes;
  members.push_back(AttributeValue{std::string(kAnnotatorAttribute), u.user_id});
  std::sort(members.begin(), members.end());
  return members;
}

// Fills by_user for the given users: their power-set nodes present in the
// universe, or their own tagged node for annotator-level universes.
inline void attach_users(CombinationUniverse& universe, const std::vector<UserProfile>& users) {
  universe.by_user.clear();
  for (const auto& u : users) {
    std::vector<std::size_t> idx;
    if (universe.annotator_level) {
      if (auto l = universe.find(annotator_members(u))) idx.push_back(*l);
    } else {
      for (const auto& c : power_set(u, universe.max_order)) {
        if (auto l = universe.find(c.members)) idx.push_back(*l);
      }
      std::sort(idx.begin(), idx.end());
    }
    universe.by_user[u.user_id] = std::move(idx);
  }
}

inline CombinationUniverse build_universe(const std::vector<UserProfile>& users,
                                          std::size_t max_order = kUnlimitedOrder) {
  std::set<std::vector<AttributeValue>> member_sets;
  for (const auto& u : users) {
    for (auto& c : power_set(u, max_order)) member_sets.insert(std::move(c.members));
  }
  CombinationUniverse universe;
  universe.max_order = max_order;
  universe.assign(std::move(member_sets));
  attach_users(universe, users);
  return universe;
}

// Each annotator becomes a single node: their full attribute set tagged with
// their identity. Used for the annotator-level ablation.
inline CombinationUniverse build_annotator_universe(const std::vector<UserProfile>& users) {
  std::set<std::vector<AttributeValue>> member_sets;
  for (const auto& u : users) member_sets.insert(annotator_members(u));
  CombinationUniverse universe;
  universe.annotator_level = true;
  universe.assign(std::move(member_sets));
  attach_users(universe, users);
  return universe;
}

// Indices of the profile's combinations that exist in the universe, ascending.
inline std::vector<std::size_t> observed_overlap(const UserProfile& profile, const CombinationUniverse& universe) {
  std::vector<std::size_t> out;
  if (universe.annotator_level) {
    if (auto l = universe.find(annotator_members(profile))) out.push_back(*l);
    return out;
  }
  for (const auto& c : power_set(profile, universe.max_order)) {
    if (auto l = universe.find(c.members)) out.push_back(*l);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// The user's combinations: the stored list for building-population users,
// otherwise the overlap with the universe.
inline std::vector<std::size_t> resolve_combinations(const UserProfile& profile, const CombinationUniverse& universe) {
  if (const auto* known = universe.user_combinations(profile.user_id)) return *known;
  return observed_overlap(profile, universe);
}

// ---------------------------------------------------------------------------
// Manifest: "index<TAB>attr=val;attr=val" per line. '%', ';', '=', TAB, CR and
// LF inside names or values are percent-escaped.

namespace detail {

inline std::string escape_manifest(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '%' || c == ';' || c == '=' || c == '\t' || c == '\n' || c == '\r') {
      char buf[4];
      std::snprintf(buf, sizeof(buf), "%%%02X", static_cast<unsigned char>(c));
      out += buf;
    } else {
      out += c;
    }
  }
  return out;
}

inline std::string unescape_manifest(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size()) {
      out += static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16));
      i += 2;
    } else if (s[i] == '%') {
      throw Error("truncated escape in manifest");
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace detail

inline std::string format_universe(const CombinationUniverse& universe) {
  std::string out;
  for (const auto& c : universe.combinations) {
    out += std::to_string(c.index) + "\t";
    for (std::size_t i = 0; i < c.members.size(); ++i) {
      if (i) out += ';';
      out += detail::escape_manifest(c.members[i].attribute) + "=" + detail::escape_manifest(c.members[i].value);
    }
    out += "\n";
  }
  return out;
}

inline CombinationUniverse parse_universe(std::string_view content, std::size_t max_order = kUnlimitedOrder) {
  std::set<std::vector<AttributeValue>> member_sets;
  std::size_t expected = 0;
  std::size_t n = 0;
  bool annotator = false;
  for (const auto& raw : text::split(content, '\n')) {
    ++n;
    if (text::trim(raw).empty()) continue;
    const auto tab = raw.find('\t');
    if (tab == std::string::npos) throw Error("universe line " + std::to_string(n) + ": expected 'index<TAB>members'");
    const auto idx = text::parse_int(raw.substr(0, tab));
    if (!idx || static_cast<std::size_t>(*idx) != expected) {
      throw Error("universe line " + std::to_string(n) + ": indices must be 0..z-1 in order");
    }
    ++expected;
    std::vector<AttributeValue> members;
    for (const auto& item : text::split(std::string_view(raw).substr(tab + 1), ';')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw Error("universe line " + std::to_string(n) + ": member without '='");
      members.push_back(AttributeValue::make(detail::unescape_manifest(item.substr(0, eq)),
                                             detail::unescape_manifest(item.substr(eq + 1))));
      if (members.back().attribute == kAnnotatorAttribute) annotator = true;
    }
    if (!std::is_sorted(members.begin(), members.end())) {
      throw Error("universe line " + std::to_string(n) + ": members not in canonical order");
    }
    member_sets.insert(std::move(members));
  }
  if (member_sets.size() != expected) throw Error("universe manifest has duplicate combinations");
  CombinationUniverse universe;
  universe.max_order = max_order;
  universe.annotator_level = annotator;
  universe.assign(std::move(member_sets));
  return universe;
}

}  // namespace hatesub
