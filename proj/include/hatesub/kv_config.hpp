#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hatesub/common.hpp"

namespace hatesub {

// Flat key-value text config:
//
//   # comment
//   [section]
//   key = value
//
// Keys inside a section are addressed as "section.key". Keys before the first
// section header have no prefix. Later assignments override earlier ones.
class KeyValueConfig {
public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view content, std::string_view origin = "<config>") {
    KeyValueConfig cfg;
    std::string section;
    std::size_t line_no = 0;
    for (const auto& raw : text::split(content, '\n')) {
      ++line_no;
      const auto line = text::trim(raw);
      if (line.empty() || line.front() == '#' || line.front() == ';') continue;
      if (line.front() == '[') {
        if (line.back() != ']') {
          throw Error(std::string(origin) + ":" + std::to_string(line_no) + ": unterminated section header");
        }
        section = std::string(text::trim(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw Error(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const auto key = text::trim(line.substr(0, eq));
      if (key.empty()) {
        throw Error(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
      }
      const auto value = text::trim(line.substr(eq + 1));
      cfg.set(section.empty() ? std::string(key) : section + "." + std::string(key), std::string(value));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) { return parse(read_file(path), path); }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string get_or(const std::string& key, std::string fallback) const {
    auto v = get(key);
    return v ? *v : std::move(fallback);
  }

  std::string require(const std::string& key) const {
    auto v = get(key);
    if (!v || v->empty()) throw Error("missing required config key '" + key + "'");
    return *v;
  }

  double get_double(const std::string& key, double fallback) const {
    auto v = get(key);
    return v ? text::require_double(*v, key) : fallback;
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto v = get(key);
    return v ? text::require_int(*v, key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    const auto s = text::lower(*v);
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw Error("expected a boolean for '" + key + "', got '" + *v + "'");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    auto v = get(key);
    return v ? text::split_list(*v) : std::vector<std::string>{};
  }

  // Keys sharing a prefix, with the prefix stripped.
  std::map<std::string, std::string> with_prefix(const std::string& prefix) const {
    std::map<std::string, std::string> out;
    for (auto it = values_.lower_bound(prefix); it != values_.end(); ++it) {
      if (it->first.compare(0, prefix.size(), prefix) != 0) break;
      out.emplace(it->first.substr(prefix.size()), it->second);
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  // Canonical text form; sorted keys, one "key = value" per line.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

private:
  std::map<std::string, std::string> values_;
};

}  // namespace hatesub
