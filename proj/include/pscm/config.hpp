#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pscm/csv.hpp"
#include "pscm/error.hpp"

namespace pscm {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Flat `key = value` configuration. Lines starting with '#' are comments.
// Entry order is preserved; a repeated key overrides the earlier value in
// place.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& source = "<config>") {
    KeyValueConfig cfg;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto nl = text.find('\n', start);
      const auto raw = text.substr(start, nl == std::string_view::npos ? nl : nl - start);
      ++line_no;
      const std::string line = trim(raw);
      if (!line.empty() && line.front() != '#') {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
          throw ParseError(source, line_no, {}, "expected 'key = value'");
        }
        std::string key = trim(std::string_view(line).substr(0, eq));
        if (key.empty()) throw ParseError(source, line_no, {}, "empty key");
        cfg.set(std::move(key), trim(std::string_view(line).substr(eq + 1)));
      }
      if (nl == std::string_view::npos) break;
      start = nl + 1;
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    auto cfg = parse(csv::read_file(path), path.string());
    cfg.base_dir_ = path.parent_path();
    return cfg;
  }

  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(value));
  }

  bool contains(std::string_view key) const { return find(key) != nullptr; }

  std::optional<std::string> get(std::string_view key) const {
    if (const auto* v = find(key)) return *v;
    return std::nullopt;
  }

  std::string get_or(std::string_view key, std::string fallback) const {
    if (const auto* v = find(key)) return *v;
    return fallback;
  }

  double get_double(std::string_view key, double fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    double out = 0.0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || p != v->data() + v->size()) {
      throw ConfigurationError("key '" + std::string(key) + "' is not a number: " + *v);
    }
    return out;
  }

  long long get_int(std::string_view key, long long fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    long long out = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || p != v->data() + v->size()) {
      throw ConfigurationError("key '" + std::string(key) + "' is not an integer: " + *v);
    }
    return out;
  }

  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || p != v->data() + v->size()) {
      throw ConfigurationError("key '" + std::string(key) + "' is not an unsigned integer: " + *v);
    }
    return out;
  }

  bool get_bool(std::string_view key, bool fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigurationError("key '" + std::string(key) + "' is not a boolean: " + *v);
  }

  // Entries whose key starts with `prefix`, with the prefix stripped.
  std::vector<std::pair<std::string, std::string>> with_prefix(std::string_view prefix) const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [k, v] : entries_) {
      if (k.size() > prefix.size() && std::string_view(k).substr(0, prefix.size()) == prefix) {
        out.emplace_back(k.substr(prefix.size()), v);
      }
    }
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  // Canonical text: one `key = value` per line in entry order.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  const std::filesystem::path& base_dir() const { return base_dir_; }
  void set_base_dir(std::filesystem::path dir) { base_dir_ = std::move(dir); }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir_.empty() ? path : base_dir_ / path;
  }

 private:
  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
  std::filesystem::path base_dir_;
};

// 64-bit FNV-1a; used for the config fingerprint in run manifests.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace pscm
