#pragma once

// Flat `key = value` text files. Blank lines and lines starting with '#' are
// ignored. Every key must be consumed by some reader; leftovers are reported
// as unknown keys.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dpl/error.hpp"

namespace dpl {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source = "<config>") {
    KeyValues kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::kConfig,
                    source + ":" + std::to_string(line_no) + ": expected key = value");
      }
      std::string key = detail::trim(std::string_view(t).substr(0, eq));
      std::string value = detail::trim(std::string_view(t).substr(eq + 1));
      if (key.empty()) {
        throw Error(ErrorCode::kConfig, source + ":" + std::to_string(line_no) + ": empty key");
      }
      if (kv.entries_.contains(key)) {
        throw Error(ErrorCode::kConfig, source + ": duplicate key '" + key + "'");
      }
      kv.entries_.emplace(std::move(key), std::move(value));
    }
    return kv;
  }

  static KeyValues parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
    return parse(in, path.string());
  }

  bool contains(const std::string& key) const { return entries_.contains(key); }

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }

  /// Raw string value; marks the key as consumed.
  std::optional<std::string> take(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    return take(key).value_or(fallback);
  }

  double get_double(const std::string& key, double fallback) {
    auto v = take(key);
    return v ? parse_double(key, *v) : fallback;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
      throw Error(ErrorCode::kConfig, "key '" + key + "': expected integer, got '" + *v + "'");
    }
    return out;
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) {
    const std::int64_t v = get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw Error(ErrorCode::kConfig, "key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  bool get_bool(const std::string& key, bool fallback) {
    auto v = take(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw Error(ErrorCode::kConfig, "key '" + key + "': expected boolean, got '" + *v + "'");
  }

  /// Comma-separated reals; the count must match the fallback.
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::vector<double> out;
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, detail::trim(item)));
    if (out.size() != fallback.size()) {
      throw Error(ErrorCode::kConfig, "key '" + key + "': expected " +
                                          std::to_string(fallback.size()) + " values");
    }
    return out;
  }

  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) {
      if (!used_.contains(k)) out.push_back(k);
    }
    return out;
  }

  void require_all_used() const {
    const auto unused = unused_keys();
    if (unused.empty()) return;
    std::string msg = "unknown key(s):";
    for (const auto& k : unused) msg += " " + k;
    throw Error(ErrorCode::kConfig, msg);
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  static double parse_double(const std::string& key, const std::string& text) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(text, &pos);
      if (pos != text.size()) throw std::invalid_argument(text);
      return d;
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfig, "key '" + key + "': expected number, got '" + text + "'");
    }
  }

  std::map<std::string, std::string> entries_;
  std::set<std::string> used_;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace dpl
