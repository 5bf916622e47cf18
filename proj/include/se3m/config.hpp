#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "se3m/checkpoint.hpp"
#include "se3m/error.hpp"

namespace se3m {

/// Flat `key = value` settings with a fixed set of known keys. Later layers
/// (config file, then --set pairs, then dedicated flags) overwrite earlier ones.
class Settings {
 public:
  explicit Settings(std::map<std::string, std::string> defaults) : values_(std::move(defaults)) {}

  bool known(std::string_view key) const { return values_.contains(std::string(key)); }

  void set(std::string_view key, std::string value) {
    auto it = values_.find(std::string(key));
    if (it == values_.end()) throw ConfigError("unknown setting '" + std::string(key) + "'");
    it->second = std::move(value);
  }

  /// `key=value`, surrounding blanks trimmed.
  void set_pair(std::string_view pair, std::string_view origin = "--set") {
    const auto eq = pair.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(std::string(origin) + ": expected key=value, got '" + std::string(pair) + "'");
    set(trim(pair.substr(0, eq)), std::string(trim(pair.substr(eq + 1))));
  }

  /// One `key = value` per line; '#' starts a comment, blank lines are skipped.
  void merge_text(std::string_view text, std::string_view origin) {
    std::size_t line_no = 0, start = 0;
    while (start <= text.size()) {
      const auto nl = text.find('\n', start);
      std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
      start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      set_pair(line, std::string(origin) + ":" + std::to_string(line_no));
    }
  }

  void merge_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
    merge_text(read_file(path), path.string());
  }

  const std::string& str(std::string_view key) const {
    auto it = values_.find(std::string(key));
    if (it == values_.end()) throw ConfigError("unknown setting '" + std::string(key) + "'");
    return it->second;
  }

  bool has(std::string_view key) const { return !str(key).empty(); }

  std::uint64_t u64(std::string_view key) const {
    const std::string& s = str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
      throw ConfigError("setting '" + std::string(key) + "' expects a non-negative integer, got '" + s + "'");
    return v;
  }

  std::size_t size(std::string_view key) const { return static_cast<std::size_t>(u64(key)); }

  double real(std::string_view key) const {
    const std::string& s = str(key);
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty())
      throw ConfigError("setting '" + std::string(key) + "' expects a number, got '" + s + "'");
    return v;
  }

  bool flag(std::string_view key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("setting '" + std::string(key) + "' expects true or false, got '" + s + "'");
  }

  /// Comma-separated positive integers, e.g. "50,10".
  std::vector<std::size_t> sizes(std::string_view key) const {
    std::vector<std::size_t> out;
    const std::string& s = str(key);
    std::size_t start = 0;
    while (start <= s.size()) {
      const auto comma = std::min(s.find(',', start), s.size());
      const std::string_view part = trim(std::string_view(s).substr(start, comma - start));
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
      if (part.empty() || ec != std::errc{} || p != part.data() + part.size())
        throw ConfigError("setting '" + std::string(key) + "' expects comma-separated integers, got '" + s + "'");
      out.push_back(v);
      start = comma + 1;
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical `key = value` dump, sorted by key.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace se3m
