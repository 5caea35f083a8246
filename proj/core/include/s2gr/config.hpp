#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace s2gr::cfg {

// Flat sectioned key/value file:
//
//   # comment
//   [section]
//   key = value
//
// Keys are addressed as "section.key". Typed getters throw ConfigError naming
// the field when a value does not parse.
class Config {
 public:
  static Config parse(std::string_view text);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  /// "section.key=value", with or without a leading "--".
  void apply_override(std::string_view arg);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

  /// Keys present in the file but never read.
  std::vector<std::string> unused() const;
  /// Sorted `key=value` lines, skipping `exclude`.
  std::string canonical(const std::set<std::string>& exclude = {}) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const std::string* lookup(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace s2gr::cfg
