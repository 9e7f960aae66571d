#pragma once

#include "mssnet/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mssnet {

/// Flat `key = value` configuration. Lines starting with '#' and blank lines
/// are ignored; later keys override earlier ones. Lists are comma separated.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  /// Canonical text: keys sorted, one `key = value` per line.
  std::string serialize() const;

 private:
  std::map<std::string, std::string> values_;
};

/// 64-bit FNV-1a over bytes.
std::uint64_t fnv1a64(const std::string& bytes) noexcept;

std::string join_ints(const std::vector<int>& values);
/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace mssnet
