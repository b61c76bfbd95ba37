#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tokensel/datagen.hpp"
#include "tokensel/training.hpp"

namespace tokensel {

// Flat "key = value" file. '#' starts a comment; lists are comma separated.
// Every key read through a getter is marked used; reject_unused() then flags
// anything left over, so typos fail before any computation starts.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in);
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
  std::vector<std::size_t> get_sizes(const std::string& key,
                                     std::vector<std::size_t> fallback) const;

  // Throws ConfigError naming every key no getter asked for.
  void reject_unused() const;

 private:
  const std::string* lookup(const std::string& key) const;

  std::map<std::string, std::string> values_;
  std::map<std::string, std::size_t> lines_;
  mutable std::set<std::string> used_;
};

// Builders read their keys on top of the given defaults and validate the result.
InitConfig init_config_from(const KeyValueConfig& kv, InitConfig base);
KLevelConfig klevel_config_from(const KeyValueConfig& kv, KLevelConfig base);
AssumptionOneConfig assumption_one_from(const KeyValueConfig& kv, AssumptionOneConfig base);
FlowConfig flow_config_from(const KeyValueConfig& kv, FlowConfig base);
OptimizerConfig optimizer_config_from(const KeyValueConfig& kv, OptimizerConfig base);

}  // namespace tokensel
