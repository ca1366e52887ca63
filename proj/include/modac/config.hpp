#pragma once

// Plain-text experiment configuration: `key = value` lines with '#'
// comments, dotted keys for grouping, CLI overrides applied on top. The
// canonical serialization (sorted keys) is copied into every run directory
// and hashed for provenance.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace modac::config {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class Config {
 public:
  static Config parse_text(const std::string& text);
  static Config parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_str(const std::string& key, const std::string& def) const;
  long get_long(const std::string& key, long def) const;
  int get_int(const std::string& key, int def) const;
  double get_double(const std::string& key, double def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::vector<double> get_doubles(const std::string& key,
                                  const std::vector<double>& def) const;
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& def) const;
  std::vector<long> get_longs(const std::string& key, const std::vector<long>& def) const;

  // unknown keys outside this list raise ConfigError (typo safety)
  void require_known(const std::vector<std::string>& known) const;

  std::string canonical_text() const;
  std::uint64_t hash() const;

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace modac::config
