#include "modac/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace modac::config {

namespace {
std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_one(const std::string& key, const std::string& raw, T (*conv)(const std::string&)) {
  try {
    return conv(raw);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse value '" + raw + "'");
  }
}

long to_long(const std::string& s) {
  size_t pos = 0;
  const long v = std::stol(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

double to_double(const std::string& s) {
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}
}  // namespace

Config Config::parse_text(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    c.kv_[key] = value;
  }
  return c;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

void Config::set(const std::string& key, const std::string& value) { kv_[key] = value; }

bool Config::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string Config::get_str(const std::string& key, const std::string& def) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? def : it->second;
}

long Config::get_long(const std::string& key, long def) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? def : parse_one<long>(key, it->second, to_long);
}

int Config::get_int(const std::string& key, int def) const {
  return static_cast<int>(get_long(key, def));
}

double Config::get_double(const std::string& key, double def) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? def : parse_one<double>(key, it->second, to_double);
}

bool Config::get_bool(const std::string& key, bool def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + it->second + "'");
}

namespace {
std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(part);
  return out;
}
}  // namespace

std::vector<double> Config::get_doubles(const std::string& key,
                                        const std::vector<double>& def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  std::vector<double> out;
  for (const auto& p : split_commas(it->second))
    out.push_back(parse_one<double>(key, trim(p), to_double));
  return out;
}

std::vector<int> Config::get_ints(const std::string& key, const std::vector<int>& def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  std::vector<int> out;
  for (const auto& p : split_commas(it->second))
    out.push_back(static_cast<int>(parse_one<long>(key, trim(p), to_long)));
  return out;
}

std::vector<long> Config::get_longs(const std::string& key,
                                    const std::vector<long>& def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  std::vector<long> out;
  for (const auto& p : split_commas(it->second))
    out.push_back(parse_one<long>(key, trim(p), to_long));
  return out;
}

void Config::require_known(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : kv_)
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown config key '" + k + "'");
}

std::string Config::canonical_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
  return out.str();
}

std::uint64_t Config::hash() const {
  const std::string text = canonical_text();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace modac::config
