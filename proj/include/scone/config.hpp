#ifndef SCONE_CONFIG_HPP_
#define SCONE_CONFIG_HPP_

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "scone/error.hpp"

namespace scone {

/**
 * @brief Flat `key = value` configuration. Lines starting with '#' are
 * comments. Later assignments override earlier ones, which is how command
 * line overrides are layered on top of a file.
 */
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& source = "<config>") {
    KeyValueConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      if (!cfg.set_assignment(line))
        throw ParseError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file " + path);
    return parse(in, path);
  }

  /// Applies "key=value"; returns false when the text has no '='.
  bool set_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) return false;
    const std::string key = trim(text.substr(0, eq));
    if (key.empty()) return false;
    values_[key] = trim(text.substr(eq + 1));
    return true;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw InvalidConfig("key '" + key + "' expects a number, got '" + it->second + "'");
    }
  }

  long long get(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    long long v = 0;
    const auto& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw InvalidConfig("key '" + key + "' expects an integer, got '" + s + "'");
    return v;
  }

  int get(const std::string& key, int fallback) const {
    return static_cast<int>(get(key, static_cast<long long>(fallback)));
  }

  bool get(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw InvalidConfig("key '" + key + "' expects a boolean, got '" + s + "'");
  }

  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace scone

#endif  // SCONE_CONFIG_HPP_
