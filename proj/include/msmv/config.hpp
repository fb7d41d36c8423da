#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "msmv/errors.hpp"

namespace msmv {

// Flat dotted key-value configuration:
//   # comment
//   section.key = value
// Keys outside the schema are rejected with the key name and line.
class Config {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;  // 0 for defaults and inline overrides
    std::string origin = "default";
  };

  Config() = default;
  explicit Config(const std::map<std::string, std::string>& defaults) {
    for (const auto& [k, v] : defaults) entries_[k] = Entry{v, 0, "default"};
  }

  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, raw)) {
      ++line;
      const std::string s = trim(strip_comment(raw));
      if (s.empty()) continue;
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigurationError(origin + ":" + std::to_string(line) + ": expected 'key = value'", s, line);
      const std::string key = trim(s.substr(0, eq));
      const std::string value = trim(s.substr(eq + 1));
      if (seen.count(key))
        throw ConfigurationError(origin + ":" + std::to_string(line) + ": duplicate key '" + key + "' (first on line " +
                                     std::to_string(seen[key]) + ")",
                                 key, line);
      seen[key] = line;
      assign(key, value, line, origin);
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigurationError("cannot open config file '" + path + "'", "--config");
    std::stringstream ss;
    ss << f.rdbuf();
    merge_text(ss.str(), path);
  }

  // Applies an inline "key=value" override.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigurationError("override '" + assignment + "' is not key=value", assignment);
    assign(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), 0, "--set");
  }

  void set(const std::string& key, const std::string& value) { assign(key, value, 0, "--set"); }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  const std::string& text(const std::string& key) const { return entry(key).value; }

  double number(const std::string& key) const {
    const Entry& e = entry(key);
    return parse_number(key, e.value, e);
  }

  std::uint64_t u64(const std::string& key) const {
    const Entry& e = entry(key);
    const std::string& v = e.value;
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
      throw error(key, e, "expected a nonnegative integer, got '" + v + "'");
    errno = 0;
    const unsigned long long r = std::strtoull(v.c_str(), nullptr, 10);
    if (errno == ERANGE) throw error(key, e, "integer out of range: '" + v + "'");
    return r;
  }

  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  bool flag(const std::string& key) const {
    const Entry& e = entry(key);
    if (e.value == "true") return true;
    if (e.value == "false") return false;
    throw error(key, e, "expected true or false, got '" + e.value + "'");
  }

  // Comma-separated list of numbers.
  std::vector<double> list(const std::string& key) const {
    const Entry& e = entry(key);
    std::vector<double> out;
    std::string item;
    std::istringstream in(e.value);
    while (std::getline(in, item, ',')) out.push_back(parse_number(key, trim(item), e));
    if (out.empty()) throw error(key, e, "expected a comma-separated list of numbers");
    return out;
  }

  // Resolved configuration, one "key = value" line per key in key order.
  std::string emit() const {
    std::string out;
    for (const auto& [k, e] : entries_) out += k + " = " + e.value + "\n";
    return out;
  }

  // FNV-1a 64 of the emitted text.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : emit()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }

  std::map<std::string, std::string> values() const {
    std::map<std::string, std::string> out;
    for (const auto& [k, e] : entries_) out[k] = e.value;
    return out;
  }

  bool operator==(const Config& o) const { return values() == o.values(); }

 private:
  static std::string strip_comment(const std::string& s) {
    const auto pos = s.find('#');
    return pos == std::string::npos ? s : s.substr(0, pos);
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static ConfigurationError error(const std::string& key, const Entry& e, const std::string& msg) {
    std::string where = e.origin;
    if (e.line) where += ":" + std::to_string(e.line);
    return ConfigurationError(where + ": " + key + ": " + msg, key, e.line);
  }

  static double parse_number(const std::string& key, const std::string& v, const Entry& e) {
    if (v.empty()) throw error(key, e, "expected a number");
    char* end = nullptr;
    errno = 0;
    const double r = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size() || errno == ERANGE) throw error(key, e, "expected a number, got '" + v + "'");
    return r;
  }

  void assign(const std::string& key, const std::string& value, std::size_t line, const std::string& origin) {
    auto it = entries_.find(key);
    if (it == entries_.end()) {
      std::string where = origin;
      if (line) where += ":" + std::to_string(line);
      throw ConfigurationError(where + ": unknown key '" + key + "'", key, line);
    }
    if (value.find('\n') != std::string::npos) throw ConfigurationError("value of '" + key + "' spans lines", key, line);
    it->second = Entry{value, line, origin};
  }

  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigurationError("unknown key '" + key + "'", key);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace msmv
