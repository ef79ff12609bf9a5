#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pyrpix/common.hpp"

namespace pyrpix {

/// Flat key=value configuration with INI-style [section] headers.
/// A key inside [train] is addressed as "train.epochs". Later assignments
/// override earlier ones, which gives the defaults < file < flags layering
/// used by the CLI. Serialization is sorted, so snapshots are diffable and
/// byte-stable across runs.
class Config {
 public:
  Config() = default;

  static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
    Config cfg;
    std::string section;
    int lineno = 0;
    for (const std::string& raw : split(text, '\n')) {
      ++lineno;
      std::string line = trim(raw);
      if (line.empty() || line[0] == '#' || line[0] == ';') continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ContractError(origin + ":" + std::to_string(lineno) + ": malformed section header '" + line + "'");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ContractError(origin + ":" + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw ContractError(origin + ":" + std::to_string(lineno) + ": empty key");
      cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
  }

  static Config parse_file(const fs::path& path) {
    return parse_string(read_text_file(path), path.string());
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  /// Overlays every entry of `other` on top of this config.
  void merge(const Config& other) {
    for (const auto& [k, v] : other.kv_) kv_[k] = v;
  }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  std::string require_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ContractError("missing required config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return parse_double(key, it->second);
  }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return parse_int(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ContractError("config key " + key + ": expected boolean, got '" + v + "'");
  }

  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<int> out;
    for (const std::string& part : split(it->second, ',')) {
      std::string p = trim(part);
      if (p.empty()) continue;
      out.push_back(static_cast<int>(parse_int(key, p)));
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<double> out;
    for (const std::string& part : split(it->second, ',')) {
      std::string p = trim(part);
      if (p.empty()) continue;
      out.push_back(parse_double(key, p));
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

  /// Sorted sectioned text form; parse_string(serialize()) round-trips.
  std::string serialize() const {
    std::string out;
    std::string cur_section;
    bool first = true;
    for (const auto& [k, v] : kv_) {
      size_t dot = k.rfind('.');
      std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
      std::string name = dot == std::string::npos ? k : k.substr(dot + 1);
      if (section != cur_section || first) {
        if (!first) out += "\n";
        if (!section.empty()) out += "[" + section + "]\n";
        cur_section = section;
        first = false;
      }
      out += name + " = " + v + "\n";
    }
    return out;
  }

 private:
  static double parse_double(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ContractError("config key " + key + ": expected number, got '" + v + "'");
    }
  }

  static int64_t parse_int(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      long long i = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return i;
    } catch (const std::exception&) {
      throw ContractError("config key " + key + ": expected integer, got '" + v + "'");
    }
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace pyrpix
