#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cacl/common.hpp"

// Flat key=value config files, deterministic CSV emission, and small file
// helpers. All float formatting goes through fmt_g so identical values always
// produce identical bytes.
namespace cacl {

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// lossless double formatting; parsing the result recovers the exact value
inline std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse_text(const std::string& text, const std::string& origin) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected key=value, got '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = val;
    }
    return cfg;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& dflt) {
    touched_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  std::int64_t get_int(const std::string& key, std::int64_t dflt) {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const auto v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects an integer, got '" +
                        it->second + "'");
    }
  }

  double get_double(const std::string& key, double dflt) {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const auto v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + it->second +
                        "'");
    }
  }

  bool get_bool(const std::string& key, bool dflt) {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + it->second +
                      "'");
  }

  // call after all getters ran; any untouched key is a typo
  void reject_unknown_keys() const {
    for (auto& [k, v] : values_)
      if (!touched_.count(k)) throw ConfigError("unknown config key: " + k);
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> touched_;
};

// rows of preformatted cells; the writer only adds commas and newlines
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) { add_row(std::move(header)); }

  void add_row(std::vector<std::string> cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) line += ",";
      line += cells[i];
    }
    lines_.push_back(std::move(line));
  }

  std::string str() const {
    std::string out;
    for (auto& l : lines_) {
      out += l;
      out += "\n";
    }
    return out;
  }

  void write_file(const std::string& path) const { write_text_file(path, str()); }

  static void write_text_file(const std::string& path, const std::string& content) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write file: " + path);
    out << content;
    if (!out) throw DataError("write failed: " + path);
  }

 private:
  std::vector<std::string> lines_;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace cacl
