#pragma once

#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mafenn {

// Tiny "key = value" text format used for model sidecars and experiment
// plans.  One pair per line, '#' starts a comment, blank lines ignored.
// Keys are unique; later assignments overwrite earlier ones.
using KvMap = std::map<std::string, std::string>;

inline std::string kv_trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline KvMap parse_kv_text(const std::string& text) {
  KvMap out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = kv_trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("kv: line " + std::to_string(lineno) +
                                  " has no '='");
    const std::string key = kv_trim(line.substr(0, eq));
    if (key.empty())
      throw std::invalid_argument("kv: line " + std::to_string(lineno) +
                                  " has an empty key");
    out[key] = kv_trim(line.substr(eq + 1));
  }
  return out;
}

// Comma-separated list helpers for values like "0,4,8".
inline std::vector<std::string> kv_split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = kv_trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace mafenn
