// SPDX-License-Identifier: Apache-2.0
//
// Small text helpers shared by the manifest, config, report and log writers.
// Floats are written in shortest round-trip form so parsing restores the
// exact bits.
#pragma once

#include <charconv>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "uwfuse/tensor.hpp"

namespace uwfuse::text {

inline std::string format(float v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string format(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.emplace_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

/// Whitespace-separated fields.
inline std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class T>
T parse(std::string_view s, std::string_view what) {
  s = trim(s);
  T v{};
  if constexpr (std::is_floating_point_v<T>) {
    if (s == "inf") return std::numeric_limits<T>::infinity();
  }
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw Error("invalid value '" + std::string(s) + "' for " + std::string(what));
  return v;
}

/// Parses `key = value` lines; '#' starts a comment, blank lines are ignored.
/// Keys are normalized to snake_case (dashes become underscores).
inline std::map<std::string, std::string> parse_key_values(std::string_view content) {
  std::map<std::string, std::string> out;
  std::size_t lineno = 0;
  for (const std::string& raw : split(content, '\n')) {
    ++lineno;
    std::string_view line = raw;
    if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error("line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key(trim(line.substr(0, eq)));
    for (char& c : key)
      if (c == '-') c = '_';
    if (key.empty()) throw Error("line " + std::to_string(lineno) + ": empty key");
    out[key] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace uwfuse::text
