// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
#include "depthlab/kvtext.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cstdlib>
#include <set>
#include <sstream>

#include "depthlab/errors.hpp"

namespace depthlab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<KvEntry> parse_kv_text(const std::string& text) {
  std::vector<KvEntry> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where, "expected 'key = value'");
    KvEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no};
    if (e.key.empty()) throw ConfigError(where, "empty key");
    for (char c : e.key) {
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) {
        throw ConfigError(where, "invalid character in key '" + e.key + "'");
      }
    }
    if (!seen.insert(e.key).second) throw ConfigError(e.key, "duplicate key at " + where);
    out.push_back(std::move(e));
  }
  return out;
}

long long parse_int(const std::string& path, const std::string& value) {
  long long v = 0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(path, "expected an integer, got '" + value + "'");
  return v;
}

double parse_real(const std::string& path, const std::string& value) {
  if (value.empty()) throw ConfigError(path, "expected a number, got ''");
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end != value.c_str() + value.size()) throw ConfigError(path, "expected a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& path, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError(path, "expected true/false, got '" + value + "'");
}

std::vector<std::string> parse_list(const std::string& path, const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(path, "empty list item in '" + value + "'");
    out.push_back(item);
  }
  return out;
}

std::string format_real(double v) { return fmt::format("{}", v); }

}  // namespace depthlab
