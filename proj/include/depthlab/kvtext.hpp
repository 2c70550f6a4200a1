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
#pragma once

#include <string>
#include <vector>

namespace depthlab {

/// One `key = value` line of the flat config format. Keys are dotted paths
/// ("train.lr_peak"); `#` starts a comment; blank lines are ignored.
struct KvEntry {
  std::string key;
  std::string value;
  int line = 0;
};

/// Throws ConfigError("line N", ...) on malformed lines and duplicate keys.
std::vector<KvEntry> parse_kv_text(const std::string& text);

long long parse_int(const std::string& path, const std::string& value);
double parse_real(const std::string& path, const std::string& value);
bool parse_bool(const std::string& path, const std::string& value);
/// Comma-separated list; items are trimmed, empty items rejected.
std::vector<std::string> parse_list(const std::string& path, const std::string& value);

/// Shortest text that reads back to the same double.
std::string format_real(double v);

}  // namespace depthlab
