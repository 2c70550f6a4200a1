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

#include <stdexcept>
#include <string>

namespace depthlab {

/// Operand shapes are incompatible.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An argument lies outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A caller broke an operation's precondition (non-scalar loss, bad index...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Every entry of a softmax row was masked out.
struct DegenerateRowError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Invalid configuration. `path` is the dotted field that failed validation.
struct ConfigError : std::runtime_error {
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path.empty() ? what : path + ": " + what), path(std::move(path)) {}
  std::string path;
};

/// Bad model input (token id out of range, sequence too long or too short).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A file could not be read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A file on disk does not match what was recorded for it.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A training step saw a non-finite gradient and was not applied.
struct NonFiniteGradientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace depthlab
