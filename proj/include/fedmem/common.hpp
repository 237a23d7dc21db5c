// Copyright 2026 The FedMem Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedmem {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

enum class ErrorKind {
  kInput,      // malformed or out-of-range caller input
  kConfig,     // invalid configuration, detected before any work starts
  kInvariant,  // internal consistency check failed
  kIo,         // file could not be read or written
};

inline const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInput:
      return "input error";
    case ErrorKind::kConfig:
      return "configuration error";
    case ErrorKind::kInvariant:
      return "invariant violation";
    case ErrorKind::kIo:
      return "i/o error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(ErrorKindName(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error InputError(const std::string& message) {
  return Error(ErrorKind::kInput, message);
}
inline Error ConfigError(const std::string& message) {
  return Error(ErrorKind::kConfig, message);
}
inline Error InvariantError(const std::string& message) {
  return Error(ErrorKind::kInvariant, message);
}
inline Error IoError(const std::string& message) {
  return Error(ErrorKind::kIo, message);
}

}  // namespace fedmem
