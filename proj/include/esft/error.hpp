// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace esft {

enum class ErrorKind {
  kConfig,      // shapes or configuration values do not conform
  kInput,       // malformed or infeasible user input (profiles, flags)
  kUsage,       // API misuse: overlapping loads, evicting pinned adapters
  kCapacity,    // no free adapter slot
  kAllocation,  // physical page pool exhausted
  kMemoryFault, // access to an unmapped or unloaded slot
  kManifest,    // adapter manifest rejected
  kValidation,  // per-batch validation (AID range) or oracle mismatch
  kInvariant,   // internal invariant broken; should be unreachable
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kAllocation: return "allocation";
    case ErrorKind::kMemoryFault: return "memory-fault";
    case ErrorKind::kManifest: return "manifest";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kInvariant: return "invariant";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) raise(kind, what);
}

}  // namespace esft
