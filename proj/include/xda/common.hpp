// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace xda {

struct XdaError : std::runtime_error {
  explicit XdaError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor rank/dimension mismatch.
struct ShapeError : XdaError {
  explicit ShapeError(const std::string& msg) : XdaError("shape: " + msg) {}
};

// Violated API precondition (empty support set, re-used tape, ...).
struct ContractError : XdaError {
  explicit ContractError(const std::string& msg) : XdaError("contract: " + msg) {}
};

// Episode sampling asked for more than the dataset holds.
struct SamplerError : XdaError {
  explicit SamplerError(const std::string& msg) : XdaError("sampler: " + msg) {}
};

// Bad or inconsistent run configuration.
struct ConfigError : XdaError {
  explicit ConfigError(const std::string& msg) : XdaError("config: " + msg) {}
};

// Unreadable, truncated or mismatched checkpoint.
struct CheckpointError : XdaError {
  explicit CheckpointError(const std::string& msg) : XdaError("checkpoint: " + msg) {}
};

// NaN/inf where a finite value is required.
struct NumericError : XdaError {
  explicit NumericError(const std::string& msg) : XdaError("numeric: " + msg) {}
};

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// FNV-1a, used for content checksums and derived seeds.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// Fixed-format float for logs and CSVs so identical runs emit identical bytes.
inline std::string fmt_g(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return std::string(buf);
}

inline std::string fmt_f(double v, int prec = 1) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return std::string(buf);
}

}  // namespace xda
