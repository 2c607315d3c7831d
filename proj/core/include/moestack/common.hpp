#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace moestack {

// =====================================================================
//  Errors
// =====================================================================
//
// One exception type per failure class so callers (and the CLI exit-code
// mapping) can distinguish them without string matching.

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct RoutingError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
// Gradient blew up (NaN/inf); carries the offending parameter name in msg.
struct InstabilityError : Error {
  using Error::Error;
};
struct StorageError : Error {
  using Error::Error;
};
// Stored bytes fail their content hash or are otherwise unreadable.
struct CorruptionError : StorageError {
  using StorageError::StorageError;
};
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
// A required prior artifact (base weights, manifest, oracle cache...) is missing.
struct PrerequisiteError : Error {
  using Error::Error;
};
struct LeakageError : Error {
  using Error::Error;
};
// Artifact was produced against a different base model / config.
struct IncompatibilityError : Error {
  using Error::Error;
};

// =====================================================================
//  Rng: seeded counter-based generator (splitmix64)
// =====================================================================
//
// Every draw is a pure function of (seed, counter), so any consumer that
// owns its own Rng is reproducible regardless of what other code does.

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64() {
    uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  float uniform() {
    return static_cast<float>((next_u64() >> 40) * 0x1.0p-24);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // size_t in [0, n)
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // standard normal via Box-Muller (pairs cached)
  float normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    float u1 = uniform();
    float u2 = uniform();
    // avoid log(0)
    if (u1 < 1e-12f) u1 = 1e-12f;
    float r = std::sqrt(-2.0f * std::log(u1));
    float theta = 6.2831853071795864769f * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  // Independent deterministic stream derived from this seed.
  Rng fork(uint64_t stream) const {
    uint64_t z = seed_ ^ (stream * 0xD6E8FEB86659FD93ULL + 0xA5A5A5A5A5A5A5A5ULL);
    z = (z ^ (z >> 32)) * 0xD6E8FEB86659FD93ULL;
    return Rng(z ^ (z >> 32));
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;
  float cached_ = 0.0f;
  bool has_cached_ = false;
};

// =====================================================================
//  FNV-1a 64-bit content hash
// =====================================================================

constexpr uint64_t kFnvOffset = 0xCBF29CE484222325ULL;
constexpr uint64_t kFnvPrime = 0x00000100000001B3ULL;

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace moestack
