#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace idproxy {

// Error classes surfaced through the C API and the CLI's one-line
// machine-parsable failure output. Keep stable: codes are part of the ABI.
enum class ErrClass : int {
  ok = 0,
  config = 1,      // invalid configuration value
  shape = 2,       // incompatible tensor shapes
  data = 3,        // malformed or inconsistent input data
  degenerate = 4,  // numerically degenerate input (near-zero norm etc.)
  dependency = 5,  // required upstream artifact missing
  not_found = 6,   // lookup miss
  numeric = 7,     // non-finite values where finite required
  io = 8,          // filesystem / serialization failure
  empty_split = 9, // a data split came out empty
  metric = 10,     // metric undefined on the given input
  internal = 11,
};

const char* err_class_name(ErrClass c);

class Error : public std::runtime_error {
 public:
  Error(ErrClass cls, const std::string& msg) : std::runtime_error(msg), cls_(cls) {}
  ErrClass cls() const { return cls_; }

 private:
  ErrClass cls_;
};

[[noreturn]] inline void fail(ErrClass cls, const std::string& msg) { throw Error(cls, msg); }

// Deterministic RNG. Distribution code is written out here so that sampled
// streams are pinned by this repo, not by the standard library build.
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // splitmix64 expansion of the seed into the xoshiro256** state.
    state_[0] = splitmix(seed);
    state_[1] = splitmix(seed);
    state_[2] = splitmix(seed);
    state_[3] = splitmix(seed);
    has_spare_ = false;
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) fail(ErrClass::config, "uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<int64_t>(x % un);
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Derive an independent stream for a named sub-task.
  Rng fork(const std::string& tag) const;

 private:
  static uint64_t splitmix(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// FNV-1a 64-bit, used for config hashes and artifact freeze checks.
class Fnv64 {
 public:
  void update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  uint64_t value() const { return h_; }
  std::string hex() const;

 private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

uint64_t fnv64(const void* data, size_t n);
uint64_t fnv64(const std::string& s);
std::string fnv64_hex(const std::string& s);

// Round-trippable decimal rendering of a double (17 significant digits).
std::string real_to_string(double v);
double string_to_real(const std::string& s);

// Filesystem helpers. Writes go through a temp file + rename.
std::string read_text_file(const std::string& path);
void write_text_file_atomic(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

// UTC wall clock in ISO-8601. Manifests only — nothing that feeds a report or
// a numeric artifact may consult it.
std::string utc_timestamp();

}  // namespace idproxy
