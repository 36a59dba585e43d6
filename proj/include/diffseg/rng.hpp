#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "diffseg/tensor.hpp"

namespace diffseg {

/// Deterministic random stream. The engine is mt19937_64 (state layout fixed
/// by the standard) and all distributions are derived here rather than via
/// std:: distribution objects, whose output is implementation-defined.
/// Holds no hidden state beyond the engine, so save/load round-trips exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (cosine branch only, no cached spare).
  double normal() {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Uniform integer in [lo, hi], inclusive. Rejection sampling, exact.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(eng_());  // full 64-bit range
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw std::runtime_error("Rng::load_state: malformed engine state");
  }

 private:
  std::mt19937_64 eng_;
};

/// Derive an independent child seed from (master, index). splitmix64 mix.
inline uint64_t seed_combine(uint64_t master, uint64_t index) {
  uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> random_normal(std::vector<int> shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal());
  return t;
}

template <typename T>
Tensor<T> random_uniform(std::vector<int> shape, Rng& rng, T lo, T hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = lo + static_cast<T>(rng.uniform01()) * (hi - lo);
  return t;
}

}  // namespace diffseg
