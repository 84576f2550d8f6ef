// Seeded RNG wrapper. Every stochastic component takes an explicit Rng so a
// (seed, config, corpus) triple fully determines a run.

#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "dssm/tensor.hpp"

namespace dssm {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  // Independent substream, stable under call order.
  Rng derive(uint64_t stream) const { return Rng(splitmix64(seed_mix_ ^ splitmix64(stream))); }

  static Rng seeded(uint64_t seed) {
    Rng r(splitmix64(seed));
    r.seed_mix_ = splitmix64(seed ^ 0xa5a5a5a5a5a5a5a5ULL);
    return r;
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(gen_); }

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(uniform(lo, hi));
  }
  template <typename T>
  void fill_normal(Tensor<T>& t, double mean, double stddev) {
    for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(normal(mean, stddev));
  }

  std::string state_string() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_mix_ = 0;
};

}  // namespace dssm
