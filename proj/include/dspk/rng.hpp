#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace dspk {

// Deterministic RNG. Distributions are implemented here (not taken from
// <random>) so streams reproduce across standard libraries, and independent
// streams can be derived from (seed, ids...) without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6473706bULL)), gen_(key_) {}

  std::uint64_t raw() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, no cached spare, so draw counts stay predictable.
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  bool bernoulli(double p) { return uniform() < p; }

  // i in [0, n), n >= 1
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Child stream keyed by a list of ids. Children with equal ids coincide no
  // matter how much the parent has been consumed.
  template <typename... Ids>
  Rng child(Ids... ids) const {
    std::uint64_t h = key_;
    ((h = mix(h + 0x100 + static_cast<std::uint64_t>(ids))), ...);
    Rng r(0);
    r.key_ = h;
    r.gen_.seed(h);
    return r;
  }

  // mt19937_64 state round-trips through text; used for training resume.
  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::mt19937_64 gen_;
};

}  // namespace dspk
