#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace helix {

/// Deterministic RNG stream. A thin wrapper over mt19937_64 so that state can
/// be serialized into checkpoints and sub-streams can be derived for
/// independent samplers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  /// Derive an independent stream; distinct salts give distinct streams.
  Rng fork(std::uint64_t salt) {
    std::uint64_t s = engine_();
    return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL));
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace helix
