#pragma once

#include <cstdint>
#include <random>

namespace calora {

// Deterministic random source. std::mt19937_64 has a bit-exact sequence
// mandated by the standard; the conversions to uniform/normal values are done
// here rather than through <random> distributions, whose outputs are
// implementation-defined.
class Rng {
 public:
  static constexpr std::uint32_t kAlgorithmId = 1;  // mt19937_64 + splitmix stream mix

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller; caches the second draw.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derives an independent generator for a named sub-stream.
  Rng fork(std::uint64_t stream) const { return Rng(seed_, stream_ * 0x9E3779B97F4A7C15ULL + stream + 1); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace calora
