#pragma once

#include <cstdint>
#include <random>

namespace qesr {

// splitmix64 finalizer; used to derive well-separated engine seeds.
std::uint64_t splitmix64(std::uint64_t x);

// Order-sensitive two-value seed combiner.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Deterministic stream keyed by (seed, stream index). All variates are
// produced by explicit transforms of the raw 64-bit output, so sequences
// are reproducible across platforms and standard library versions.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();
  double uniform();  // strictly inside (0, 1)
  std::uint64_t uniform_index(std::uint64_t n);  // {0, ..., n-1}
  double normal();
  double truncated_normal(double mu, double sigma, double lower);
  double lognormal();
  double chi_square1();
  double student_t3();
  int bernoulli(double prob);

 private:
  std::mt19937_64 eng_;
};

}  // namespace qesr
