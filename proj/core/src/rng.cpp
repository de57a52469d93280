#include "qesr/rng.hpp"

#include <cmath>
#include <string>

#include "qesr/special.hpp"
#include "qesr/types.hpp"

namespace qesr {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (b + 0x6a09e667f3bcc909ULL));
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : eng_(mix_seed(seed, stream)) {}

std::uint64_t RngStream::next_u64() { return eng_(); }

double RngStream::uniform() {
  // 53-bit mantissa shifted into the open interval.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t n) {
  if (n == 0) throw InvalidInputError("uniform_index needs n > 0");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
}

double RngStream::normal() { return normal_quantile(uniform()); }

double RngStream::truncated_normal(double mu, double sigma, double lower) {
  if (!(sigma > 0.0)) {
    throw InvalidInputError("truncated_normal needs sigma > 0, got " +
                            std::to_string(sigma));
  }
  const double p_lo = normal_cdf((lower - mu) / sigma);
  if (p_lo >= 1.0 - 1e-14) {
    throw InvalidInputError("truncated_normal bound leaves no mass");
  }
  const double u = p_lo + uniform() * (1.0 - p_lo);
  return mu + sigma * normal_quantile(u);
}

double RngStream::lognormal() { return std::exp(normal()); }

double RngStream::chi_square1() {
  const double z = normal();
  return z * z;
}

double RngStream::student_t3() {
  const double z = normal();
  const double v = chi_square1() + chi_square1() + chi_square1();
  return z / std::sqrt(v / 3.0);
}

int RngStream::bernoulli(double prob) {
  if (prob < 0.0 || prob > 1.0) {
    throw InvalidInputError("bernoulli needs prob in [0,1], got " +
                            std::to_string(prob));
  }
  return uniform() < prob ? 1 : 0;
}

}  // namespace qesr
