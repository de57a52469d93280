#pragma once

#include <string>

#include "qesr/types.hpp"

namespace qesr {

// Strictly-consistent scoring family for the (quantile, shortfall) pair.
// The quantile part is fixed to the pinball score; the shortfall part is
// parameterized by an increasing convex g2 with antiderivative g2_antideriv.
//   Constant: g2(z) = z,    g2_antideriv(z) = z^2/2,      any z
//   LogNeg:   g2(z) = -1/z, g2_antideriv(z) = -log(-z),   z < 0 only
enum class SpecFamily { Constant, LogNeg };

struct SpecFunctions {
  SpecFamily family = SpecFamily::LogNeg;

  double g2(double z) const;
  double g2_prime(double z) const;
  double g2_antideriv(double z) const;
  bool in_domain(double z) const;
  std::string name() const;  // "const" or "logneg"

  static SpecFunctions constant() { return {SpecFamily::Constant}; }
  static SpecFunctions log_neg() { return {SpecFamily::LogNeg}; }
  static SpecFunctions from_name(const std::string& name);
};

}  // namespace qesr
