#include "qesr/spec_functions.hpp"

#include <cmath>

namespace qesr {

namespace {
[[noreturn]] void domain_violation(double z) {
  throw DomainError("logneg family needs a negative argument, got " +
                    std::to_string(z));
}
}  // namespace

double SpecFunctions::g2(double z) const {
  if (family == SpecFamily::Constant) return z;
  if (!(z < 0.0)) domain_violation(z);
  return -1.0 / z;
}

double SpecFunctions::g2_prime(double z) const {
  if (family == SpecFamily::Constant) return 1.0;
  if (!(z < 0.0)) domain_violation(z);
  return 1.0 / (z * z);
}

double SpecFunctions::g2_antideriv(double z) const {
  if (family == SpecFamily::Constant) return 0.5 * z * z;
  if (!(z < 0.0)) domain_violation(z);
  return -std::log(-z);
}

bool SpecFunctions::in_domain(double z) const {
  if (family == SpecFamily::Constant) return std::isfinite(z);
  return std::isfinite(z) && z < 0.0;
}

std::string SpecFunctions::name() const {
  return family == SpecFamily::Constant ? "const" : "logneg";
}

SpecFunctions SpecFunctions::from_name(const std::string& name) {
  if (name == "const") return constant();
  if (name == "logneg") return log_neg();
  throw InvalidInputError("unknown family '" + name +
                          "' (expected const or logneg)");
}

}  // namespace qesr
