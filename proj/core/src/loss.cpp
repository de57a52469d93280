#include "qesr/loss.hpp"

#include <cmath>
#include <string>

namespace qesr {

double pseudo_response(double y, double q, double tau) {
  const double ind = y <= q ? 1.0 : 0.0;
  return q - (q - y) * ind / tau;
}

double plugin_loss(double y, double q, double m, double tau,
                   const SpecFunctions& spec) {
  const double c = pseudo_response(y, q, tau);
  return spec.g2(m) * (m - c) - spec.g2_antideriv(m);
}

double joint_loss(double y, double q, double m, double tau,
                  const SpecFunctions& spec) {
  const double ind = y <= q ? 1.0 : 0.0;
  return (ind - tau) * q - ind * y + plugin_loss(y, q, m, tau, spec);
}

Vector plugin_gradient(double y, const Vector& x, double q, double m,
                       double tau, const SpecFunctions& spec) {
  const double c = pseudo_response(y, q, tau);
  return x * (spec.g2_prime(m) * (m - c));
}

namespace {
template <typename F>
double sum_rows(const Dataset& data, const Vector& theta_q,
                const Vector& theta_e, F&& pointwise) {
  data.validate();
  if (theta_q.size() != data.p() || theta_e.size() != data.p()) {
    throw InvalidInputError("coefficient length does not match design");
  }
  const Vector q = data.X * theta_q;
  const Vector m = data.X * theta_e;
  double total = 0.0;
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    try {
      total += pointwise(data.y[i], q[i], m[i]);
    } catch (const DomainError& e) {
      throw DomainError("row " + std::to_string(i) + ": " + e.what());
    }
  }
  return total;
}
}  // namespace

double sum_plugin_loss(const Dataset& data, const Vector& theta_q,
                       const Vector& theta_e, double tau,
                       const SpecFunctions& spec) {
  return sum_rows(data, theta_q, theta_e, [&](double y, double q, double m) {
    return plugin_loss(y, q, m, tau, spec);
  });
}

double sum_joint_loss(const Dataset& data, const Vector& theta_q,
                      const Vector& theta_e, double tau,
                      const SpecFunctions& spec) {
  return sum_rows(data, theta_q, theta_e, [&](double y, double q, double m) {
    return joint_loss(y, q, m, tau, spec);
  });
}

std::pair<Dataset, TauLevel> negate_tail(const Dataset& data, TauLevel tau) {
  tau.validate();
  data.validate();
  Dataset flipped = data;
  flipped.y = -data.y;
  TauLevel mapped{1.0 - tau.tau,
                  tau.tail == Tail::Upper ? Tail::Lower : Tail::Upper};
  return {std::move(flipped), mapped};
}

}  // namespace qesr
