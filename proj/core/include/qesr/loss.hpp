#pragma once

#include <utility>

#include "qesr/spec_functions.hpp"
#include "qesr/types.hpp"

namespace qesr {

// Pointwise pieces of the joint consistent score. q = x'theta_q and
// m = x'theta_e are the fitted quantile and shortfall; the indicator is
// closed at equality, I(y <= q).

// Pseudo-response c = q - (q - y) * I(y <= q) / tau. Averages to the fitted
// tail mean when theta_q is the sample tau-quantile fit.
double pseudo_response(double y, double q, double tau);

// Shortfall-only (plug-in) loss: g2(m) * (m - c) - g2_antideriv(m).
double plugin_loss(double y, double q, double m, double tau,
                   const SpecFunctions& spec);

// Full joint loss; adds the pinball part (I - tau) * q - I * y.
double joint_loss(double y, double q, double m, double tau,
                  const SpecFunctions& spec);

// Gradient of plugin_loss in theta_e: x * g2_prime(m) * (m - c).
Vector plugin_gradient(double y, const Vector& x, double q, double m,
                       double tau, const SpecFunctions& spec);

// Dataset-level sums; domain violations are rethrown naming the row.
double sum_plugin_loss(const Dataset& data, const Vector& theta_q,
                       const Vector& theta_e, double tau,
                       const SpecFunctions& spec);
double sum_joint_loss(const Dataset& data, const Vector& theta_q,
                      const Vector& theta_e, double tau,
                      const SpecFunctions& spec);

// Maps an upper-tail problem onto the lower-tail machinery: y -> -y and
// tau -> 1 - tau with the tail flag flipped. Applying it twice is the
// identity. Coefficients fitted on the mapped data are negated back.
std::pair<Dataset, TauLevel> negate_tail(const Dataset& data, TauLevel tau);

}  // namespace qesr
