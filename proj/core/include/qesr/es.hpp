#pragma once

#include <utility>

#include "qesr/quantile.hpp"
#include "qesr/spec_functions.hpp"
#include "qesr/types.hpp"

namespace qesr {

// Response translation that keeps every fitted value negative for the
// logneg family: working y = y - (max(y) + 1) <= -1.
std::pair<Dataset, double> apply_shift(const Dataset& data);

// Undoes apply_shift on the intercept entry only.
Vector unshift(const Vector& theta, double shift);

struct ESOptions {
  double grad_tol_rel = 1e-8;   // on the mean gradient, scaled by 1+|theta|
  double feas_margin = 1e-8;    // fitted values stay below -feas_margin
  int max_iterations = 200;
  int max_halvings = 60;
};

struct ESFit {
  Vector theta_e;           // user scale: shift added back to the intercept
  Vector theta_e_internal;  // on the shifted response scale
  double shift = 0.0;
  double gradient_norm = 0.0;  // ||mean plug-in gradient|| at the solution
  int iterations = 0;
  SpecFamily family = SpecFamily::LogNeg;
  Eigen::Index tail_count = 0;  // observations with y <= fitted quantile
};

// Minimizes the plug-in shortfall loss for fixed pseudo-responses c over
// coefficients of `design`, with fitted values design*theta + offset.
// Constant family solves the normal equations; logneg runs damped Newton
// from the constant-family start, keeping iterates strictly feasible.
struct PluginSolution {
  Vector theta;
  double gradient_norm = 0.0;
  int iterations = 0;
};
PluginSolution fit_es_plugin(const Matrix& design, const Vector& c,
                             const SpecFunctions& spec,
                             const Vector& offset = Vector(),
                             const ESOptions& opts = {});

// Second step of the two-step estimator: builds pseudo-responses from the
// quantile fit on the same (already shifted) data and minimizes the plug-in
// loss. `shift` is echoed into the result for unshifting.
ESFit fit_es_two_step(const Dataset& shifted_data, TauLevel tau,
                      const SpecFunctions& spec, const QuantileFit& qfit,
                      double shift, const ESOptions& opts = {});

struct JointOptions {
  double spread_tol = 1e-8;  // relative simplex objective spread
  long max_evaluations = 50000;
};

struct JointFit {
  Vector theta_q;
  Vector theta_e;
  double objective = 0.0;
  long evaluations = 0;
};

// Derivative-free minimizer of the summed joint loss over (theta_q, theta_e),
// started from `init`. Used as the one-step oracle the two-step estimator is
// checked against; not part of the production pipeline.
JointFit fit_joint_one_step(const Dataset& data, TauLevel tau,
                            const SpecFunctions& spec, const Theta& init,
                            const JointOptions& opts = {});

}  // namespace qesr
