#pragma once

#include "qesr/types.hpp"

namespace qesr {

struct QuantileOptions {
  // Relative duality-gap tolerance; tighter than the 1e-8 contract so
  // coefficients, not just the objective, are reliable to ~1e-8.
  double gap_tol_rel = 1e-10;
  int max_iterations = 200;
};

struct QuantileFit {
  Vector theta_q;
  Vector residuals;  // y - X theta_q
  int iterations = 0;
  bool converged = false;
  double duality_gap = 0.0;
  double objective = 0.0;  // pinball sum at theta_q
};

double pinball_objective(const Dataset& data, const Vector& theta,
                         double tau);

// Linear quantile regression by a primal-dual interior point method on the
// bounded-variable LP dual. Expects a lower-tail level; upper-tail problems
// go through negate_tail first.
QuantileFit fit_quantile(const Dataset& data, TauLevel tau,
                         const QuantileOptions& opts = {});

}  // namespace qesr
