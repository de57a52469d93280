#pragma once

#include "qesr/es.hpp"
#include "qesr/quantile.hpp"
#include "qesr/spec_functions.hpp"
#include "qesr/types.hpp"

namespace qesr {

// Full two-step pipeline. Upper-tail requests are mapped onto the lower
// tail internally (y -> -y, tau -> 1-tau); the response is then shifted so
// all working values sit at or below -1, both steps are fitted, and the
// user-scale coefficients are mapped back (intercept unshifted, everything
// negated again for the upper tail). Covariance and score machinery read
// the internal pieces, which live on the shifted lower-tail scale.
struct TwoStepFit {
  Theta theta;        // user scale
  TauLevel tau;       // as requested
  SpecFunctions spec;
  bool negated = false;  // true when the upper-tail map was applied

  Dataset internal_data;  // negated (if upper) and shifted
  TauLevel internal_tau;  // always lower tail
  double shift = 0.0;
  QuantileFit qfit;  // internal scale
  ESFit esfit;       // internal scale (its theta_e is unshifted, not unnegated)
};

TwoStepFit fit_two_step(const Dataset& data, TauLevel tau,
                        const SpecFunctions& spec,
                        const QuantileOptions& qopts = {},
                        const ESOptions& eopts = {});

// Maps a user-scale hypothesis value for one coefficient onto the internal
// scale and an internal interval back to the user scale.
double internal_coefficient_value(const TwoStepFit& fit, int col,
                                  double user_value);
std::pair<double, double> user_interval(const TwoStepFit& fit, int col,
                                        double internal_lo,
                                        double internal_hi);

}  // namespace qesr
