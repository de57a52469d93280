#pragma once

#include <vector>

#include "qesr/covariance.hpp"
#include "qesr/fit.hpp"
#include "qesr/types.hpp"

namespace qesr {

// Splits design columns into maintained (W) and tested (Z) sets. Always a
// full disjoint cover of 0..p-1 with the intercept kept in W.
struct Partition {
  std::vector<int> w_cols;
  std::vector<int> z_cols;

  void validate(Eigen::Index p) const;
  static Partition from_z(Eigen::Index p, const std::vector<int>& z_cols);
};

// Residualizes Z on W in the G-weighted inner product:
// Z* = Z - W (W'GW)^{-1} W'G Z, so that W'G Z* = 0.
Matrix orthogonalize(const Matrix& w, const Matrix& z, const Vector& g);

struct ScoreTestResult {
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
  Vector s_n;
  Matrix sigma;
  PsiKind psi_kind = PsiKind::IID;
  bool degenerate = false;  // pseudo-inverse convention was used
};

// Reusable, hypothesis-independent pieces of the score machinery for one
// fitted pipeline and partition (weights at the full fit, pseudo-responses,
// orthogonalized Z). Only the restricted fitted values change with the
// hypothesized coefficient value.
struct ScoreParts {
  const TwoStepFit* fit = nullptr;
  Partition part;
  Matrix w_mat, z_mat, zstar;
  Vector g, c, phi;
};

ScoreParts make_score_parts(const TwoStepFit& fit, const Partition& part);

// Restricted fitted values under H0: theta_Z = 0, or, when offset_col >= 0,
// under H0: theta_{offset_col} = offset_value with the rest of Z absent.
Vector restricted_fitted(const ScoreParts& parts, double offset_value = 0.0,
                         int offset_col = -1);

ScoreTestResult score_eval(const ScoreParts& parts, const PsiEstimate& psi,
                           const Vector& restricted_fitted_values);

// Self-contained surface: fits both steps on lower-tail data and evaluates
// the score test of H0: theta_Z^e = 0. psi must come from the same
// residuals (they are shift-invariant).
ScoreTestResult score_statistic(const Dataset& lower_data,
                                const Partition& part, TauLevel tau,
                                const SpecFunctions& spec,
                                const PsiEstimate& psi);

struct WaldTestResult {
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
  double z = 0.0;  // signed z statistic; populated only when df == 1
};

// Quadratic-form Wald test of theta_Z^e = 0 from a covariance estimate and
// the user-scale coefficients.
WaldTestResult wald_test(const CovarianceEstimate& cov,
                         const Vector& theta_e_user, const Partition& part);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double length() const { return hi - lo; }
  bool contains(double v) const { return lo <= v && v <= hi; }
};

Interval wald_ci(const CovarianceEstimate& cov, const Vector& theta_e_user,
                 int col, double level);

struct ScoreCiOptions {
  double t_tol = 1e-4;         // bisection tolerance on the coefficient
  int max_depth = 60;          // bisection depth per endpoint
  int scan_max_widths = 10;    // scan out to this many Wald half-widths
};

struct ScoreCiResult {
  Interval interval;  // user scale
  int refits = 0;     // restricted refits spent
};

// Confidence interval for one non-intercept coefficient by inverting the
// score test over hypothesized values, bisecting between accepted and
// rejected points found on a Wald-width scan grid.
ScoreCiResult score_ci(const TwoStepFit& fit, int col, const PsiEstimate& psi,
                       double level, const ScoreCiOptions& opts = {});

}  // namespace qesr
