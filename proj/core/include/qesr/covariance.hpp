#pragma once

#include <cstdint>

#include "qesr/es.hpp"
#include "qesr/fit.hpp"
#include "qesr/quantile.hpp"
#include "qesr/spec_functions.hpp"
#include "qesr/types.hpp"

namespace qesr {

enum class PsiKind { IID, NID };

// Estimate of the tail-conditional residual variance psi(X) = Var(u | u <= 0, X).
struct PsiEstimate {
  PsiKind kind = PsiKind::IID;
  Vector per_obs;   // one value per observation (constant for IID)
  int clamped = 0;  // negative quadrature variances clamped to zero
  // Rows where the fitted truncation probability was negligible, so the
  // conditional model carries no information there and the pooled
  // (homogeneous) tail variance is used instead.
  int fallback_rows = 0;

  // NID nuisance pieces (empty for IID).
  Vector alpha;
  Vector nu;
  Vector std_residuals;
  double bandwidth = 0.0;
};

// Homogeneous variant: unbiased sample variance of the residuals <= 0.
PsiEstimate psi_iid(const Vector& residuals);

struct PsiNidOptions {
  int quad_points = 512;     // trapezoid nodes per observation
  double tail_mult = 8.0;    // integration reaches mu_i - tail_mult * sigma_i
  int grid_size = 4096;      // density/CDF lookup table resolution
  int max_outer = 100;       // location-scale coordinate sweeps
  // Fitted truncation probability below which the conditional model is
  // treated as uninformative at that row; the pooled tail variance is used
  // for such rows. Under a correct quantile model the true probability is
  // tau at every design point, so values this small always indicate an
  // auxiliary-model artifact (leverage points at small n), not a feature.
  double mass_floor = 1e-3;
};

// Heterogeneous variant: Gaussian quasi-ML location-scale model
// u = X'alpha + (X'nu) * eps, kernel density of the standardized residuals,
// then per-observation truncated variances by trapezoidal quadrature.
PsiEstimate psi_nid(const Dataset& data, const Vector& residuals,
                    TauLevel tau, const PsiNidOptions& opts = {});

// Sandwich pieces on the internal (shifted, lower-tail) scale.
Matrix lambda_hat(const Dataset& data, const ESFit& es,
                  const SpecFunctions& spec);
Matrix omega_hat(const Dataset& data, const QuantileFit& qfit, const ESFit& es,
                 const PsiEstimate& psi, TauLevel tau,
                 const SpecFunctions& spec);

enum class CovMethod { WaldIID, WaldNID, Bootstrap };

struct CovarianceEstimate {
  CovMethod method = CovMethod::WaldIID;
  Matrix lambda;  // empty for Bootstrap
  Matrix omega;   // empty for Bootstrap
  Matrix cov;     // covariance of theta_e-hat (already divided by n)
  Eigen::Index n = 0;
  int dropped_replicates = 0;
};

CovarianceEstimate sandwich_cov(const Matrix& lambda, const Matrix& omega,
                                Eigen::Index n,
                                CovMethod method = CovMethod::WaldIID);

// Convenience: full sandwich for a fitted pipeline with a given psi.
CovarianceEstimate sandwich_for(const TwoStepFit& fit, const PsiEstimate& psi);

// Pairs bootstrap of the two-step estimator on lower-tail data. Replicate b
// draws rows with its own stream (seed, b); failed refits are dropped, and
// more than 10% drops is an error.
CovarianceEstimate bootstrap_cov(const Dataset& lower_data, TauLevel tau,
                                 const SpecFunctions& spec, int B,
                                 std::uint64_t seed, int threads = 1);

}  // namespace qesr
