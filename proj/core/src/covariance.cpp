#include "qesr/covariance.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "qesr/parallel.hpp"
#include "qesr/rng.hpp"
#include "qesr/special.hpp"

namespace qesr {

PsiEstimate psi_iid(const Vector& residuals) {
  std::vector<double> tail;
  tail.reserve(residuals.size());
  // Interpolated observations carry solver noise instead of exact zeros;
  // a scale-aware tolerance keeps them in the tail where they belong.
  const double tol =
      residuals.size() > 0 ? 1e-8 * (1.0 + residuals.cwiseAbs().maxCoeff())
                           : 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) {
    if (residuals[i] <= tol) tail.push_back(residuals[i]);
  }
  const std::size_t k = tail.size();
  if (k < 2) {
    throw SmallTailError("fewer than 2 non-positive residuals for psi");
  }
  double mean = 0.0;
  for (double v : tail) mean += v;
  mean /= static_cast<double>(k);
  double ss = 0.0;
  for (double v : tail) ss += (v - mean) * (v - mean);
  const double value = ss / static_cast<double>(k - 1);

  PsiEstimate psi;
  psi.kind = PsiKind::IID;
  psi.per_obs = Vector::Constant(residuals.size(), value);
  return psi;
}

namespace {

// Gaussian quasi-likelihood for u = X'alpha + (X'nu) eps, fitted by
// alternating a weighted least-squares alpha step with a damped Newton nu
// step that keeps every fitted scale strictly positive.
struct LocationScaleFit {
  Vector alpha;
  Vector nu;
  Vector mu;     // X alpha
  Vector sigma;  // X nu, all > 0
};

double scale_objective(const Vector& r, const Vector& sigma) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    total += std::log(sigma[i]) + 0.5 * r[i] * r[i] / (sigma[i] * sigma[i]);
  }
  return total;
}

LocationScaleFit fit_location_scale(const Matrix& X, const Vector& u,
                                    int max_outer) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();

  auto weighted_alpha = [&](const Vector& sigma) {
    const Vector w = sigma.array().square().inverse().matrix();
    Matrix lhs = X.transpose() * w.asDiagonal() * X;
    Eigen::LLT<Matrix> llt(lhs);
    if (llt.info() != Eigen::Success) {
      throw SingularDesignError("location step normal equations singular");
    }
    return Vector(llt.solve(X.transpose() * (w.asDiagonal() * u)));
  };

  Vector alpha;
  {
    Eigen::LLT<Matrix> llt(Matrix(X.transpose() * X));
    if (llt.info() != Eigen::Success) {
      throw SingularDesignError("location-scale design is singular");
    }
    alpha = llt.solve(X.transpose() * u);
  }
  Vector r = u - X * alpha;
  const double s0 = std::sqrt(r.squaredNorm() / static_cast<double>(n));
  if (!(s0 > 0.0)) {
    throw ScaleError("residual scale is zero in the location-scale model");
  }
  // The Gaussian quasi-likelihood with a per-observation scale is unbounded
  // below: driving one fitted scale to zero at a nearly interpolated point
  // sends the objective to -inf and the curvature conditioning past 1e15.
  // A relative floor keeps the M-estimator well posed; it sits far beneath
  // any scale ratio the model can express at these sample sizes.
  const double floor_s = 1e-3 * s0;
  Vector nu = Vector::Zero(p);
  nu[0] = s0;
  Vector sigma = X * nu;

  double obj = scale_objective(r, sigma);
  for (int outer = 0; outer < max_outer; ++outer) {
    // nu step: Newton on sum(log s + r^2/(2 s^2)), s = X nu.
    for (int inner = 0; inner < 50; ++inner) {
      Vector gw(n), hw(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double s = sigma[i];
        const double rr = r[i] * r[i];
        gw[i] = 1.0 / s - rr / (s * s * s);
        hw[i] = -1.0 / (s * s) + 3.0 * rr / (s * s * s * s);
      }
      const Vector grad = X.transpose() * gw;
      if (grad.norm() <= 1e-10 * static_cast<double>(n)) break;
      Matrix H = X.transpose() * hw.asDiagonal() * X;
      Eigen::LLT<Matrix> llt(H);
      Vector dir;
      if (llt.info() == Eigen::Success) {
        dir = llt.solve(-grad);
      } else {
        // Surrogate curvature 2/s^2, positive by construction.
        Vector hs = 2.0 * sigma.array().square().inverse();
        llt.compute(Matrix(X.transpose() * hs.asDiagonal() * X));
        if (llt.info() == Eigen::Success) {
          dir = llt.solve(-grad);
        } else {
          dir = -grad;
        }
      }
      if (!(grad.dot(dir) < 0.0)) dir = -grad;
      double alpha_step = 1.0;
      bool stepped = false;
      for (int h = 0; h < 60; ++h) {
        const Vector cand = nu + alpha_step * dir;
        const Vector sc = X * cand;
        if ((sc.array() > floor_s).all()) {
          const double oc = scale_objective(r, sc);
          if (oc <= obj + 1e-4 * alpha_step * grad.dot(dir)) {
            nu = cand;
            sigma = sc;
            obj = oc;
            stepped = true;
            break;
          }
        }
        alpha_step *= 0.5;
      }
      if (!stepped) break;
    }

    // alpha step given sigma; converged when the sweep stops moving.
    const Vector alpha_new = weighted_alpha(sigma);
    const double move = (alpha_new - alpha).norm();
    alpha = alpha_new;
    r = u - X * alpha;
    const double obj_new = scale_objective(r, sigma);
    const bool settled =
        move <= 1e-10 * (1.0 + alpha.norm()) &&
        std::fabs(obj - obj_new) <= 1e-12 * (1.0 + std::fabs(obj_new));
    obj = obj_new;
    if (settled) break;
  }

  if (!(sigma.array() > 0.0).all()) {
    throw ScaleError("location-scale model produced a non-positive scale");
  }
  return {alpha, nu, X * alpha, sigma};
}

// Kernel density of the standardized residuals with a lookup table for the
// density and its CDF; direct Gaussian sums are only paid once per grid node.
struct KdeTable {
  double lo = 0.0, step = 0.0;
  std::vector<double> pdf, cdf;

  double density(double t) const {
    const double pos = (t - lo) / step;
    if (pos <= 0.0) return pdf.front();
    const auto last = static_cast<double>(pdf.size() - 1);
    if (pos >= last) return pdf.back();
    const auto k = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(k);
    return pdf[k] + frac * (pdf[k + 1] - pdf[k]);
  }
  double cumulative(double t) const {
    const double pos = (t - lo) / step;
    if (pos <= 0.0) return cdf.front();
    const auto last = static_cast<double>(cdf.size() - 1);
    if (pos >= last) return cdf.back();
    const auto k = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(k);
    return cdf[k] + frac * (cdf[k + 1] - cdf[k]);
  }
};

KdeTable build_kde_table(const Vector& eps, double h, double t_min,
                         double t_max, int grid_size) {
  KdeTable tab;
  const double lo = std::min(t_min, eps.minCoeff() - 6.0 * h) - 1e-9;
  const double hi = std::max(t_max, eps.maxCoeff() + 6.0 * h) + 1e-9;
  tab.lo = lo;
  tab.step = (hi - lo) / static_cast<double>(grid_size - 1);
  tab.pdf.resize(grid_size);
  tab.cdf.resize(grid_size);
  const double n = static_cast<double>(eps.size());
  for (int k = 0; k < grid_size; ++k) {
    const double t = lo + k * tab.step;
    double acc = 0.0;
    for (Eigen::Index j = 0; j < eps.size(); ++j) {
      acc += normal_pdf((t - eps[j]) / h);
    }
    tab.pdf[k] = acc / (n * h);
  }
  // Exact smoothed CDF at the left edge, trapezoid accumulation after.
  double c0 = 0.0;
  for (Eigen::Index j = 0; j < eps.size(); ++j) {
    c0 += normal_cdf((lo - eps[j]) / h);
  }
  tab.cdf[0] = c0 / n;
  for (int k = 1; k < grid_size; ++k) {
    tab.cdf[k] =
        tab.cdf[k - 1] + 0.5 * (tab.pdf[k - 1] + tab.pdf[k]) * tab.step;
  }
  return tab;
}

double sample_sd(const Vector& v) {
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() /
                   static_cast<double>(v.size() - 1));
}

double quantile_type7(std::vector<double> sorted, double prob) {
  const double idx = prob * static_cast<double>(sorted.size() - 1);
  const auto k = static_cast<std::size_t>(idx);
  if (k + 1 >= sorted.size()) return sorted.back();
  const double frac = idx - static_cast<double>(k);
  return sorted[k] + frac * (sorted[k + 1] - sorted[k]);
}

}  // namespace

PsiEstimate psi_nid(const Dataset& data, const Vector& residuals,
                    TauLevel tau, const PsiNidOptions& opts) {
  data.validate();
  tau.validate();
  if (tau.tail != Tail::Lower) {
    throw InvalidInputError("psi_nid expects the internal lower-tail scale");
  }
  if (residuals.size() != data.n()) {
    throw InvalidInputError("residual length does not match the data");
  }
  const Eigen::Index n = data.n();

  LocationScaleFit ls = fit_location_scale(data.X, residuals, opts.max_outer);
  Vector eps(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    eps[i] = (residuals[i] - ls.mu[i]) / ls.sigma[i];
  }

  const double sd = sample_sd(eps);
  std::vector<double> sorted(eps.data(), eps.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const double iqr =
      quantile_type7(sorted, 0.75) - quantile_type7(sorted, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd;
  const double h =
      0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  if (!(h > 0.0)) {
    throw ScaleError("degenerate standardized residuals; zero bandwidth");
  }

  // Thresholds on the standardized scale; the z-interval [mu-8s, 0] maps
  // to [-tail_mult, t0_i].
  Vector t0(n);
  double t_min = -opts.tail_mult, t_max = -opts.tail_mult;
  for (Eigen::Index i = 0; i < n; ++i) {
    t0[i] = -ls.mu[i] / ls.sigma[i];
    t_min = std::min(t_min, t0[i]);
    t_max = std::max(t_max, t0[i]);
  }
  const KdeTable tab =
      build_kde_table(eps, h, t_min, t_max, opts.grid_size);

  PsiEstimate psi;
  psi.kind = PsiKind::NID;
  psi.per_obs = Vector::Zero(n);
  psi.alpha = ls.alpha;
  psi.nu = ls.nu;
  psi.std_residuals = eps;
  psi.bandwidth = h;

  double pooled = -1.0;
  const auto pooled_tail_variance = [&]() {
    if (pooled < 0.0) pooled = psi_iid(residuals).per_obs[0];
    return pooled;
  };

  const int nq = opts.quad_points;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mass = tab.cumulative(t0[i]);
    const double z_lo = ls.mu[i] - opts.tail_mult * ls.sigma[i];
    const double z_hi = 0.0;
    if (mass < opts.mass_floor || z_lo >= z_hi) {
      psi.per_obs[i] = pooled_tail_variance();
      ++psi.fallback_rows;
      continue;
    }
    const double dz = (z_hi - z_lo) / static_cast<double>(nq - 1);
    double m1 = 0.0, m2 = 0.0;
    for (int k = 0; k < nq; ++k) {
      const double z = z_lo + k * dz;
      const double t = (z - ls.mu[i]) / ls.sigma[i];
      const double hz = tab.density(t) / (ls.sigma[i] * mass);
      const double w = (k == 0 || k == nq - 1) ? 0.5 : 1.0;
      m1 += w * z * hz;
      m2 += w * z * z * hz;
    }
    m1 *= dz;
    m2 *= dz;
    double v = m2 - m1 * m1;
    if (v < 0.0) {
      v = 0.0;
      ++psi.clamped;
    }
    psi.per_obs[i] = v;
  }
  return psi;
}

Matrix lambda_hat(const Dataset& data, const ESFit& es,
                  const SpecFunctions& spec) {
  data.validate();
  if (es.theta_e_internal.size() != data.p()) {
    throw InvalidInputError("shortfall fit does not match the design");
  }
  const Vector m = data.X * es.theta_e_internal;
  Vector w(data.n());
  for (Eigen::Index i = 0; i < data.n(); ++i) w[i] = spec.g2_prime(m[i]);
  return (data.X.transpose() * w.asDiagonal() * data.X) /
         static_cast<double>(data.n());
}

Matrix omega_hat(const Dataset& data, const QuantileFit& qfit, const ESFit& es,
                 const PsiEstimate& psi, TauLevel tau,
                 const SpecFunctions& spec) {
  data.validate();
  tau.validate();
  if (qfit.theta_q.size() != data.p() ||
      es.theta_e_internal.size() != data.p()) {
    throw InvalidInputError("fits do not match the design");
  }
  if (psi.per_obs.size() != data.n()) {
    throw InvalidInputError("psi estimate does not match the data");
  }
  if ((psi.per_obs.array() < 0.0).any()) {
    throw InvalidInputError(
        "psi estimate has negative entries; tail variances must be >= 0");
  }
  const Vector q = data.X * qfit.theta_q;
  const Vector m = data.X * es.theta_e_internal;
  const double t = tau.tau;
  Vector w(data.n());
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    const double gp = spec.g2_prime(m[i]);
    const double phi = q[i] - m[i];
    w[i] = gp * gp * (psi.per_obs[i] / t + (1.0 - t) / t * phi * phi);
  }
  return (data.X.transpose() * w.asDiagonal() * data.X) /
         static_cast<double>(data.n());
}

CovarianceEstimate sandwich_cov(const Matrix& lambda, const Matrix& omega,
                                Eigen::Index n, CovMethod method) {
  if (lambda.rows() != lambda.cols() || omega.rows() != omega.cols() ||
      lambda.rows() != omega.rows()) {
    throw InvalidInputError("sandwich pieces have mismatched shapes");
  }
  if (n <= 0) throw InvalidInputError("sandwich needs n > 0");
  Eigen::LLT<Matrix> llt(lambda);
  if (llt.info() != Eigen::Success) {
    throw SingularDesignError("lambda is not positive definite");
  }
  const Matrix li_omega = llt.solve(omega);
  Matrix cov = llt.solve(li_omega.transpose()).transpose() /
               static_cast<double>(n);
  cov = ((cov + cov.transpose()) / 2.0).eval();

  CovarianceEstimate est;
  est.method = method;
  est.lambda = lambda;
  est.omega = omega;
  est.cov = std::move(cov);
  est.n = n;
  return est;
}

CovarianceEstimate sandwich_for(const TwoStepFit& fit,
                                const PsiEstimate& psi) {
  const Matrix lam = lambda_hat(fit.internal_data, fit.esfit, fit.spec);
  const Matrix om = omega_hat(fit.internal_data, fit.qfit, fit.esfit, psi,
                              fit.internal_tau, fit.spec);
  return sandwich_cov(lam, om, fit.internal_data.n(),
                      psi.kind == PsiKind::NID ? CovMethod::WaldNID
                                               : CovMethod::WaldIID);
}

CovarianceEstimate bootstrap_cov(const Dataset& lower_data, TauLevel tau,
                                 const SpecFunctions& spec, int B,
                                 std::uint64_t seed, int threads) {
  lower_data.validate();
  tau.validate();
  if (tau.tail != Tail::Lower) {
    throw InvalidInputError(
        "bootstrap_cov works on lower-tail data; apply negate_tail first");
  }
  if (B < 50) {
    throw InvalidInputError("bootstrap needs B >= 50, got " +
                            std::to_string(B));
  }
  const Eigen::Index n = lower_data.n();
  const Eigen::Index p = lower_data.p();

  std::vector<Vector> reps(B);
  std::vector<char> ok(B, 0);
  parallel_for(B, threads, [&](int b) {
    RngStream rng(seed, static_cast<std::uint64_t>(b));
    Dataset sample;
    sample.y.resize(n);
    sample.X.resize(n, p);
    sample.column_names = lower_data.column_names;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto idx =
          static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
      sample.y[i] = lower_data.y[idx];
      sample.X.row(i) = lower_data.X.row(idx);
    }
    try {
      TwoStepFit refit = fit_two_step(sample, tau, spec);
      reps[b] = refit.theta.theta_e;
      ok[b] = 1;
    } catch (const Error&) {
      ok[b] = 0;
    }
  });

  int kept = 0;
  Vector mean = Vector::Zero(p);
  for (int b = 0; b < B; ++b) {
    if (ok[b]) {
      mean += reps[b];
      ++kept;
    }
  }
  const int dropped = B - kept;
  if (10 * dropped > B) {
    throw BootstrapInstabilityError(
        std::to_string(dropped) + " of " + std::to_string(B) +
        " bootstrap replicates failed to refit");
  }
  if (kept < 2) throw BootstrapInstabilityError("too few bootstrap replicates");
  mean /= static_cast<double>(kept);
  Matrix cov = Matrix::Zero(p, p);
  for (int b = 0; b < B; ++b) {
    if (!ok[b]) continue;
    const Vector d = reps[b] - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(kept - 1);

  CovarianceEstimate est;
  est.method = CovMethod::Bootstrap;
  est.cov = std::move(cov);
  est.n = n;
  est.dropped_replicates = dropped;
  return est;
}

}  // namespace qesr
