#include "qesr/quantile.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace qesr {

namespace {

constexpr double kBeta = 0.99995;  // fraction of the step to the boundary
constexpr double kBig = 1e20;

std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

void check_rank(const Matrix& X) {
  Eigen::ColPivHouseholderQR<Matrix> qr(X);
  if (qr.rank() < X.cols()) {
    throw SingularDesignError("design matrix is rank deficient (rank " +
                              std::to_string(qr.rank()) + " of " +
                              std::to_string(X.cols()) + " columns)");
  }
}

}  // namespace

double pinball_objective(const Dataset& data, const Vector& theta,
                         double tau) {
  const Vector r = data.y - data.X * theta;
  double total = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    total += r[i] * (tau - (r[i] < 0.0 ? 1.0 : 0.0));
  }
  return total;
}

QuantileFit fit_quantile(const Dataset& data, TauLevel tau,
                         const QuantileOptions& opts) {
  data.validate();
  tau.validate();
  if (tau.tail != Tail::Lower) {
    throw InvalidInputError(
        "fit_quantile works on the lower tail; apply negate_tail first");
  }
  check_rank(data.X);

  const Eigen::Index n = data.n();
  const Matrix& X = data.X;

  // Exact-interpolation data makes the LP initialization divide by zero
  // residuals; the least-squares fit is already the answer there.
  Vector beta_ls = X.colPivHouseholderQr().solve(data.y);
  Vector res_ls = data.y - X * beta_ls;
  const double y_scale = 1.0 + data.y.cwiseAbs().maxCoeff();
  if (res_ls.cwiseAbs().maxCoeff() <= 1e-12 * y_scale) {
    QuantileFit fit;
    fit.theta_q = std::move(beta_ls);
    fit.residuals = std::move(res_ls);
    fit.converged = true;
    fit.objective = pinball_objective(data, fit.theta_q, tau.tau);
    return fit;
  }

  // Bounded-variable LP: min c'a s.t. X'a = rhs, 0 <= a <= 1, with
  // c = -y and rhs = (1-tau) X'1. The equality multipliers y_mult give the
  // regression coefficients as beta = -y_mult.
  const Vector c = -data.y;
  const Vector rhs = (1.0 - tau.tau) * (X.transpose() * Vector::Ones(n));

  Vector a = Vector::Constant(n, 1.0 - tau.tau);
  Vector s = Vector::Constant(n, tau.tau);
  Vector y_mult = -beta_ls;  // least-squares start for the multipliers
  Vector r0 = c - X * y_mult;
  Vector z(n), w(n);
  const double eps0 = 1e-10;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double pad = std::fabs(r0[i]) < eps0 ? eps0 : 0.0;
    z[i] = std::max(r0[i], 0.0) + pad;
    w[i] = std::max(-r0[i], 0.0) + pad;
  }

  auto gap_of = [&] { return z.dot(a) + w.dot(s); };
  auto obj_of = [&] { return pinball_objective(data, -y_mult, tau.tau); };

  double gap = gap_of();
  double obj = obj_of();
  const auto tol = [&](double f) { return opts.gap_tol_rel * (1.0 + std::fabs(f)); };

  QuantileFit fit;
  int it = 0;
  int stalled = 0;
  Eigen::LLT<Matrix> llt;
  while (gap > tol(obj) && it < opts.max_iterations) {
    ++it;
    const double gap_before = gap;
    const Vector d = (z.array() / a.array() + w.array() / s.array())
                         .inverse()
                         .matrix();
    const Vector rp = rhs - X.transpose() * a;
    const Vector rd = c - X * y_mult - z + w;

    // Predictor: Newton step toward mu = 0.
    Matrix ada = X.transpose() * d.asDiagonal() * X;
    llt.compute(ada);
    if (llt.info() != Eigen::Success) {
      if (gap <= 1e-6 * (1.0 + std::fabs(obj))) break;
      throw NonConvergenceError(
          "interior point normal equations lost positive definiteness",
          to_std(-y_mult));
    }
    const Vector zw = z - w;
    Vector dy = llt.solve(rp + X.transpose() * (d.asDiagonal() * (zw + rd)));
    Vector dx = d.asDiagonal() * (X * dy - zw - rd);
    Vector ds = -dx;
    Vector dz = -z - (z.array() / a.array() * dx.array()).matrix();
    Vector dw = -w + (w.array() / s.array() * dx.array()).matrix();

    auto ratio = [](const Vector& v, const Vector& dv) {
      double m = kBig;
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (dv[i] < 0.0) m = std::min(m, -v[i] / dv[i]);
      }
      return m;
    };
    double deltap = kBeta * std::min(ratio(a, dx), ratio(s, ds));
    double deltad = kBeta * std::min(ratio(z, dz), ratio(w, dw));

    if (std::min(deltap, deltad) < 1.0) {
      // Mehrotra corrector reusing the factorization.
      const double mu_aff = (a + deltap * dx).dot(z + deltad * dz) +
                            (s + deltap * ds).dot(w + deltad * dw);
      const double mu = gap * std::pow(mu_aff / gap, 3) / (2.0 * n);
      const Vector prod_az = (dx.array() * dz.array()).matrix();
      const Vector prod_sw = (ds.array() * dw.array()).matrix();
      const Vector dr = ((mu - prod_az.array()) / a.array() -
                         (mu - prod_sw.array()) / s.array())
                            .matrix();
      dy = llt.solve(rp + X.transpose() * (d.asDiagonal() * (zw - dr + rd)));
      dx = d.asDiagonal() * (X * dy - zw + dr - rd);
      ds = -dx;
      dz = ((mu - prod_az.array()) / a.array() - z.array() -
            z.array() / a.array() * dx.array())
               .matrix();
      dw = ((mu - prod_sw.array()) / s.array() - w.array() +
            w.array() / s.array() * dx.array())
               .matrix();
      deltap = kBeta * std::min(ratio(a, dx), ratio(s, ds));
      deltad = kBeta * std::min(ratio(z, dz), ratio(w, dw));
    }
    deltap = std::min(deltap, 1.0);
    deltad = std::min(deltad, 1.0);

    a += deltap * dx;
    s += deltap * ds;
    y_mult += deltad * dy;
    z += deltad * dz;
    w += deltad * dw;
    gap = gap_of();
    obj = obj_of();

    // Degenerate data can pin the boundary steps to nearly zero while the
    // gap sits a few ulps above the target; stop pushing once progress dies.
    stalled = gap > 0.95 * gap_before ? stalled + 1 : 0;
    if (stalled >= 10) break;
  }

  fit.theta_q = -y_mult;
  fit.residuals = data.y - X * fit.theta_q;
  fit.iterations = it;
  fit.duality_gap = gap;
  fit.objective = obj;
  fit.converged = gap <= 1e-6 * (1.0 + std::fabs(obj));
  if (!fit.converged) {
    char gap_text[32];
    std::snprintf(gap_text, sizeof(gap_text), "%.3e", gap);
    throw NonConvergenceError("quantile fit stopped after " +
                                  std::to_string(it) + " iterations at gap " +
                                  gap_text,
                              to_std(fit.theta_q));
  }
  return fit;
}

}  // namespace qesr
