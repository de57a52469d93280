#include "qesr/inference.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <string>

#include "qesr/loss.hpp"
#include "qesr/special.hpp"

namespace qesr {

void Partition::validate(Eigen::Index p) const {
  if (z_cols.empty()) throw InvalidInputError("partition has no tested columns");
  std::vector<char> seen(static_cast<std::size_t>(p), 0);
  auto mark = [&](int col, const char* side) {
    if (col < 0 || col >= p) {
      throw InvalidInputError(std::string(side) + " column " +
                              std::to_string(col) + " out of range");
    }
    if (seen[static_cast<std::size_t>(col)]++) {
      throw InvalidInputError("column " + std::to_string(col) +
                              " appears twice in the partition");
    }
  };
  for (int j : w_cols) mark(j, "maintained");
  for (int j : z_cols) mark(j, "tested");
  if (static_cast<Eigen::Index>(w_cols.size() + z_cols.size()) != p) {
    throw InvalidInputError("partition must cover every design column");
  }
  if (std::find(w_cols.begin(), w_cols.end(), 0) == w_cols.end()) {
    throw InvalidInputError("the intercept must stay in the maintained set");
  }
}

Partition Partition::from_z(Eigen::Index p, const std::vector<int>& z_cols) {
  Partition part;
  part.z_cols = z_cols;
  std::vector<char> in_z(static_cast<std::size_t>(p), 0);
  for (int j : z_cols) {
    if (j >= 0 && j < p) in_z[static_cast<std::size_t>(j)] = 1;
  }
  for (Eigen::Index j = 0; j < p; ++j) {
    if (!in_z[static_cast<std::size_t>(j)]) {
      part.w_cols.push_back(static_cast<int>(j));
    }
  }
  part.validate(p);
  return part;
}

Matrix orthogonalize(const Matrix& w, const Matrix& z, const Vector& g) {
  if (w.rows() != z.rows() || g.size() != w.rows()) {
    throw InvalidInputError("orthogonalize inputs have mismatched rows");
  }
  if (!(g.array() > 0.0).all()) {
    throw InvalidInputError("orthogonalize needs strictly positive weights");
  }
  const Matrix wg = g.asDiagonal() * w;  // G W
  Eigen::LLT<Matrix> llt(Matrix(w.transpose() * wg));
  if (llt.info() != Eigen::Success) {
    throw SingularDesignError("W'GW is singular in orthogonalize");
  }
  const Matrix m = llt.solve(wg.transpose() * z);  // (W'GW)^{-1} W'G Z
  return z - w * m;
}

namespace {

Matrix select_columns(const Matrix& X, const std::vector<int>& cols) {
  Matrix out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out.col(static_cast<Eigen::Index>(j)) = X.col(cols[j]);
  }
  return out;
}

}  // namespace

ScoreParts make_score_parts(const TwoStepFit& fit, const Partition& part) {
  const Dataset& data = fit.internal_data;
  part.validate(data.p());

  ScoreParts parts;
  parts.fit = &fit;
  parts.part = part;
  parts.w_mat = select_columns(data.X, part.w_cols);
  parts.z_mat = select_columns(data.X, part.z_cols);

  const Vector m_full = data.X * fit.esfit.theta_e_internal;
  const Vector q = data.X * fit.qfit.theta_q;
  const Eigen::Index n = data.n();
  parts.g.resize(n);
  parts.c.resize(n);
  parts.phi.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    parts.g[i] = fit.spec.g2_prime(m_full[i]);
    parts.c[i] = pseudo_response(data.y[i], q[i], fit.internal_tau.tau);
    parts.phi[i] = q[i] - m_full[i];
  }
  parts.zstar = orthogonalize(parts.w_mat, parts.z_mat, parts.g);
  return parts;
}

Vector restricted_fitted(const ScoreParts& parts, double offset_value,
                         int offset_col) {
  const Dataset& data = parts.fit->internal_data;
  Vector offset;
  if (offset_col >= 0) {
    if (offset_col >= data.p()) {
      throw InvalidInputError("offset column out of range");
    }
    offset = offset_value * data.X.col(offset_col);
  }
  const PluginSolution sol =
      fit_es_plugin(parts.w_mat, parts.c, parts.fit->spec, offset);
  Vector fitted = parts.w_mat * sol.theta;
  if (offset.size() > 0) fitted += offset;
  return fitted;
}

ScoreTestResult score_eval(const ScoreParts& parts, const PsiEstimate& psi,
                           const Vector& restricted_fitted_values) {
  const Dataset& data = parts.fit->internal_data;
  const Eigen::Index n = data.n();
  if (psi.per_obs.size() != n) {
    throw InvalidInputError("psi estimate does not match the data");
  }
  if (restricted_fitted_values.size() != n) {
    throw InvalidInputError("restricted fitted values have the wrong length");
  }
  const double tau = parts.fit->internal_tau.tau;
  const auto p2 = static_cast<int>(parts.part.z_cols.size());

  Vector gb(n), k(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    gb[i] = parts.g[i] * (restricted_fitted_values[i] - parts.c[i]);
    k[i] = parts.g[i] * parts.g[i] *
           (psi.per_obs[i] / tau +
            (1.0 - tau) / tau * parts.phi[i] * parts.phi[i]);
  }
  const Vector s_n = parts.zstar.transpose() * gb / std::sqrt(static_cast<double>(n));
  const Matrix sigma = parts.zstar.transpose() * k.asDiagonal() * parts.zstar /
                       static_cast<double>(n);

  ScoreTestResult res;
  res.s_n = s_n;
  res.sigma = sigma;
  res.df = p2;
  res.psi_kind = psi.kind;

  Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma);
  if (eig.info() != Eigen::Success) {
    throw ConditioningError("score covariance eigendecomposition failed");
  }
  const Vector evals = eig.eigenvalues();
  const Matrix evecs = eig.eigenvectors();
  const double s_scale = 1.0 + s_n.norm();

  double stat = 0.0;
  bool degenerate = false;
  for (int j = 0; j < p2; ++j) {
    const double proj = evecs.col(j).dot(s_n);
    if (evals[j] < 1e-12) {
      // Null directions of the score variance: only tolerable when the
      // score itself vanishes there, otherwise the test is ill-posed.
      if (std::fabs(proj) > 1e-8 * s_scale) {
        throw ConditioningError(
            "score covariance is nearly singular (eigenvalue " +
            std::to_string(evals[j]) + ") with a non-vanishing score");
      }
      degenerate = true;
      continue;
    }
    stat += proj * proj / evals[j];
  }
  res.statistic = stat;
  res.degenerate = degenerate;
  res.p_value = chi_square_sf(stat, p2);
  return res;
}

ScoreTestResult score_statistic(const Dataset& lower_data,
                                const Partition& part, TauLevel tau,
                                const SpecFunctions& spec,
                                const PsiEstimate& psi) {
  if (tau.tail != Tail::Lower) {
    throw InvalidInputError(
        "score_statistic expects lower-tail data; apply negate_tail first");
  }
  part.validate(lower_data.p());

  // Tested columns that are identically zero span nothing: the full model
  // equals the model without them, so fit that one and carry the columns
  // through with zero coefficients. Their score entries vanish and the
  // variance block is zero, which score_eval resolves by the pseudo-inverse
  // convention (degenerate flag) instead of a singular-design failure.
  std::vector<int> live_z;
  std::vector<char> is_zero_col(static_cast<std::size_t>(lower_data.p()), 0);
  for (int j : part.z_cols) {
    if (lower_data.X.col(j).cwiseAbs().maxCoeff() == 0.0) {
      is_zero_col[static_cast<std::size_t>(j)] = 1;
    } else {
      live_z.push_back(j);
    }
  }
  if (live_z.size() == part.z_cols.size()) {
    const TwoStepFit fit = fit_two_step(lower_data, tau, spec);
    const ScoreParts parts = make_score_parts(fit, part);
    return score_eval(parts, psi, restricted_fitted(parts));
  }

  std::vector<int> kept;  // original indices of the columns that are fitted
  for (Eigen::Index j = 0; j < lower_data.p(); ++j) {
    if (!is_zero_col[static_cast<std::size_t>(j)]) {
      kept.push_back(static_cast<int>(j));
    }
  }
  Dataset reduced;
  reduced.y = lower_data.y;
  reduced.X.resize(lower_data.n(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t k = 0; k < kept.size(); ++k) {
    reduced.X.col(static_cast<Eigen::Index>(k)) = lower_data.X.col(kept[k]);
    reduced.column_names.push_back(
        lower_data.column_names.empty()
            ? std::string()
            : lower_data.column_names[static_cast<std::size_t>(kept[k])]);
  }

  TwoStepFit fit = fit_two_step(reduced, tau, spec);
  // Re-inflate to the original column order with zero coefficients in the
  // dropped slots; X itself is untouched by the shift so the internal design
  // is just the original one.
  Vector theta_q = Vector::Zero(lower_data.p());
  Vector theta_e_internal = Vector::Zero(lower_data.p());
  for (std::size_t k = 0; k < kept.size(); ++k) {
    theta_q[kept[k]] = fit.qfit.theta_q[static_cast<Eigen::Index>(k)];
    theta_e_internal[kept[k]] =
        fit.esfit.theta_e_internal[static_cast<Eigen::Index>(k)];
  }
  fit.internal_data.X = lower_data.X;
  fit.internal_data.column_names = lower_data.column_names;
  fit.qfit.theta_q = theta_q;
  fit.esfit.theta_e_internal = theta_e_internal;

  const ScoreParts parts = make_score_parts(fit, part);
  return score_eval(parts, psi, restricted_fitted(parts));
}

WaldTestResult wald_test(const CovarianceEstimate& cov,
                         const Vector& theta_e_user, const Partition& part) {
  part.validate(theta_e_user.size());
  if (cov.cov.rows() != theta_e_user.size()) {
    throw InvalidInputError("covariance does not match the coefficients");
  }
  const auto p2 = static_cast<Eigen::Index>(part.z_cols.size());
  Vector theta2(p2);
  Matrix v22(p2, p2);
  for (Eigen::Index a = 0; a < p2; ++a) {
    theta2[a] = theta_e_user[part.z_cols[static_cast<std::size_t>(a)]];
    for (Eigen::Index b = 0; b < p2; ++b) {
      v22(a, b) = cov.cov(part.z_cols[static_cast<std::size_t>(a)],
                          part.z_cols[static_cast<std::size_t>(b)]);
    }
  }
  Eigen::LLT<Matrix> llt(v22);
  if (llt.info() != Eigen::Success) {
    throw ConditioningError("tested-block covariance is not positive definite");
  }
  WaldTestResult res;
  res.statistic = theta2.dot(llt.solve(theta2));
  res.df = static_cast<int>(p2);
  res.p_value = chi_square_sf(res.statistic, res.df);
  if (p2 == 1) res.z = theta2[0] / std::sqrt(v22(0, 0));
  return res;
}

Interval wald_ci(const CovarianceEstimate& cov, const Vector& theta_e_user,
                 int col, double level) {
  if (col < 0 || col >= theta_e_user.size()) {
    throw InvalidInputError("column out of range for wald_ci");
  }
  if (!(level > 0.0 && level < 1.0)) {
    throw InvalidInputError("confidence level must lie in (0,1)");
  }
  const double var = cov.cov(col, col);
  if (var < 0.0) throw ConditioningError("negative variance in wald_ci");
  const double half = normal_quantile(0.5 + level / 2.0) * std::sqrt(var);
  return {theta_e_user[col] - half, theta_e_user[col] + half};
}

ScoreCiResult score_ci(const TwoStepFit& fit, int col, const PsiEstimate& psi,
                       double level, const ScoreCiOptions& opts) {
  if (col <= 0 || col >= fit.internal_data.p()) {
    throw InvalidInputError(
        "score_ci needs a non-intercept column inside the design");
  }
  if (!(level > 0.0 && level < 1.0)) {
    throw InvalidInputError("confidence level must lie in (0,1)");
  }
  const Partition part =
      Partition::from_z(fit.internal_data.p(), std::vector<int>{col});
  const ScoreParts parts = make_score_parts(fit, part);
  const double z_crit = normal_quantile(0.5 + level / 2.0);
  const double crit = z_crit * z_crit;

  const CovarianceEstimate sand = sandwich_for(fit, psi);
  const double se = std::sqrt(std::max(0.0, sand.cov(col, col)));
  const double width = z_crit * se;
  if (!(width > 0.0)) {
    throw InversionFailureError("zero Wald width leaves nothing to scan");
  }

  int refits = 0;
  // A hypothesized value where no feasible restricted fit exists lies
  // outside the parameter space, hence outside the interval.
  auto accepted = [&](double t_internal) {
    ++refits;
    Vector fitted;
    try {
      fitted = restricted_fitted(parts, t_internal, col);
    } catch (const FeasibilityError&) {
      return false;
    }
    return score_eval(parts, psi, fitted).statistic <= crit;
  };

  const double center = fit.esfit.theta_e_internal[col];
  if (!accepted(center)) {
    throw InversionFailureError(
        "the point estimate itself is rejected; score inversion is ill-posed");
  }

  auto endpoint = [&](int direction) {
    double inner = center;
    double outer = 0.0;
    bool bracketed = false;
    for (int k = 1; k <= opts.scan_max_widths; ++k) {
      const double t = center + direction * k * width;
      if (accepted(t)) {
        inner = t;
      } else {
        outer = t;
        bracketed = true;
        break;
      }
    }
    if (!bracketed) {
      const double far = center + direction * opts.scan_max_widths * width;
      throw InversionFailureError(
          "score test accepted every value scanned between " +
          std::to_string(std::min(center, far)) + " and " +
          std::to_string(std::max(center, far)) + "; no finite endpoint found");
    }
    for (int d = 0; d < opts.max_depth; ++d) {
      if (std::fabs(outer - inner) <= opts.t_tol) break;
      const double mid = 0.5 * (inner + outer);
      if (accepted(mid)) {
        inner = mid;
      } else {
        outer = mid;
      }
    }
    return 0.5 * (inner + outer);
  };

  const double lo_int = endpoint(-1);
  const double hi_int = endpoint(+1);
  const auto [lo, hi] = user_interval(fit, col, lo_int, hi_int);

  ScoreCiResult res;
  res.interval = {lo, hi};
  res.refits = refits;
  return res;
}

}  // namespace qesr
