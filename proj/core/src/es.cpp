#include "qesr/es.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "qesr/loss.hpp"

namespace qesr {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}
}  // namespace

std::pair<Dataset, double> apply_shift(const Dataset& data) {
  data.validate();
  const double shift = data.y.maxCoeff() + 1.0;
  Dataset shifted = data;
  shifted.y = data.y.array() - shift;
  return {std::move(shifted), shift};
}

Vector unshift(const Vector& theta, double shift) {
  Vector out = theta;
  if (out.size() > 0) out[0] += shift;
  return out;
}

namespace {

struct PluginProblem {
  const Matrix& W;
  const Vector& c;
  const Vector& off;  // always n-sized here
  const SpecFunctions& spec;
  double feas_margin;

  Vector fitted(const Vector& theta) const { return W * theta + off; }

  bool feasible(const Vector& m) const {
    if (spec.family == SpecFamily::Constant) return m.allFinite();
    return m.allFinite() && (m.array() < -feas_margin).all();
  }

  double objective(const Vector& m) const {
    double total = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      total += spec.g2(m[i]) * (m[i] - c[i]) - spec.g2_antideriv(m[i]);
    }
    return total;
  }

  Vector gradient(const Vector& m) const {
    Vector wgt(m.size());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      wgt[i] = spec.g2_prime(m[i]) * (m[i] - c[i]);
    }
    return W.transpose() * wgt;
  }
};

Vector solve_normal_equations(const Matrix& W, const Vector& rhs_vec) {
  const Matrix wtw = W.transpose() * W;
  Eigen::LLT<Matrix> llt(wtw);
  if (llt.info() != Eigen::Success) {
    throw SingularDesignError("plug-in design matrix is singular");
  }
  return llt.solve(W.transpose() * rhs_vec);
}

}  // namespace

PluginSolution fit_es_plugin(const Matrix& design, const Vector& c,
                             const SpecFunctions& spec, const Vector& offset,
                             const ESOptions& opts) {
  const Eigen::Index n = design.rows();
  const Eigen::Index k = design.cols();
  if (c.size() != n) throw InvalidInputError("pseudo-response length mismatch");
  if (n < k + 1) throw InvalidInputError("too few rows for the plug-in fit");
  if ((design.col(0).array() != 1.0).any()) {
    throw InvalidInputError("plug-in design needs an intercept in column 0");
  }
  Vector off = offset.size() == 0 ? Vector::Zero(n) : offset;
  if (off.size() != n) throw InvalidInputError("offset length mismatch");

  PluginProblem prob{design, c, off, spec, opts.feas_margin};

  // Constant family: least squares of (c - offset) on the design.
  Vector theta = solve_normal_equations(design, c - off);
  if (spec.family == SpecFamily::Constant) {
    PluginSolution sol;
    sol.theta = std::move(theta);
    sol.gradient_norm = prob.gradient(prob.fitted(sol.theta)).norm() / n;
    return sol;
  }

  // Blend the least-squares start toward an always-feasible constant fit.
  const double off_max = off.maxCoeff();
  Vector anchor = Vector::Zero(k);
  anchor[0] = -1.0 - std::max(0.0, off_max);
  double blend = 1.0;
  Vector m = prob.fitted(theta);
  for (int tries = 0; !prob.feasible(m) && tries < 200; ++tries) {
    blend *= 0.5;
    m = prob.fitted(anchor + blend * (theta - anchor));
  }
  if (!prob.feasible(m)) {
    throw FeasibilityError("could not find a feasible starting point");
  }
  theta = anchor + blend * (theta - anchor);

  double obj = prob.objective(m);
  PluginSolution sol;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    const Vector r = m - c;
    const Vector grad = prob.gradient(m);
    const double gn_mean = grad.norm() / n;
    const double stop_tol = opts.grad_tol_rel * (1.0 + theta.norm());
    if (gn_mean <= stop_tol) break;

    // Newton with the exact per-observation curvature (m - 2r)/m^3;
    // falls back to the always-positive surrogate 1/m^2.
    Vector hd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      hd[i] = (m[i] - 2.0 * r[i]) / (m[i] * m[i] * m[i]);
    }
    Matrix H = design.transpose() * hd.asDiagonal() * design;
    Eigen::LLT<Matrix> llt(H);
    Vector dir;
    bool have_dir = false;
    if (llt.info() == Eigen::Success) {
      dir = llt.solve(-grad);
      have_dir = grad.dot(dir) < 0.0;
    }
    if (!have_dir) {
      for (Eigen::Index i = 0; i < n; ++i) hd[i] = 1.0 / (m[i] * m[i]);
      H = design.transpose() * hd.asDiagonal() * design;
      llt.compute(H);
      if (llt.info() != Eigen::Success) {
        throw SingularDesignError("plug-in curvature matrix is singular");
      }
      dir = llt.solve(-grad);
    }

    const double slope = grad.dot(dir);
    double alpha = 1.0;
    bool stepped = false;
    for (int h = 0; h < opts.max_halvings; ++h) {
      const Vector cand = theta + alpha * dir;
      const Vector mc = prob.fitted(cand);
      if (prob.feasible(mc)) {
        const double oc = prob.objective(mc);
        if (oc <= obj + 1e-4 * alpha * slope) {
          theta = cand;
          m = mc;
          obj = oc;
          stepped = true;
          break;
        }
      }
      alpha *= 0.5;
    }
    if (!stepped) {
      if (gn_mean <= 1e-6 * (1.0 + theta.norm())) break;
      throw NonConvergenceError(
          "plug-in line search stalled (mean gradient " +
              std::to_string(gn_mean) + ")",
          to_std(theta));
    }
  }
  const double gn_final = prob.gradient(m).norm() / n;
  if (it >= opts.max_iterations &&
      gn_final > 1e-6 * (1.0 + theta.norm())) {
    throw NonConvergenceError("plug-in fit did not converge in " +
                                  std::to_string(opts.max_iterations) +
                                  " iterations",
                              to_std(theta));
  }
  sol.theta = std::move(theta);
  sol.gradient_norm = gn_final;
  sol.iterations = it;
  return sol;
}

ESFit fit_es_two_step(const Dataset& shifted_data, TauLevel tau,
                      const SpecFunctions& spec, const QuantileFit& qfit,
                      double shift, const ESOptions& opts) {
  shifted_data.validate();
  tau.validate();
  if (tau.tail != Tail::Lower) {
    throw InvalidInputError(
        "fit_es_two_step works on the lower tail; apply negate_tail first");
  }
  const Eigen::Index n = shifted_data.n();
  if (qfit.theta_q.size() != shifted_data.p()) {
    throw InvalidInputError("quantile fit does not match the design");
  }

  const Vector q = shifted_data.X * qfit.theta_q;
  const Vector r = shifted_data.y - q;
  // Interpolated observations carry solver noise instead of exact zeros;
  // count them into the tail with a scale-aware tolerance.
  const double tol = 1e-8 * (1.0 + r.cwiseAbs().maxCoeff());
  Eigen::Index tail_count = 0;
  Vector c(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (r[i] <= tol) ++tail_count;
    c[i] = pseudo_response(shifted_data.y[i], q[i], tau.tau);
  }
  if (tail_count < 2) {
    throw SmallTailError("only " + std::to_string(tail_count) +
                         " observations at or below the fitted quantile; "
                         "need at least 2");
  }

  PluginSolution sol = fit_es_plugin(shifted_data.X, c, spec, Vector(), opts);

  ESFit fit;
  fit.theta_e_internal = sol.theta;
  fit.theta_e = unshift(sol.theta, shift);
  fit.shift = shift;
  fit.gradient_norm = sol.gradient_norm;
  fit.iterations = sol.iterations;
  fit.family = spec.family;
  fit.tail_count = tail_count;
  return fit;
}

namespace {

double joint_objective(const Dataset& data, TauLevel tau,
                       const SpecFunctions& spec, const Vector& v) {
  const Eigen::Index p = data.p();
  const Vector tq = v.head(p);
  const Vector te = v.tail(p);
  const Vector m = data.X * te;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!spec.in_domain(m[i])) return kInf;
  }
  const double val = sum_joint_loss(data, tq, te, tau.tau, spec);
  return std::isfinite(val) ? val : kInf;
}

}  // namespace

JointFit fit_joint_one_step(const Dataset& data, TauLevel tau,
                            const SpecFunctions& spec, const Theta& init,
                            const JointOptions& opts) {
  data.validate();
  tau.validate();
  if (tau.tail != Tail::Lower) {
    throw InvalidInputError(
        "fit_joint_one_step works on the lower tail; apply negate_tail first");
  }
  const Eigen::Index p = data.p();
  if (init.theta_q.size() != p || init.theta_e.size() != p) {
    throw InvalidInputError("initial point does not match the design");
  }
  const Eigen::Index dim = 2 * p;
  long evals = 0;
  auto f = [&](const Vector& v) {
    ++evals;
    return joint_objective(data, tau, spec, v);
  };

  Vector v0(dim);
  v0 << init.theta_q, init.theta_e;
  double f0 = f(v0);
  if (!std::isfinite(f0)) {
    throw InvalidInputError("initial point for the joint fit is infeasible");
  }

  // Nelder-Mead with standard reflection/expansion/contraction/shrink.
  std::vector<Vector> vx(dim + 1, v0);
  std::vector<double> fx(dim + 1, f0);
  for (Eigen::Index j = 0; j < dim; ++j) {
    double h = 0.05 * (1.0 + std::fabs(v0[j]));
    Vector cand = v0;
    for (int tries = 0; tries < 80; ++tries) {
      cand[j] = v0[j] + h;
      fx[j + 1] = f(cand);
      if (std::isfinite(fx[j + 1])) break;
      h = tries % 2 == 0 ? -h : -h * 0.5;  // flip then shrink
    }
    vx[j + 1] = cand;
    if (!std::isfinite(fx[j + 1])) {
      throw InvalidInputError("could not build a feasible starting simplex");
    }
  }

  std::vector<int> order(dim + 1);
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return fx[a] < fx[b]; });
  };

  while (true) {
    sort_simplex();
    const int lo = order[0];
    const int hi = order[dim];
    const int second_hi = order[dim - 1];
    const double spread = fx[hi] - fx[lo];
    if (spread <= opts.spread_tol * (1.0 + std::fabs(fx[lo]))) break;
    if (evals >= opts.max_evaluations) {
      throw NonConvergenceError(
          "joint fit exhausted its evaluation budget", to_std(vx[lo]));
    }

    Vector centroid = Vector::Zero(dim);
    for (int j = 0; j <= dim; ++j) {
      if (j != hi) centroid += vx[j];
    }
    centroid /= static_cast<double>(dim);

    const Vector xr = centroid + (centroid - vx[hi]);
    const double fr = f(xr);
    if (fr < fx[lo]) {
      const Vector xe = centroid + 2.0 * (centroid - vx[hi]);
      const double fe = f(xe);
      if (fe < fr) {
        vx[hi] = xe;
        fx[hi] = fe;
      } else {
        vx[hi] = xr;
        fx[hi] = fr;
      }
    } else if (fr < fx[second_hi]) {
      vx[hi] = xr;
      fx[hi] = fr;
    } else {
      const bool outside = fr < fx[hi];
      const Vector base = outside ? xr : vx[hi];
      const Vector xc = centroid + 0.5 * (base - centroid);
      const double fc = f(xc);
      if (fc < std::min(fr, fx[hi])) {
        vx[hi] = xc;
        fx[hi] = fc;
      } else {
        for (int j = 0; j <= dim; ++j) {
          if (j == lo) continue;
          vx[j] = vx[lo] + 0.5 * (vx[j] - vx[lo]);
          fx[j] = f(vx[j]);
        }
      }
    }
  }

  sort_simplex();
  JointFit out;
  out.theta_q = vx[order[0]].head(p);
  out.theta_e = vx[order[0]].tail(p);
  out.objective = fx[order[0]];
  out.evaluations = evals;
  return out;
}

}  // namespace qesr
