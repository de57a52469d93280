#include <cmath>
#include <vector>

#include "doctest.h"
#include "qesr/quantile.hpp"
#include "qesr/rng.hpp"
#include "test_util.hpp"

using namespace qesr;
using qesr::test::make_data;
using qesr::test::make_intercept_data;
using qesr::test::make_linear_data;

TEST_CASE("intercept-only fits match the brute-force pinball minimizer") {
  // Scanning candidate intercepts over the data values is an exact oracle
  // for the intercept-only problem (some data value is always optimal).
  const std::vector<double> y{1.0, 2.0, 3.0, 4.0, 5.0};
  Dataset d = make_intercept_data(y);
  const TauLevel tau{0.3, Tail::Lower};

  double best = y[0];
  Vector cand(1);
  for (double v : y) {
    cand[0] = v;
    Vector b(1);
    b[0] = best;
    if (pinball_objective(d, cand, tau.tau) <
        pinball_objective(d, b, tau.tau) - 1e-12) {
      best = v;
    }
  }
  CHECK(best == 2.0);

  QuantileFit fit = fit_quantile(d, tau);
  CHECK(fit.theta_q[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(fit.converged);
  Vector opt(1);
  opt << 2.0;
  CHECK(fit.objective ==
        doctest::Approx(pinball_objective(d, opt, 0.3)).epsilon(1e-8));
}

TEST_CASE("median of three points") {
  Dataset d = make_intercept_data({1.0, 2.0, 3.0});
  QuantileFit fit = fit_quantile(d, TauLevel{0.5, Tail::Lower});
  CHECK(fit.theta_q[0] == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("slope consistency on a large simulated sample") {
  Dataset d = make_linear_data(10000, 5.0, 2.0, 101,
                               [](RngStream& r) { return r.normal(); });
  QuantileFit fit = fit_quantile(d, TauLevel{0.5, Tail::Lower});
  CHECK(std::fabs(fit.theta_q[1] - 2.0) < 0.05);
  CHECK(std::fabs(fit.theta_q[0] - 5.0) < 0.1);
}

TEST_CASE("residual arithmetic and subgradient balance") {
  Dataset d = make_linear_data(200, 1.0, -0.5, 5,
                               [](RngStream& r) { return r.normal(); });
  const TauLevel tau{0.35, Tail::Lower};
  QuantileFit fit = fit_quantile(d, tau);

  const Vector recomputed = d.y - d.X * fit.theta_q;
  CHECK((fit.residuals - recomputed).cwiseAbs().maxCoeff() <= 1e-12);

  // Pinball optimality: the fraction of non-positive residuals brackets tau
  // within p/n.
  int nonpos = 0, zeros = 0;
  const double scale = fit.residuals.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (fit.residuals[i] <= 0.0) ++nonpos;
    if (std::fabs(fit.residuals[i]) <= 1e-7 * (1.0 + scale)) ++zeros;
  }
  const double frac = static_cast<double>(nonpos) / static_cast<double>(d.n());
  const double band = static_cast<double>(d.p()) / static_cast<double>(d.n());
  CHECK(frac >= 0.35 - band);
  CHECK(frac <= 0.35 + band);
  // Basic-solution property: at most p residuals are exactly zero.
  CHECK(zeros <= d.p());
}

TEST_CASE("perfect linear fit interpolates") {
  std::vector<double> x{0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 + 3.0 * v);
  Dataset d = make_data(y, {x});
  QuantileFit fit = fit_quantile(d, TauLevel{0.25, Tail::Lower});
  CHECK(fit.residuals.cwiseAbs().maxCoeff() <= 1e-8);
  CHECK(fit.theta_q[0] == doctest::Approx(2.0).epsilon(1e-7));
  CHECK(fit.theta_q[1] == doctest::Approx(3.0).epsilon(1e-7));
}

TEST_CASE("location and scale equivariance") {
  Dataset d = make_linear_data(300, 0.5, 1.5, 17,
                               [](RngStream& r) { return r.normal(); });
  const TauLevel tau{0.2, Tail::Lower};
  QuantileFit base = fit_quantile(d, tau);

  Dataset shifted = d;
  shifted.y = d.y.array() + 7.5;
  QuantileFit fs = fit_quantile(shifted, tau);
  CHECK(fs.theta_q[0] == doctest::Approx(base.theta_q[0] + 7.5).epsilon(1e-8));
  CHECK(fs.theta_q[1] == doctest::Approx(base.theta_q[1]).epsilon(1e-8));

  Dataset scaled = d;
  scaled.y = 3.0 * d.y;
  QuantileFit fk = fit_quantile(scaled, tau);
  CHECK(fk.theta_q[0] == doctest::Approx(3.0 * base.theta_q[0]).epsilon(1e-8));
  CHECK(fk.theta_q[1] == doctest::Approx(3.0 * base.theta_q[1]).epsilon(1e-8));
}

TEST_CASE("objective beats 1000 random perturbations") {
  Dataset d = make_linear_data(150, -1.0, 0.8, 23,
                               [](RngStream& r) { return r.normal(); });
  const double tau = 0.6;
  QuantileFit fit = fit_quantile(d, TauLevel{tau, Tail::Lower});
  const double at_fit = pinball_objective(d, fit.theta_q, tau);

  RngStream rng(24, 0);
  for (int k = 0; k < 1000; ++k) {
    Vector delta(d.p());
    for (Eigen::Index j = 0; j < d.p(); ++j) delta[j] = rng.normal();
    delta *= 0.1 * rng.uniform() / delta.norm();
    CHECK(at_fit <= pinball_objective(d, fit.theta_q + delta, tau) + 1e-9);
  }
}

TEST_CASE("rank-deficient designs are rejected") {
  std::vector<double> x{0.0, 1.0, 2.0, 3.0, 4.0};
  Dataset d = make_data({1.0, 2.0, 1.5, 3.0, 2.5}, {x, x});
  CHECK_THROWS_AS((void)fit_quantile(d, TauLevel{0.5, Tail::Lower}),
                  SingularDesignError);
}
