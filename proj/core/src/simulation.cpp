#include "qesr/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "qesr/covariance.hpp"
#include "qesr/fit.hpp"
#include "qesr/inference.hpp"
#include "qesr/parallel.hpp"
#include "qesr/rng.hpp"
#include "qesr/special.hpp"

namespace qesr {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr std::uint64_t kBootSalt = 0x626f6f74ULL;
}  // namespace

double es_upper_normal(double tau) {
  TauLevel{tau, Tail::Upper}.validate();
  return normal_pdf(normal_quantile(tau)) / (1.0 - tau);
}

double student_t3_pdf(double x) {
  const double base = 1.0 + x * x / 3.0;
  return 2.0 / (kPi * std::sqrt(3.0)) / (base * base);
}

double student_t3_cdf(double x) {
  // Closed form for three degrees of freedom.
  const double s = x / std::sqrt(3.0);
  return 0.5 + (std::atan(s) + s / (1.0 + s * s)) / kPi;
}

double student_t3_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw InvalidInputError("student_t3_quantile needs p in (0,1)");
  }
  double lo = -1.0, hi = 1.0;
  while (student_t3_cdf(lo) > p) lo *= 2.0;
  while (student_t3_cdf(hi) < p) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (student_t3_cdf(mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-14 * (1.0 + std::fabs(hi))) break;
  }
  return 0.5 * (lo + hi);
}

double es_upper_t3(double tau) {
  TauLevel{tau, Tail::Upper}.validate();
  const double q = student_t3_quantile(tau);
  // Integral of x f(x) over (q, inf) equals f(q) (3 + q^2) / 2 for t3.
  return student_t3_pdf(q) * (3.0 + q * q) / 2.0 / (1.0 - tau);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::WaldIID: return "w-iid";
    case Method::WaldNID: return "w-nid";
    case Method::ScoreIID: return "s-iid";
    case Method::ScoreNID: return "s-nid";
    case Method::Boot: return "boot";
  }
  throw InvalidInputError("unknown method");
}

Method method_from_name(const std::string& name) {
  if (name == "w-iid") return Method::WaldIID;
  if (name == "w-nid") return Method::WaldNID;
  if (name == "s-iid") return Method::ScoreIID;
  if (name == "s-nid") return Method::ScoreNID;
  if (name == "boot") return Method::Boot;
  throw InvalidInputError("unknown method '" + name + "'");
}

void ScenarioConfig::validate() const {
  tau.validate();
  if (n_per_group < 25) {
    throw InvalidInputError("need at least 25 observations per group, got " +
                            std::to_string(n_per_group));
  }
  if (replications < 1) throw InvalidInputError("need at least 1 replication");
  if (methods.empty()) throw InvalidInputError("no methods requested");
  std::set<Method> uniq(methods.begin(), methods.end());
  if (uniq.size() != methods.size()) {
    throw InvalidInputError("duplicate methods requested");
  }
  if (uniq.count(Method::Boot) && bootstrap_b < 50) {
    throw InvalidInputError("bootstrap needs B >= 50, got " +
                            std::to_string(bootstrap_b));
  }
  if (!(test_level > 0.0 && test_level < 1.0) ||
      !(ci_level > 0.0 && ci_level < 1.0)) {
    throw InvalidInputError("levels must lie in (0,1)");
  }
  if (threads < 0) throw InvalidInputError("threads must be >= 0");
}

Dataset generate_scenario(const ScenarioConfig& cfg, int rep_index) {
  cfg.validate();
  if (rep_index < 0) throw InvalidInputError("replicate index must be >= 0");
  RngStream rng(cfg.seed, static_cast<std::uint64_t>(rep_index));

  const int n = 2 * cfg.n_per_group;
  Dataset data;
  data.y.resize(n);

  const bool wide = cfg.scenario == Scenario::S3 || cfg.scenario == Scenario::S4;
  const int p = wide ? 8 : 3;
  data.X.resize(n, p);
  if (cfg.scenario == Scenario::S1) {
    data.column_names = {"(intercept)", "D", "x1"};
  } else if (cfg.scenario == Scenario::S2) {
    data.column_names = {"(intercept)", "D", "C"};
  } else {
    data.column_names = {"(intercept)", "D", "x2", "x3",
                         "x4",          "x5", "x6", "x7"};
  }

  for (int i = 0; i < n; ++i) {
    const double d = i < cfg.n_per_group ? 1.0 : 0.0;
    data.X(i, 0) = 1.0;
    data.X(i, 1) = d;
    switch (cfg.scenario) {
      case Scenario::S1: {
        const double x1 = 2.5 + 0.5 * rng.normal();
        const double eps = rng.normal();
        data.X(i, 2) = x1;
        data.y[i] = 5.0 + cfg.eta * d + x1 + eps;
        break;
      }
      case Scenario::S2: {
        const double cmean = d == 1.0 ? 0.5 : 0.0;
        const double cv = rng.truncated_normal(cmean, 0.5, -0.5);
        const double eps = rng.normal();
        data.X(i, 2) = cv;
        data.y[i] = 5.0 - cfg.eta * d + cv + (1.0 + 0.25 * d + 2.0 * cv) * eps;
        break;
      }
      case Scenario::S3:
      case Scenario::S4: {
        const double x2 = rng.bernoulli(0.4);
        const double x3 = rng.lognormal();
        const double x4 = rng.lognormal();
        const double z1 = rng.normal();
        const double z2 = rng.normal();
        const double x5 = 2.0 + z1;
        const double x6 = 2.0 + 0.8 * z1 + 0.6 * z2;
        const double x7 = rng.chi_square1();
        data.X(i, 2) = x2;
        data.X(i, 3) = x3;
        data.X(i, 4) = x4;
        data.X(i, 5) = x5;
        data.X(i, 6) = x6;
        data.X(i, 7) = x7;
        const double sum = x2 + x3 + x4 + x5 + x6 + x7;
        if (cfg.scenario == Scenario::S3) {
          data.y[i] = 5.0 + cfg.eta * d + sum + rng.normal();
        } else {
          const double eps = rng.student_t3() / 2.0;
          data.y[i] = 5.0 + cfg.eta * d + sum + (1.0 + 0.2 * d) * eps;
        }
        break;
      }
    }
  }
  data.validate();
  return data;
}

double true_treatment_effect(Scenario scenario, TauLevel tau, double eta) {
  tau.validate();
  if (tau.tail != Tail::Upper) {
    throw InvalidInputError("scenario truths are defined for the upper tail");
  }
  switch (scenario) {
    case Scenario::S1:
    case Scenario::S3:
      return eta;
    case Scenario::S2:
      return -eta + 0.25 * es_upper_normal(tau.tau);
    case Scenario::S4:
      return eta + 0.2 * es_upper_t3(tau.tau) / 2.0;
  }
  throw InvalidInputError("unknown scenario");
}

double eta_for_null(Scenario scenario, TauLevel tau) {
  switch (scenario) {
    case Scenario::S1:
    case Scenario::S3:
      return 0.0;
    case Scenario::S2:
      return 0.25 * es_upper_normal(tau.tau);
    case Scenario::S4:
      return -0.2 * es_upper_t3(tau.tau) / 2.0;
  }
  throw InvalidInputError("unknown scenario");
}

namespace {

struct MethodOutcome {
  bool ok = false;
  bool reject = false;
  bool covered = false;
  double ci_length = 0.0;
};

struct RepOutcome {
  std::vector<MethodOutcome> per_method;
};

bool needs(const std::vector<Method>& ms, Method m) {
  return std::find(ms.begin(), ms.end(), m) != ms.end();
}

}  // namespace

SimulationReport run_monte_carlo(const ScenarioConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const double effect = true_treatment_effect(cfg.scenario, cfg.tau, cfg.eta);
  const int n_methods = static_cast<int>(cfg.methods.size());
  const int d_col = 1;

  const bool any_score = needs(cfg.methods, Method::ScoreIID) ||
                         needs(cfg.methods, Method::ScoreNID);
  const bool any_nid = needs(cfg.methods, Method::WaldNID) ||
                       needs(cfg.methods, Method::ScoreNID);
  const bool any_iid = needs(cfg.methods, Method::WaldIID) ||
                       needs(cfg.methods, Method::ScoreIID);

  std::vector<RepOutcome> outcomes(cfg.replications);
  parallel_for(cfg.replications, cfg.threads, [&](int rep) {
    RepOutcome& out = outcomes[rep];
    out.per_method.assign(n_methods, MethodOutcome{});

    TwoStepFit fit;
    try {
      const Dataset data = generate_scenario(cfg, rep);
      fit = fit_two_step(data, cfg.tau, cfg.spec);
    } catch (const Error&) {
      return;  // every method fails this replicate
    }

    PsiEstimate psi_i, psi_n;
    bool have_iid = false, have_nid = false;
    if (any_iid) {
      try {
        psi_i = psi_iid(fit.qfit.residuals);
        have_iid = true;
      } catch (const Error&) {
      }
    }
    if (any_nid) {
      try {
        psi_n = psi_nid(fit.internal_data, fit.qfit.residuals,
                        fit.internal_tau);
        have_nid = true;
      } catch (const Error&) {
      }
    }

    ScoreParts parts;
    Vector fitted0;
    bool have_parts = false;
    if (any_score) {
      try {
        parts = make_score_parts(
            fit, Partition::from_z(fit.internal_data.p(), {d_col}));
        fitted0 = restricted_fitted(parts);
        have_parts = true;
      } catch (const Error&) {
      }
    }

    for (int mi = 0; mi < n_methods; ++mi) {
      MethodOutcome& mo = out.per_method[mi];
      try {
        switch (cfg.methods[mi]) {
          case Method::WaldIID:
          case Method::WaldNID: {
            const bool nid = cfg.methods[mi] == Method::WaldNID;
            if (nid ? !have_nid : !have_iid) break;
            const CovarianceEstimate cov =
                sandwich_for(fit, nid ? psi_n : psi_i);
            const Partition part =
                Partition::from_z(fit.theta.theta_e.size(), {d_col});
            const WaldTestResult wt =
                wald_test(cov, fit.theta.theta_e, part);
            const Interval ci =
                wald_ci(cov, fit.theta.theta_e, d_col, cfg.ci_level);
            mo.ok = true;
            mo.reject = wt.p_value < cfg.test_level;
            mo.covered = ci.contains(effect);
            mo.ci_length = ci.length();
            break;
          }
          case Method::ScoreIID:
          case Method::ScoreNID: {
            const bool nid = cfg.methods[mi] == Method::ScoreNID;
            if ((nid ? !have_nid : !have_iid) || !have_parts) break;
            const PsiEstimate& psi = nid ? psi_n : psi_i;
            const ScoreTestResult st = score_eval(parts, psi, fitted0);
            const ScoreCiResult ci =
                score_ci(fit, d_col, psi, cfg.ci_level);
            mo.ok = true;
            mo.reject = st.p_value < cfg.test_level;
            mo.covered = ci.interval.contains(effect);
            mo.ci_length = ci.interval.length();
            break;
          }
          case Method::Boot: {
            const CovarianceEstimate cov = bootstrap_cov(
                fit.internal_data, fit.internal_tau, cfg.spec,
                cfg.bootstrap_b,
                mix_seed(mix_seed(cfg.seed, kBootSalt),
                         static_cast<std::uint64_t>(rep)));
            const double se = std::sqrt(std::max(0.0, cov.cov(d_col, d_col)));
            // Bootstrap covariance of the internal fit; the user-scale D
            // coefficient flips sign under the upper-tail map, se does not.
            const double est = fit.theta.theta_e[d_col];
            const double z = se > 0.0 ? est / se
                                      : (est == 0.0 ? 0.0 : 1e300);
            const double p = chi_square_sf(std::min(z * z, 1e300), 1.0);
            const double half =
                normal_quantile(0.5 + cfg.ci_level / 2.0) * se;
            mo.ok = true;
            mo.reject = p < cfg.test_level;
            mo.covered = est - half <= effect && effect <= est + half;
            mo.ci_length = 2.0 * half;
            break;
          }
        }
      } catch (const Error&) {
        mo.ok = false;
      }
    }
  });

  SimulationRun run;
  run.eta = cfg.eta;
  run.eta_tau = effect;
  run.methods.resize(n_methods);
  for (int mi = 0; mi < n_methods; ++mi) {
    MethodSummary& ms = run.methods[mi];
    ms.method = cfg.methods[mi];
    long rejections = 0, covers = 0;
    double length_sum = 0.0;
    for (int rep = 0; rep < cfg.replications; ++rep) {
      const MethodOutcome& mo = outcomes[rep].per_method[mi];
      if (!mo.ok) {
        ++ms.failures;
        continue;
      }
      ++ms.successes;
      rejections += mo.reject ? 1 : 0;
      covers += mo.covered ? 1 : 0;
      length_sum += mo.ci_length;
    }
    if (20 * ms.failures > cfg.replications) {
      run.flagged_invalid = true;
      if (!run.flag_reason.empty()) run.flag_reason += "; ";
      run.flag_reason += method_name(ms.method) + " failed on " +
                         std::to_string(ms.failures) + " of " +
                         std::to_string(cfg.replications) + " replicates (>5%)";
    }
    if (ms.successes > 0) {
      const double n_ok = ms.successes;
      ms.rejection_rate = rejections / n_ok;
      ms.coverage = covers / n_ok;
      ms.avg_ci_length = length_sum / n_ok;
      ms.mc_se =
          std::sqrt(ms.rejection_rate * (1.0 - ms.rejection_rate) / n_ok);
    }
    run.failures_total += ms.failures;
  }

  SimulationReport report;
  report.config = cfg;
  report.runs.push_back(std::move(run));
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return report;
}

SimulationReport run_monte_carlo_grid(const ScenarioConfig& cfg,
                                      const std::vector<double>& etas) {
  if (etas.empty()) throw InvalidInputError("empty eta grid");
  SimulationReport report;
  report.config = cfg;
  double wall = 0.0;
  for (double eta : etas) {
    ScenarioConfig one = cfg;
    one.eta = eta;
    SimulationReport r = run_monte_carlo(one);
    wall += r.wall_seconds;
    report.runs.push_back(std::move(r.runs.front()));
  }
  report.wall_seconds = wall;
  return report;
}

SampleSizeResult sample_size_search(const ScenarioConfig& tmpl, double effect,
                                    double target_power, int n_cap) {
  if (tmpl.methods.size() != 1) {
    throw InvalidInputError(
        "sample_size_search needs a config with exactly one method");
  }
  if (!(target_power > 0.0 && target_power < 1.0)) {
    throw InvalidInputError("target power must lie in (0,1)");
  }

  SampleSizeResult result;
  auto power_at = [&](int n) {
    ScenarioConfig cfg = tmpl;
    cfg.n_per_group = n;
    cfg.eta = effect;
    const SimulationReport rep = run_monte_carlo(cfg);
    if (rep.runs.front().flagged_invalid) {
      throw SimulationInstabilityError("search probe at n_per_group = " +
                                       std::to_string(n) + " is unusable: " +
                                       rep.runs.front().flag_reason);
    }
    const MethodSummary& ms = rep.runs.front().methods.front();
    SampleSizePoint pt{n, ms.rejection_rate, ms.mc_se};
    result.path.push_back(pt);
    return pt;
  };

  int lo = 0;
  SampleSizePoint best = power_at(25);
  if (best.power >= target_power) {
    result.n_per_group = 25;
    result.power = best.power;
    result.mc_se = best.mc_se;
    return result;
  }
  lo = 25;
  int hi = 0;
  for (int n = 50; n <= n_cap; n *= 2) {
    const SampleSizePoint pt = power_at(n);
    if (pt.power >= target_power) {
      hi = n;
      best = pt;
      break;
    }
    lo = n;
  }
  if (hi == 0) {
    std::string curve;
    for (const SampleSizePoint& pt : result.path) {
      if (!curve.empty()) curve += ", ";
      curve += "n=" + std::to_string(pt.n_per_group) + " power=" +
               std::to_string(pt.power);
    }
    throw SimulationInstabilityError(
        "target power " + std::to_string(target_power) +
        " not reached by n_per_group = " + std::to_string(n_cap) +
        "; curve so far: " + curve);
  }
  while (hi - lo > 1) {
    const int mid = lo + (hi - lo) / 2;
    const SampleSizePoint pt = power_at(mid);
    if (pt.power >= target_power) {
      hi = mid;
      best = pt;
    } else {
      lo = mid;
    }
  }
  result.n_per_group = hi;
  result.power = best.power;
  result.mc_se = best.mc_se;
  return result;
}

}  // namespace qesr
