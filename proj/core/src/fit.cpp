#include "qesr/fit.hpp"

#include <utility>

#include "qesr/loss.hpp"

namespace qesr {

TwoStepFit fit_two_step(const Dataset& data, TauLevel tau,
                        const SpecFunctions& spec,
                        const QuantileOptions& qopts, const ESOptions& eopts) {
  data.validate();
  tau.validate();

  TwoStepFit fit;
  fit.tau = tau;
  fit.spec = spec;
  fit.negated = tau.tail == Tail::Upper;

  Dataset lower = data;
  TauLevel lower_tau = tau;
  if (fit.negated) {
    auto mapped = negate_tail(data, tau);
    lower = std::move(mapped.first);
    lower_tau = mapped.second;
  }

  auto shifted = apply_shift(lower);
  fit.internal_data = std::move(shifted.first);
  fit.shift = shifted.second;
  fit.internal_tau = lower_tau;

  fit.qfit = fit_quantile(fit.internal_data, lower_tau, qopts);
  fit.esfit = fit_es_two_step(fit.internal_data, lower_tau, spec, fit.qfit,
                              fit.shift, eopts);

  Vector tq_user = unshift(fit.qfit.theta_q, fit.shift);
  Vector te_user = fit.esfit.theta_e;
  if (fit.negated) {
    tq_user = -tq_user;
    te_user = -te_user;
  }
  fit.theta.theta_q = std::move(tq_user);
  fit.theta.theta_e = std::move(te_user);
  fit.theta.shift = fit.shift;
  return fit;
}

double internal_coefficient_value(const TwoStepFit& fit, int col,
                                  double user_value) {
  double v = fit.negated ? -user_value : user_value;
  if (col == 0) v -= fit.shift;
  return v;
}

std::pair<double, double> user_interval(const TwoStepFit& fit, int col,
                                        double internal_lo,
                                        double internal_hi) {
  auto to_user = [&](double v) {
    if (col == 0) v += fit.shift;
    return fit.negated ? -v : v;
  };
  double a = to_user(internal_lo);
  double b = to_user(internal_hi);
  if (a > b) std::swap(a, b);
  return {a, b};
}

}  // namespace qesr
