#pragma once

namespace qesr {

double normal_pdf(double x);
double normal_cdf(double x);

// Inverse standard normal CDF, absolute error below 1e-8 on (0,1).
double normal_quantile(double p);

// Regularized incomplete gamma functions, P(a,x) + Q(a,x) = 1.
double gamma_p(double a, double x);
double gamma_q(double a, double x);

// Survival function of the chi-square distribution with df > 0.
double chi_square_sf(double x, double df);

}  // namespace qesr
