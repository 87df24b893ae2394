#pragma once

#include <span>

namespace tnpkr {

double normal_pdf(double x);
double normal_cdf(double x);

// Regularized incomplete beta I_x(a, b).
double reg_incomplete_beta(double a, double b, double x);

struct TTestResult {
  double t = 0;
  double p = 1;  // two-sided
};

// Paired two-sided t-test on matched samples. Zero-variance differences
// degenerate to p = 1 (identical) or the smallest representable p.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

// One-sided p for the alternative mean(a) < mean(b).
double paired_t_test_one_sided_less(std::span<const double> a, std::span<const double> b);

struct SlopeFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

SlopeFit fit_linear(std::span<const double> x, std::span<const double> y);
SlopeFit fit_loglog(std::span<const double> x, std::span<const double> y);

}  // namespace tnpkr
