#pragma once

#include <string>
#include <vector>

#include "longseg/errors.hpp"
#include "longseg/volume.hpp"

namespace longseg {

/// Longitudinal volume measurements of one structure.
struct VolumeSeries {
  std::string structure;
  std::vector<double> times;   // fractional years, strictly increasing
  std::vector<double> values;  // mm^3

  void validate(std::size_t min_points) const;
};

struct OlsFit {
  double intercept = 0.0;  // value at the time of the first sample
  double slope = 0.0;
  std::vector<double> residuals;
};

/// Two-parameter least squares v = a + b (t - t_1).
OlsFit ols_fit(const std::vector<double>& times, const std::vector<double>& values);

/// 100 * sample_std / mean (n-1 divisor); mean must be positive.
double cov_percent(const std::vector<double>& values);

/// 100 * sample_std(residuals) / intercept from the OLS fit; n >= 3.
double linear_residual_ratio(const VolumeSeries& s);

/// Annualized percentage change: 100 * slope / intercept; n >= 2.
double apc(const VolumeSeries& s);

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  double p = 1.0;
  bool degenerate = false;  // both variances zero
};

/// Welch's t-test with Welch-Satterthwaite dof and a two-sided p-value.
WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b);

/// (mean_a - mean_b) / pooled_sd; errors when the pooled SD is zero.
double cohens_d(const std::vector<double>& a, const std::vector<double>& b);

/// Overlap 2|A n B| / (|A| + |B|) for one label; 1 when both masks are empty.
double dice(const LabelVolume& a, const LabelVolume& b, int label);

/// Two-sided Student-t survival probability P(|T_nu| >= t) via the
/// regularized incomplete beta function (continued fraction).
double student_t_two_sided_p(double t, double dof);

/// Regularized incomplete beta I_x(a, b), |error| well below 1e-8.
double incomplete_beta(double a, double b, double x);

double sample_mean(const std::vector<double>& v);
double sample_variance(const std::vector<double>& v);  // n-1 divisor

}  // namespace longseg
