#include "longseg/stats.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace longseg {

void VolumeSeries::validate(std::size_t min_points) const {
  if (times.size() != values.size())
    throw DataError("volume series times/values length mismatch");
  if (times.size() < min_points)
    throw DataError("volume series too short for this metric");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw DataError("volume series times must be strictly increasing");
  for (double v : values)
    if (v < 0.0) throw DataError("volume series values must be non-negative");
}

double sample_mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_variance(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

OlsFit ols_fit(const std::vector<double>& times, const std::vector<double>& values) {
  const std::size_t n = times.size();
  if (n < 2 || values.size() != n) throw DataError("ols_fit needs n >= 2 points");
  // Re-zero time at the first sample.
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = times[i] - times[0];
  const double tbar = sample_mean(t);
  const double vbar = sample_mean(values);
  double stt = 0.0, stv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    stt += (t[i] - tbar) * (t[i] - tbar);
    stv += (t[i] - tbar) * (values[i] - vbar);
  }
  OlsFit fit;
  fit.slope = stt > 0.0 ? stv / stt : 0.0;
  fit.intercept = vbar - fit.slope * tbar;
  fit.residuals.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    fit.residuals[i] = values[i] - (fit.intercept + fit.slope * t[i]);
  return fit;
}

double cov_percent(const std::vector<double>& values) {
  if (values.size() < 2) throw DataError("cov needs n >= 2");
  const double m = sample_mean(values);
  if (!(m > 0.0)) throw NumericError("cov undefined: mean <= 0");
  return 100.0 * std::sqrt(sample_variance(values)) / m;
}

double linear_residual_ratio(const VolumeSeries& s) {
  s.validate(3);
  const OlsFit fit = ols_fit(s.times, s.values);
  if (!(fit.intercept > 0.0))
    throw NumericError("residual ratio undefined: intercept <= 0");
  return 100.0 * std::sqrt(sample_variance(fit.residuals)) / fit.intercept;
}

double apc(const VolumeSeries& s) {
  s.validate(2);
  const OlsFit fit = ols_fit(s.times, s.values);
  if (!(fit.intercept > 0.0)) throw NumericError("apc undefined: intercept <= 0");
  return 100.0 * fit.slope / fit.intercept;
}

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("welch_t needs n >= 2 per group");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double ma = sample_mean(a), mb = sample_mean(b);
  const double va = sample_variance(a), vb = sample_variance(b);

  WelchResult r;
  if (va == 0.0 && vb == 0.0) {
    r.degenerate = true;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    r.dof = na + nb - 2.0;
    return r;
  }

  const double se2 = va / na + vb / nb;
  r.t = (ma - mb) / std::sqrt(se2);
  r.dof = se2 * se2 /
          (va * va / (na * na * (na - 1.0)) + vb * vb / (nb * nb * (nb - 1.0)));
  r.p = student_t_two_sided_p(r.t, r.dof);
  return r;
}

double cohens_d(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("cohens_d needs n >= 2 per group");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double pooled = std::sqrt(((na - 1.0) * sample_variance(a) +
                                   (nb - 1.0) * sample_variance(b)) /
                                  (na + nb - 2.0));
  if (!(pooled > 0.0)) throw NumericError("cohens_d undefined: pooled SD is zero");
  return (sample_mean(a) - sample_mean(b)) / pooled;
}

double dice(const LabelVolume& a, const LabelVolume& b, int label) {
  if (a.nx != b.nx || a.ny != b.ny || a.nz != b.nz)
    throw DataError("dice: dimension mismatch");
  std::size_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool in_a = a.labels[i] == label;
    const bool in_b = b.labels[i] == label;
    na += in_a;
    nb += in_b;
    inter += in_a && in_b;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace {

/// Continued-fraction evaluation of the incomplete beta (Lentz's method).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;

  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0))
    return std::exp(ln_front) * beta_cf(a, b, x) / a;
  return 1.0 - std::exp(ln_front + std::log(beta_cf(b, a, 1.0 - x)) -
                        std::log(b));
}

double student_t_two_sided_p(double t, double dof) {
  if (!std::isfinite(t)) return 0.0;
  if (t == 0.0) return 1.0;
  return incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
}

}  // namespace longseg
