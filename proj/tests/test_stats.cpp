#include <doctest.h>

#include <cmath>
#include <random>

#include "longseg/stats.hpp"

using namespace longseg;

TEST_CASE("cov hand values") {
  CHECK(cov_percent({5, 5, 5}) == doctest::Approx(0.0));
  CHECK(cov_percent({9, 11}) == doctest::Approx(100.0 * std::sqrt(2.0) / 10.0).epsilon(1e-10));
  CHECK_THROWS_AS(cov_percent({-3, 1}), NumericError);
  CHECK_THROWS_AS(cov_percent({5}), DataError);
}

TEST_CASE("cov is scale invariant") {
  const std::vector<double> v{3.0, 4.5, 2.2, 5.1};
  std::vector<double> scaled = v;
  for (auto& x : scaled) x *= 7.25;
  CHECK(cov_percent(scaled) == doctest::Approx(cov_percent(v)).epsilon(1e-12));
}

TEST_CASE("ols fit matches closed-form two-parameter least squares") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> t{0.0, 0.7, 1.9, 3.2, 4.0};
  std::vector<double> v;
  for (std::size_t i = 0; i < t.size(); ++i) v.push_back(10.0 + 2.0 * t[i] + u(rng));

  const OlsFit fit = ols_fit(t, v);
  const double n = static_cast<double>(t.size());
  double st = 0, sv = 0, stt = 0, stv = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    st += t[i];
    sv += v[i];
    stt += t[i] * t[i];
    stv += t[i] * v[i];
  }
  const double slope = (n * stv - st * sv) / (n * stt - st * st);
  const double intercept = (sv - slope * st) / n;  // t already starts at 0
  CHECK(fit.slope == doctest::Approx(slope).epsilon(1e-10));
  CHECK(fit.intercept == doctest::Approx(intercept).epsilon(1e-10));
}

TEST_CASE("linear residual ratio hand value") {
  VolumeSeries s;
  s.times = {0, 1, 2};
  s.values = {10, 10, 13};
  // OLS: a = 9.5, b = 1.5, residuals {0.5, -1, 0.5}.
  const double expect = 100.0 * std::sqrt((0.25 + 1.0 + 0.25) / 2.0) / 9.5;
  CHECK(linear_residual_ratio(s) == doctest::Approx(expect).epsilon(1e-10));

  VolumeSeries perfect;
  perfect.times = {0, 1, 2, 3};
  perfect.values = {10, 12, 14, 16};
  CHECK(linear_residual_ratio(perfect) == doctest::Approx(0.0));
}

TEST_CASE("residual ratio is invariant to time shifts") {
  VolumeSeries s;
  s.times = {2000.0, 2001.5, 2003.0, 2004.0};
  s.values = {100, 97, 96, 91};
  VolumeSeries shifted = s;
  for (auto& t : shifted.times) t -= 2000.0;
  CHECK(linear_residual_ratio(s) ==
        doctest::Approx(linear_residual_ratio(shifted)).epsilon(1e-12));
}

TEST_CASE("apc hand values and invariances") {
  VolumeSeries s;
  s.times = {0, 1};
  s.values = {100, 98};
  CHECK(apc(s) == doctest::Approx(-2.0).epsilon(1e-12));

  VolumeSeries constant;
  constant.times = {0, 1, 2};
  constant.values = {7, 7, 7};
  CHECK(apc(constant) == doctest::Approx(0.0));

  VolumeSeries scaled = s;
  for (auto& v : scaled.values) v *= 3.5;
  CHECK(apc(scaled) == doctest::Approx(apc(s)).epsilon(1e-12));
}

TEST_CASE("welch t hand values") {
  const WelchResult same = welch_t({1, 2, 3}, {1, 2, 3});
  CHECK(same.t == doctest::Approx(0.0));
  CHECK(same.p == doctest::Approx(1.0));

  const WelchResult r = welch_t({1, 2, 3, 4}, {3, 4, 5, 6});
  // Equal variances 5/3, n=4 each: t = -2/sqrt(5/6) = -2.8284..., dof = 6.
  CHECK(r.t == doctest::Approx(-2.0 / std::sqrt(5.0 / 6.0)).epsilon(1e-10));
  CHECK(r.dof == doctest::Approx(6.0).epsilon(1e-10));

  const WelchResult swapped = welch_t({3, 4, 5, 6}, {1, 2, 3, 4});
  CHECK(swapped.t == doctest::Approx(-r.t).epsilon(1e-12));
  CHECK(swapped.p == doctest::Approx(r.p).epsilon(1e-12));
}

TEST_CASE("welch t degenerate cases") {
  const WelchResult eq = welch_t({2, 2}, {2, 2});
  CHECK(eq.degenerate);
  CHECK(eq.t == 0.0);
  CHECK(eq.p == 1.0);
  const WelchResult diff = welch_t({2, 2}, {3, 3});
  CHECK(diff.degenerate);
  CHECK(std::isinf(diff.t));
  CHECK(diff.p == 0.0);
}

TEST_CASE("cohens d hand values") {
  CHECK(cohens_d({1, 2, 3}, {2, 3, 4}) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(cohens_d({1, 2, 3}, {1, 2, 3}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cohens_d({0, 0}, {1, 1}), NumericError);
}

TEST_CASE("student t two-sided p matches high-precision references") {
  // Reference values computed with an independent high-precision library.
  CHECK(student_t_two_sided_p(1.0, 1) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(student_t_two_sided_p(2.0, 4) == doctest::Approx(0.1161165235168155).epsilon(1e-6));
  CHECK(student_t_two_sided_p(2.5, 10) == doctest::Approx(0.031446844236608776).epsilon(1e-6));
  CHECK(student_t_two_sided_p(0.5, 30) == doctest::Approx(0.6207230048851273).epsilon(1e-6));
  CHECK(student_t_two_sided_p(3.0, 7) == doctest::Approx(0.019942126131992522).epsilon(1e-6));
  CHECK(student_t_two_sided_p(1.96, 1000) == doctest::Approx(0.05027318495574871).epsilon(1e-6));
  CHECK(student_t_two_sided_p(-2.0, 4) == doctest::Approx(student_t_two_sided_p(2.0, 4)));
}

TEST_CASE("incomplete beta endpoints and symmetry") {
  CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
  // I_x(a,b) = 1 - I_{1-x}(b,a)
  CHECK(incomplete_beta(2.5, 1.5, 0.3) ==
        doctest::Approx(1.0 - incomplete_beta(1.5, 2.5, 0.7)).epsilon(1e-12));
  // I_x(1,1) = x
  CHECK(incomplete_beta(1.0, 1.0, 0.42) == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("dice hand values") {
  LabelVolume a(4, 1, 1, 9), b(4, 1, 1, 9);
  a.labels = {1, 1, 0, 0};
  b.labels = {1, 1, 0, 0};
  CHECK(dice(a, b, 1) == doctest::Approx(1.0));
  b.labels = {0, 0, 1, 1};
  CHECK(dice(a, b, 1) == doctest::Approx(0.0));
  b.labels = {1, 0, 1, 0};
  CHECK(dice(a, b, 1) == doctest::Approx(0.5));
  CHECK(dice(a, b, 5) == doctest::Approx(1.0));  // both empty
}

TEST_CASE("volume series validation") {
  VolumeSeries s;
  s.times = {0, 1, 1};
  s.values = {1, 2, 3};
  CHECK_THROWS_AS(s.validate(2), DataError);
  s.times = {0, 1, 2};
  s.values = {1, -2, 3};
  CHECK_THROWS_AS(s.validate(2), DataError);
  s.values = {1, 2, 3};
  CHECK_NOTHROW(s.validate(3));
  CHECK_THROWS_AS(s.validate(4), DataError);
}
