#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace brwre {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

// log(sum exp(v_i)) with max shift; -inf for an empty range.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return kNegInf;
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// log(sum_i exp(t * x_i)) over particle positions, max-shifted.
inline double log_sum_exp_scaled(std::span<const double> positions, double t) {
  if (positions.empty()) return kNegInf;
  auto [lo, hi] = std::minmax_element(positions.begin(), positions.end());
  const double m = t >= 0.0 ? t * *hi : t * *lo;
  double s = 0.0;
  for (double x : positions) s += std::exp(t * x - m);
  return m + std::log(s);
}

// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

// Welford accumulator; se() is the standard error of the mean.
class RunningStats {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double sd() const { return std::sqrt(variance()); }
  double se() const { return n_ > 0 ? sd() / std::sqrt(static_cast<double>(n_)) : 0.0; }
  MeanSE summary() const { return {mean(), se(), n_}; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline MeanSE mean_se(std::span<const double> v) {
  RunningStats s;
  for (double x : v) s.add(x);
  return s.summary();
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  // -inf entries may appear (empty-count replicates); keep the convention
  // median = lower middle to stay well defined for extended reals.
  const double a = v[n / 2 - 1], b = v[n / 2];
  if (!std::isfinite(a) || !std::isfinite(b)) return a;
  return 0.5 * (a + b);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
};

// Ordinary least squares of y on x with residual-based slope SE.
inline LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("fit_line needs two samples of equal size >= 2");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (x.size() > 2) {
    double ss_res = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - (f.intercept + f.slope * x[i]);
      ss_res += r * r;
    }
    f.slope_se = std::sqrt(ss_res / (n - 2.0) / sxx);
  }
  return f;
}

}  // namespace brwre
