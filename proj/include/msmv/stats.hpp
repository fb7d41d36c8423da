#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "msmv/errors.hpp"
#include "msmv/rng.hpp"

namespace msmv::stats {

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double e : v) s += e;
  return s / static_cast<double>(v.size());
}

// Unbiased sample variance.
inline double variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double e : v) s += (e - m) * (e - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double standard_error(std::span<const double> v) {
  return v.size() < 2 ? 0.0 : std::sqrt(variance(v) / static_cast<double>(v.size()));
}

inline double central_moment(std::span<const double> v, int k) {
  const double m = mean(v);
  double s = 0.0;
  for (double e : v) s += std::pow(e - m, k);
  return s / static_cast<double>(v.size());
}

inline double excess_kurtosis(std::span<const double> v) {
  const double m2 = central_moment(v, 2);
  return central_moment(v, 4) / (m2 * m2) - 3.0;
}

// Linear-interpolated quantile of a sample, q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - t) + v[hi] * t;
}

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double slope_se = 0.0;
};

inline LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw ConfigurationError("line fit needs at least two points");
  const double mx = mean(x), my = mean(y);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - (f.intercept + f.slope * x[i]);
    sse += r * r;
  }
  f.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  f.slope_se = n > 2 ? std::sqrt(sse / static_cast<double>(n - 2) / sxx) : 0.0;
  return f;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool contains(double v) const { return lo <= v && v <= hi; }
};

// Percentile interval of a statistic over `resamples` bootstrap draws of
// `count` indices. Resample r uses the counter stream (seed, bootstrap, r).
template <class Statistic>
Interval bootstrap_interval(std::size_t count, std::size_t resamples, std::uint64_t seed, Statistic&& stat,
                            double level = 0.95) {
  const CounterRng rng(seed);
  std::vector<double> values;
  values.reserve(resamples);
  std::vector<std::size_t> idx(count);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < count; ++i) {
      const double u = rng.uniform(Channel::bootstrap, r, i);
      idx[i] = std::min(count - 1, static_cast<std::size_t>(u * static_cast<double>(count)));
    }
    values.push_back(stat(idx));
  }
  const double a = (1.0 - level) / 2.0;
  return {quantile(values, a), quantile(values, 1.0 - a)};
}

}  // namespace msmv::stats
