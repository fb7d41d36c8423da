#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "msmv/errors.hpp"

namespace msmv {

using ConstVec = std::span<const double>;
using OutVec = std::span<double>;
using TestFunction = std::function<double(ConstVec)>;

class MeasureView;

// Weighted point cloud standing in for a probability law. Samples are stored
// row-major as count x dim. Empty weights mean uniform.
class EmpiricalMeasure {
 public:
  EmpiricalMeasure() = default;

  EmpiricalMeasure(std::vector<double> samples, std::size_t dim, std::vector<double> weights = {})
      : samples_(std::move(samples)), weights_(std::move(weights)), dim_(dim) {
    if (dim_ == 0) throw ConfigurationError("measure dimension must be positive");
    if (samples_.empty() || samples_.size() % dim_ != 0)
      throw ConfigurationError("measure samples must be a nonempty multiple of the dimension");
    for (std::size_t i = 0; i < samples_.size(); ++i)
      if (!std::isfinite(samples_[i])) throw EvaluationError("non-finite measure sample", i / dim_);
    if (!weights_.empty()) {
      if (weights_.size() != size()) throw ConfigurationError("weight count does not match sample count");
      double total = 0.0;
      for (std::size_t i = 0; i < weights_.size(); ++i) {
        if (!(weights_[i] >= 0.0) || !std::isfinite(weights_[i]))
          throw EvaluationError("negative or non-finite weight", i);
        total += weights_[i];
      }
      if (std::abs(total - 1.0) > 1e-12) throw ConfigurationError("weights must sum to 1");
    }
  }

  static EmpiricalMeasure dirac(ConstVec point) {
    return EmpiricalMeasure(std::vector<double>(point.begin(), point.end()), point.size());
  }
  static EmpiricalMeasure dirac(double point) { return EmpiricalMeasure({point}, 1); }

  std::size_t size() const { return dim_ == 0 ? 0 : samples_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  bool uniform() const { return weights_.empty(); }
  ConstVec point(std::size_t i) const { return ConstVec(samples_).subspan(i * dim_, dim_); }
  double weight(std::size_t i) const { return weights_.empty() ? 1.0 / static_cast<double>(size()) : weights_[i]; }
  const std::vector<double>& samples() const { return samples_; }
  const std::vector<double>& weights() const { return weights_; }

  // Returns a copy with every sample multiplied by c.
  EmpiricalMeasure scaled(double c) const {
    std::vector<double> s = samples_;
    for (double& v : s) v *= c;
    return EmpiricalMeasure(std::move(s), dim_, weights_);
  }

  MeasureView view(std::span<const TestFunction> features = {}) const;

 private:
  std::vector<double> samples_;
  std::vector<double> weights_;
  std::size_t dim_ = 0;
};

// Read-only handle onto a law. Mean, second moment and the model-declared
// feature integrals are computed once at construction; integrate() remains
// available for arbitrary test functions.
class MeasureView {
 public:
  MeasureView() = default;

  MeasureView(ConstVec samples, std::size_t dim, ConstVec weights = {},
              std::span<const TestFunction> features = {})
      : samples_(samples), weights_(weights), dim_(dim) {
    if (dim_ == 0 || samples_.empty() || samples_.size() % dim_ != 0)
      throw ConfigurationError("measure view needs a nonempty sample block");
    count_ = samples_.size() / dim_;
    if (!weights_.empty() && weights_.size() != count_)
      throw ConfigurationError("weight count does not match sample count");
    mean_.assign(dim_, 0.0);
    double second = 0.0;
    if (weights_.empty()) {
      for (std::size_t i = 0; i < count_; ++i) {
        for (std::size_t c = 0; c < dim_; ++c) {
          const double v = samples_[i * dim_ + c];
          mean_[c] += v;
          second += v * v;
        }
      }
      const double inv = 1.0 / static_cast<double>(count_);
      for (double& m : mean_) m *= inv;
      second *= inv;
    } else {
      for (std::size_t i = 0; i < count_; ++i) {
        for (std::size_t c = 0; c < dim_; ++c) {
          const double v = samples_[i * dim_ + c];
          mean_[c] += weights_[i] * v;
          second += weights_[i] * v * v;
        }
      }
    }
    second_moment_ = second;
    features_.reserve(features.size());
    for (const auto& f : features) features_.push_back(integrate(f));
  }

  // Oracle law given by an integration rule, e.g. closed-form Gaussian quadrature.
  static MeasureView analytic(std::size_t dim, std::function<double(const TestFunction&)> integrator,
                              std::span<const TestFunction> features = {}) {
    MeasureView v;
    v.dim_ = dim;
    v.analytic_ = std::move(integrator);
    v.mean_.assign(dim, 0.0);
    for (std::size_t c = 0; c < dim; ++c) v.mean_[c] = v.analytic_([c](ConstVec x) { return x[c]; });
    v.second_moment_ = v.analytic_([](ConstVec x) {
      double s = 0.0;
      for (double e : x) s += e * e;
      return s;
    });
    for (const auto& f : features) v.features_.push_back(v.analytic_(f));
    return v;
  }

  double integrate(const TestFunction& f) const {
    if (analytic_) return analytic_(f);
    double total = 0.0;
    const double uw = 1.0 / static_cast<double>(count_);
    for (std::size_t i = 0; i < count_; ++i) {
      const double v = f(samples_.subspan(i * dim_, dim_));
      if (!std::isfinite(v)) throw EvaluationError("test function is not finite at sample " + std::to_string(i), i);
      total += (weights_.empty() ? uw : weights_[i]) * v;
    }
    return total;
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return count_; }
  bool is_analytic() const { return static_cast<bool>(analytic_); }
  double mean(std::size_t c = 0) const { return mean_[c]; }
  ConstVec mean_vector() const { return mean_; }
  double second_moment() const { return second_moment_; }
  double feature(std::size_t i) const { return features_.at(i); }
  std::size_t feature_count() const { return features_.size(); }
  ConstVec atom(std::size_t i) const { return samples_.subspan(i * dim_, dim_); }
  double weight(std::size_t i) const { return weights_.empty() ? 1.0 / static_cast<double>(count_) : weights_[i]; }

 private:
  ConstVec samples_;
  ConstVec weights_;
  std::size_t dim_ = 0;
  std::size_t count_ = 0;
  std::function<double(const TestFunction&)> analytic_;
  std::vector<double> mean_;
  double second_moment_ = 0.0;
  std::vector<double> features_;
};

inline MeasureView EmpiricalMeasure::view(std::span<const TestFunction> features) const {
  return MeasureView(samples_, dim_, weights_, features);
}

inline double integrate(const MeasureView& m, const TestFunction& f) { return m.integrate(f); }

namespace detail {

inline void require_scalar(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const char* op) {
  if (a.dim() != 1 || b.dim() != 1)
    throw UnsupportedDimensionError(std::string(op) + " is only defined for one-dimensional measures");
}

struct Atom {
  double x;
  double w;
};

// Atoms sorted by value; stable so ties keep their original order.
inline std::vector<Atom> sorted_atoms(const EmpiricalMeasure& m) {
  std::vector<Atom> atoms(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) atoms[i] = {m.samples()[i], m.weight(i)};
  std::stable_sort(atoms.begin(), atoms.end(), [](const Atom& l, const Atom& r) { return l.x < r.x; });
  return atoms;
}

}  // namespace detail

// Exact W2 between two discrete laws on the line via the quantile coupling.
inline double wasserstein2_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  detail::require_scalar(a, b, "wasserstein2_1d");
  const auto pa = detail::sorted_atoms(a);
  const auto pb = detail::sorted_atoms(b);
  if (a.uniform() && b.uniform() && a.size() == b.size()) {
    double cost = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      const double d = pa[i].x - pb[i].x;
      cost += d * d;
    }
    return std::sqrt(cost / static_cast<double>(pa.size()));
  }
  std::size_t i = 0, j = 0;
  double ra = pa[0].w, rb = pb[0].w, cost = 0.0;
  while (i < pa.size() && j < pb.size()) {
    const double d = pa[i].x - pb[j].x;
    const double mass = std::min(ra, rb);
    cost += mass * d * d;
    if (ra == rb) {
      if (++i < pa.size()) ra = pa[i].w;
      if (++j < pb.size()) rb = pb[j].w;
    } else if (ra < rb) {
      rb -= ra;
      if (++i < pa.size()) ra = pa[i].w;
    } else {
      ra -= rb;
      if (++j < pb.size()) rb = pb[j].w;
    }
  }
  return std::sqrt(std::max(cost, 0.0));
}

// Two-sample Kolmogorov-Smirnov statistic sup |F_A - F_B|.
inline double ks_statistic(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  detail::require_scalar(a, b, "ks_statistic");
  const auto pa = detail::sorted_atoms(a);
  const auto pb = detail::sorted_atoms(b);
  std::size_t i = 0, j = 0;
  double fa = 0.0, fb = 0.0, sup = 0.0;
  while (i < pa.size() || j < pb.size()) {
    double x;
    if (j >= pb.size() || (i < pa.size() && pa[i].x <= pb[j].x))
      x = pa[i].x;
    else
      x = pb[j].x;
    while (i < pa.size() && pa[i].x == x) fa += pa[i++].w;
    while (j < pb.size() && pb[j].x == x) fb += pb[j++].w;
    sup = std::max(sup, std::abs(fa - fb));
  }
  return std::min(sup, 1.0);
}

// W2 between two laws with at most two atoms each, in any dimension. The
// optimal coupling is an endpoint of the one-parameter family of couplings.
inline double wasserstein2_two_atom(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.dim() != b.dim()) throw UnsupportedDimensionError("wasserstein2_two_atom: dimension mismatch");
  if (a.size() > 2 || b.size() > 2) throw UnsupportedDimensionError("wasserstein2_two_atom: more than two atoms");
  auto sq = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.dim(); ++c) {
      const double d = a.point(i)[c] - b.point(j)[c];
      s += d * d;
    }
    return s;
  };
  const std::size_t na = a.size(), nb = b.size();
  const double p = a.weight(0), q = b.weight(0);
  auto cost = [&](double t) {
    // t = mass moved from a0 to b0.
    double c = t * sq(0, 0);
    if (nb > 1) c += (p - t) * sq(0, 1);
    if (na > 1) c += (q - t) * sq(1, 0);
    if (na > 1 && nb > 1) c += (1.0 - p - q + t) * sq(1, 1);
    return c;
  };
  double lo = std::max(0.0, p + q - 1.0), hi = std::min(p, q);
  if (na == 1) lo = hi = q;
  if (nb == 1) lo = hi = p;
  return std::sqrt(std::max(0.0, std::min(cost(lo), cost(hi))));
}

// Compresses a one-dimensional law into k equal-mass bins, each represented
// by its conditional mean. Preserves the mean exactly up to rounding.
inline EmpiricalMeasure compress_quantile_bins(const EmpiricalMeasure& m, std::size_t k) {
  if (m.dim() != 1) throw UnsupportedDimensionError("compress_quantile_bins needs a one-dimensional law");
  if (k == 0 || m.size() <= k) return m;
  const auto atoms = detail::sorted_atoms(m);
  std::vector<double> sums(k, 0.0), mass(k, 0.0);
  const double width = 1.0 / static_cast<double>(k);
  double cum = 0.0;
  std::size_t bin = 0;
  for (const auto& at : atoms) {
    double w = at.w;
    while (w > 0.0) {
      const double room = (bin + 1 == k) ? std::numeric_limits<double>::infinity()
                                         : (static_cast<double>(bin + 1) * width - cum);
      const double take = std::min(w, std::max(room, 0.0));
      if (take > 0.0) {
        sums[bin] += take * at.x;
        mass[bin] += take;
        cum += take;
        w -= take;
      }
      if (w > 0.0) ++bin;
    }
  }
  std::vector<double> pts, wts;
  for (std::size_t b = 0; b < k; ++b) {
    if (mass[b] <= 0.0) continue;
    pts.push_back(sums[b] / mass[b]);
    wts.push_back(mass[b]);
  }
  const double total = std::accumulate(wts.begin(), wts.end(), 0.0);
  for (double& w : wts) w /= total;
  return EmpiricalMeasure(std::move(pts), 1, std::move(wts));
}

// Deterministic stride subsample of k atoms (uniform weights).
inline EmpiricalMeasure stride_subsample(const EmpiricalMeasure& m, std::size_t k) {
  if (k == 0 || m.size() <= k) return m;
  std::vector<double> pts;
  pts.reserve(k * m.dim());
  for (std::size_t s = 0; s < k; ++s) {
    const auto p = m.point(s * m.size() / k);
    pts.insert(pts.end(), p.begin(), p.end());
  }
  return EmpiricalMeasure(std::move(pts), m.dim());
}

}  // namespace msmv
