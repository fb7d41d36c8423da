#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "msmv/errors.hpp"
#include "msmv/measure.hpp"
#include "msmv/rng.hpp"

namespace msmv {

struct Dims {
  std::size_t n = 1;   // slow state
  std::size_t m = 1;   // fast state
  std::size_t d1 = 1;  // slow noise
  std::size_t d2 = 1;  // fast noise
};

// Matrices are written row-major into the output span.
using SlowDrift = std::function<void(ConstVec x, const MeasureView& mu, ConstVec y, const MeasureView& nu, OutVec out)>;
using SlowDiffusion = std::function<void(ConstVec x, const MeasureView& mu, OutVec out)>;
using FastCoefficient = std::function<void(ConstVec y, const MeasureView& nu, OutVec out)>;
using SlowDriftMeasureDerivative =
    std::function<void(ConstVec x, const MeasureView& mu, ConstVec y, const MeasureView& nu, ConstVec xt, OutVec out)>;
// Directional derivatives of the diffusion matrices: out = D sigma [u], shape of sigma.
using SlowDiffusionDirectional = std::function<void(ConstVec x, const MeasureView& mu, ConstVec u, OutVec out)>;
using SlowDiffusionMeasureDirectional =
    std::function<void(ConstVec x, const MeasureView& mu, ConstVec xt, ConstVec u, OutVec out)>;
using FastDiffusionDirectional = std::function<void(ConstVec y, const MeasureView& nu, ConstVec u, OutVec out)>;

struct ModelDerivatives {
  SlowDrift dx_b1;                         // n x n
  SlowDrift dy_b1;                         // n x m
  SlowDriftMeasureDerivative dmu_b1;       // n x n at x~
  SlowDiffusionDirectional dx_sigma1;      // n x d1
  SlowDiffusionMeasureDirectional dmu_sigma1;  // n x d1 at x~
  FastCoefficient dy_b2;                   // m x m
  FastDiffusionDirectional dy_sigma2;      // m x d2
};

struct ModelSpec {
  std::string name;
  Dims dims;
  SlowDrift b1;
  SlowDiffusion sigma1;
  FastCoefficient b2;
  FastCoefficient sigma2;
  ModelDerivatives derivs;
  // Integrals of these functions against mu (slow) and nu (fast) are cached on
  // every measure view handed to the callbacks.
  std::vector<TestFunction> slow_features;
  std::vector<TestFunction> fast_features;

  MeasureView slow_view(ConstVec samples, ConstVec weights = {}) const {
    return MeasureView(samples, dims.n, weights, slow_features);
  }
  MeasureView fast_view(ConstVec samples, ConstVec weights = {}) const {
    return MeasureView(samples, dims.m, weights, fast_features);
  }
  MeasureView slow_view(const EmpiricalMeasure& m) const { return m.view(slow_features); }
  MeasureView fast_view(const EmpiricalMeasure& m) const { return m.view(fast_features); }

  void validate() const {
    if (dims.n == 0 || dims.m == 0 || dims.d1 == 0 || dims.d2 == 0)
      throw ConfigurationError("model dimensions must be positive");
    if (!b1 || !sigma1 || !b2 || !sigma2) throw ConfigurationError("model '" + name + "' is missing a coefficient");
  }

  // Throws CapabilityError naming the first missing derivative.
  void require(std::initializer_list<const char*> names, const std::string& context) const {
    for (const char* n : names) {
      const std::string s(n);
      const bool ok = (s == "dx_b1" && derivs.dx_b1) || (s == "dy_b1" && derivs.dy_b1) ||
                      (s == "dmu_b1" && derivs.dmu_b1) || (s == "dx_sigma1" && derivs.dx_sigma1) ||
                      (s == "dmu_sigma1" && derivs.dmu_sigma1) || (s == "dy_b2" && derivs.dy_b2) ||
                      (s == "dy_sigma2" && derivs.dy_sigma2);
      if (!ok) throw CapabilityError(context + " needs derivative callback '" + s + "' on model '" + name + "'");
    }
  }
};

struct ExampleParams {
  double a = 1.0;
  double b = 1.0;
  double q = 1.0;
  double k = 1.0;
  double m = 0.25;
  double p = 2.0;

  // k = 1/(24p), m = 1/(48p).
  static ExampleParams with_reference_constants(double p, double a = 1.0, double b = 1.0, double q = 1.0) {
    return ExampleParams{a, b, q, 1.0 / (24.0 * p), 1.0 / (48.0 * p), p};
  }

  void validate() const {
    if (!(k > 0.0)) throw ConfigurationError("example.k must be positive", "example.k");
    if (!(m >= 0.0)) throw ConfigurationError("example.m must be nonnegative", "example.m");
    if (!(k > m)) throw ConfigurationError("example.k must exceed example.m", "example.k");
    if (!(p >= 2.0)) throw ConfigurationError("example.p must be at least 2", "example.p");
    for (double v : {a, b, q})
      if (!std::isfinite(v)) throw ConfigurationError("example frequencies must be finite");
  }
};

inline double cubic_ratio(double x) {
  const double ax = std::abs(x);
  return ax * ax * ax / (1.0 + x * x);
}

// d/dx of |x|^3/(1+x^2).
inline double cubic_ratio_derivative(double x) {
  const double x2 = x * x;
  const double den = (1.0 + x2) * (1.0 + x2);
  const double mag = (3.0 * x2 + x2 * x2) / den;
  return x < 0.0 ? -mag : mag;
}

// Scalar reference model:
//   b1 = sin(a x) + <mu> + cos(b y) + int cos(q y') nu(dy')
//   sigma1 = int |x'|^3/(1+x'^2) mu(dx'),  b2 = -k y + m <nu>,  sigma2 = 1.
inline ModelSpec build_example_model(const ExampleParams& params) {
  params.validate();
  const ExampleParams P = params;
  ModelSpec s;
  s.name = "example";
  s.dims = {1, 1, 1, 1};
  s.slow_features = {[](ConstVec x) { return cubic_ratio(x[0]); }};
  s.fast_features = {[q = P.q](ConstVec y) { return std::cos(q * y[0]); }};
  s.b1 = [P](ConstVec x, const MeasureView& mu, ConstVec y, const MeasureView& nu, OutVec out) {
    out[0] = std::sin(P.a * x[0]) + mu.mean() + std::cos(P.b * y[0]) + nu.feature(0);
  };
  s.sigma1 = [](ConstVec, const MeasureView& mu, OutVec out) { out[0] = mu.feature(0); };
  if (P.m == 0.0) {
    s.b2 = [P](ConstVec y, const MeasureView&, OutVec out) { out[0] = -P.k * y[0]; };
  } else {
    s.b2 = [P](ConstVec y, const MeasureView& nu, OutVec out) { out[0] = -P.k * y[0] + P.m * nu.mean(); };
  }
  s.sigma2 = [](ConstVec, const MeasureView&, OutVec out) { out[0] = 1.0; };

  s.derivs.dx_b1 = [P](ConstVec x, const MeasureView&, ConstVec, const MeasureView&, OutVec out) {
    out[0] = P.a * std::cos(P.a * x[0]);
  };
  s.derivs.dy_b1 = [P](ConstVec, const MeasureView&, ConstVec y, const MeasureView&, OutVec out) {
    out[0] = -P.b * std::sin(P.b * y[0]);
  };
  s.derivs.dmu_b1 = [](ConstVec, const MeasureView&, ConstVec, const MeasureView&, ConstVec, OutVec out) {
    out[0] = 1.0;
  };
  s.derivs.dx_sigma1 = [](ConstVec, const MeasureView&, ConstVec, OutVec out) { out[0] = 0.0; };
  s.derivs.dmu_sigma1 = [](ConstVec, const MeasureView&, ConstVec xt, ConstVec u, OutVec out) {
    out[0] = cubic_ratio_derivative(xt[0]) * u[0];
  };
  s.derivs.dy_b2 = [P](ConstVec, const MeasureView&, OutVec out) { out[0] = -P.k; };
  s.derivs.dy_sigma2 = [](ConstVec, const MeasureView&, ConstVec, OutVec out) { out[0] = 0.0; };
  return s;
}

// True when some probe shows b1 changing with (y, nu) at fixed (x, mu).
inline bool depends_on_fast(const ModelSpec& model, std::uint64_t seed, std::size_t probes = 16, double box = 2.0) {
  model.validate();
  const auto [n, m, d1, d2] = model.dims;
  const CounterRng rng(seed);
  std::vector<double> x(n), mu(2 * n), y(m), nu(2 * m), ref(n), out(n);
  for (std::size_t i = 0; i < probes; ++i) {
    DrawStream s(rng, Channel::probe, i);
    for (double& v : x) v = box * (2.0 * s.uniform() - 1.0);
    for (double& v : mu) v = box * (2.0 * s.uniform() - 1.0);
    const EmpiricalMeasure mum(mu, n);
    const MeasureView muv = model.slow_view(mum);
    for (std::size_t k = 0; k < 4; ++k) {
      for (double& v : y) v = box * (2.0 * s.uniform() - 1.0);
      for (double& v : nu) v = box * (2.0 * s.uniform() - 1.0);
      const EmpiricalMeasure num(nu, m);
      model.b1(x, muv, y, model.fast_view(num), k == 0 ? OutVec(ref) : OutVec(out));
      if (k > 0 && !std::equal(ref.begin(), ref.end(), out.begin())) return true;
    }
  }
  return false;
}

struct AuditReport {
  double lip_b1s1_hat = 0.0;
  double lip_b2s2_hat = 0.0;
  double beta1_hat = 0.0;
  double beta2_hat = 0.0;
  double kappa_hat = 0.0;  // inf of the same-law dissipation quotient
  double margin = 0.0;
  double alpha1 = 0.0;
  double alpha2 = 0.0;
  double p = 2.0;
  bool margin_positive = false;
  bool sampled_estimate = true;  // a finite probe set never proves the conditions
  std::size_t sample_count = 0;
};

namespace detail {

inline void check_finite(ConstVec out, const char* what, std::initializer_list<ConstVec> inputs) {
  for (double v : out) {
    if (!std::isfinite(v)) {
      std::vector<double> flat;
      for (auto in : inputs) flat.insert(flat.end(), in.begin(), in.end());
      throw ModelError(std::string("non-finite output from ") + what, std::move(flat));
    }
  }
}

inline double sq_dist(ConstVec a, ConstVec b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct TwoAtom {
  std::vector<double> pts;
  std::vector<double> w;
  EmpiricalMeasure measure(std::size_t dim) const { return EmpiricalMeasure(pts, dim, w); }
};

inline TwoAtom draw_two_atom(DrawStream& s, std::size_t dim, double box) {
  TwoAtom t;
  t.pts.resize(2 * dim);
  for (double& v : t.pts) v = box * (2.0 * s.uniform() - 1.0);
  const double w0 = s.uniform();
  t.w = {w0, 1.0 - w0};
  return t;
}

}  // namespace detail

// Sampled estimate of the Lipschitz and dissipativity constants. Probe pair i
// is a pure function of (seed, i), so extending the probe count only adds
// probes and every max/min is monotone in the probe count.
inline AuditReport audit_assumptions(const ModelSpec& model, double p, std::size_t probes, double box,
                                     std::uint64_t seed) {
  model.validate();
  if (probes < 2) throw ConfigurationError("audit needs at least two probes", "audit.probes");
  if (!(box > 0.0)) throw ConfigurationError("audit box must be positive", "audit.box");
  const auto [n, m, d1, d2] = model.dims;
  const CounterRng rng(seed);

  AuditReport r;
  r.p = p;
  r.sample_count = probes;
  r.kappa_hat = std::numeric_limits<double>::infinity();

  struct CrossProbe {
    double dissipation, dy2, w2;
  };
  std::vector<CrossProbe> cross;
  cross.reserve(probes);

  std::vector<double> x1(n), x2(n), y1(m), y2(m), b1a(n), b1b(n), s1a(n * d1), s1b(n * d1);
  std::vector<double> b2a(m), b2b(m), s2a(m * d2), s2b(m * d2), b2c(m), s2c(m * d2);
  for (std::size_t i = 0; i < probes; ++i) {
    DrawStream s(rng, Channel::probe, i);
    for (double& v : x1) v = box * (2.0 * s.uniform() - 1.0);
    for (double& v : x2) v = box * (2.0 * s.uniform() - 1.0);
    for (double& v : y1) v = box * (2.0 * s.uniform() - 1.0);
    for (double& v : y2) v = box * (2.0 * s.uniform() - 1.0);
    const auto mu1 = detail::draw_two_atom(s, n, box);
    const auto mu2 = detail::draw_two_atom(s, n, box);
    const auto nu1 = detail::draw_two_atom(s, m, box);
    auto nu2 = detail::draw_two_atom(s, m, box);
    // Every other probe compares a law with a translate of itself, where W2
    // equals the shift of the mean.
    if (i % 2 == 1) {
      nu2.w = nu1.w;
      for (std::size_t c = 0; c < m; ++c) nu2.pts[m + c] = nu1.pts[m + c] + (nu2.pts[c] - nu1.pts[c]);
    }
    const auto mu1m = mu1.measure(n), mu2m = mu2.measure(n), nu1m = nu1.measure(m), nu2m = nu2.measure(m);
    const auto mu1v = model.slow_view(mu1m), mu2v = model.slow_view(mu2m);
    const auto nu1v = model.fast_view(nu1m), nu2v = model.fast_view(nu2m);
    const double wmu = std::pow(wasserstein2_two_atom(mu1m, mu2m), 2);
    const double wnu = std::pow(wasserstein2_two_atom(nu1m, nu2m), 2);

    model.b1(x1, mu1v, y1, nu1v, b1a);
    detail::check_finite(b1a, "b1", {x1, mu1.pts, y1, nu1.pts});
    model.b1(x2, mu2v, y2, nu2v, b1b);
    detail::check_finite(b1b, "b1", {x2, mu2.pts, y2, nu2.pts});
    model.sigma1(x1, mu1v, s1a);
    detail::check_finite(s1a, "sigma1", {x1, mu1.pts});
    model.sigma1(x2, mu2v, s1b);
    detail::check_finite(s1b, "sigma1", {x2, mu2.pts});
    const double den1 = detail::sq_dist(x1, x2) + wmu + detail::sq_dist(y1, y2) + wnu;
    if (den1 > 0.0)
      r.lip_b1s1_hat = std::max(r.lip_b1s1_hat, (detail::sq_dist(b1a, b1b) + detail::sq_dist(s1a, s1b)) / den1);

    model.b2(y1, nu1v, b2a);
    detail::check_finite(b2a, "b2", {y1, nu1.pts});
    model.b2(y2, nu2v, b2b);
    detail::check_finite(b2b, "b2", {y2, nu2.pts});
    model.sigma2(y1, nu1v, s2a);
    detail::check_finite(s2a, "sigma2", {y1, nu1.pts});
    model.sigma2(y2, nu2v, s2b);
    detail::check_finite(s2b, "sigma2", {y2, nu2.pts});
    const double dy2 = detail::sq_dist(y1, y2);
    const double den2 = dy2 + wnu;
    if (den2 > 0.0)
      r.lip_b2s2_hat = std::max(r.lip_b2s2_hat, (detail::sq_dist(b2a, b2b) + detail::sq_dist(s2a, s2b)) / den2);

    auto dissipation = [&](ConstVec fa, ConstVec fb, ConstVec ga, ConstVec gb) {
      double inner = 0.0;
      for (std::size_t c = 0; c < m; ++c) inner += (y1[c] - y2[c]) * (fa[c] - fb[c]);
      return 2.0 * inner + (3.0 * p - 1.0) * detail::sq_dist(ga, gb);
    };
    // Same law in both slots isolates the state dissipation.
    model.b2(y2, nu1v, b2c);
    detail::check_finite(b2c, "b2", {y2, nu1.pts});
    model.sigma2(y2, nu1v, s2c);
    detail::check_finite(s2c, "sigma2", {y2, nu1.pts});
    if (dy2 > 0.0) r.kappa_hat = std::min(r.kappa_hat, -dissipation(b2a, b2c, s2a, s2c) / dy2);
    cross.push_back({dissipation(b2a, b2b, s2a, s2b), dy2, wnu});
  }
  if (!std::isfinite(r.kappa_hat)) r.kappa_hat = 0.0;
  r.beta1_hat = r.kappa_hat / 2.0;
  for (const auto& c : cross)
    if (c.w2 > 1e-12) r.beta2_hat = std::max(r.beta2_hat, (c.dissipation + r.beta1_hat * c.dy2) / c.w2);
  r.margin = r.beta1_hat - r.beta2_hat - 6.0 * p * r.lip_b2s2_hat;
  r.margin_positive = r.margin > 0.0;
  r.alpha1 = r.beta1_hat - 3.0 * p * r.lip_b2s2_hat;
  r.alpha2 = r.beta2_hat + (3.0 * p - 1.0) * r.lip_b2s2_hat;
  return r;
}

}  // namespace msmv
