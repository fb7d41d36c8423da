#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "msmv/errors.hpp"
#include "msmv/measure.hpp"
#include "msmv/model.hpp"
#include "msmv/parallel.hpp"
#include "msmv/paths.hpp"
#include "msmv/rng.hpp"

namespace msmv {

namespace detail {

// Lowest (particle, component) pair that produced a non-finite state.
class FailureSlot {
 public:
  explicit FailureSlot(std::size_t n) : none_(static_cast<std::uint64_t>(n) << 2), code_(none_) {}
  void report(std::size_t particle, unsigned component) {
    const std::uint64_t code = (static_cast<std::uint64_t>(particle) << 2) | component;
    std::uint64_t cur = code_.load();
    while (code < cur && !code_.compare_exchange_weak(cur, code)) {
    }
  }
  bool failed() const { return code_.load() != none_; }
  std::size_t particle() const { return static_cast<std::size_t>(code_.load() >> 2); }
  unsigned component() const { return static_cast<unsigned>(code_.load() & 3); }
  void reset() { code_.store(none_); }

 private:
  std::uint64_t none_;
  std::atomic<std::uint64_t> code_;
};

inline bool all_finite(ConstVec v) {
  for (double e : v)
    if (!std::isfinite(e)) return false;
  return true;
}

// Brownian increment of the slow noise over fine step j, built from the base grid.
inline void slow_increment(const CounterRng& rng, const StepPlan& plan, std::size_t particle, std::size_t first_base,
                           std::size_t base_count, OutVec dB) {
  const std::size_t d1 = dB.size();
  const double scale = std::sqrt(plan.noise_dt);
  if (d1 == 1) {
    dB[0] = scale * rng.sum_normals(Channel::slow_noise, particle, first_base, base_count);
    return;
  }
  for (std::size_t c = 0; c < d1; ++c) {
    double s = 0.0;
    for (std::size_t r = first_base; r < first_base + base_count; ++r) s += rng.normal(Channel::slow_noise, particle, r * d1 + c);
    dB[c] = scale * s;
  }
}

inline void draw_initial(const Sampler& law, const CounterRng& rng, Channel channel, std::size_t particle, OutVec out) {
  DrawStream s(rng, channel, particle);
  law(s, out);
}

inline SeedLedger make_ledger(std::uint64_t seed, const StepPlan& plan) {
  SeedLedger l;
  l.master_seed = seed;
  l.noise_steps = plan.noise_steps;
  l.n_steps = plan.n_steps;
  l.step = plan.step;
  l.channels = {{"rho", static_cast<std::uint32_t>(Channel::rho)},
                {"xi", static_cast<std::uint32_t>(Channel::xi)},
                {"B", static_cast<std::uint32_t>(Channel::slow_noise)},
                {"W", static_cast<std::uint32_t>(Channel::fast_noise)},
                {"V", static_cast<std::uint32_t>(Channel::limit_noise)}};
  return l;
}

inline std::vector<double> frame_times(const StepPlan& plan) {
  std::vector<double> t(plan.frames());
  for (std::size_t f = 0; f < t.size(); ++f) t[f] = plan.time_of_frame(f);
  return t;
}

}  // namespace detail

// Euler-Maruyama engine for the slow-fast particle system. The fast equations
// are advanced with drift step h/eps and noise scale sqrt(h/eps), so eps = 1
// gives the frozen system. Each step first reduces the ensemble to measure
// views, then maps every particle independently.
class CoupledEngine {
 public:
  struct Parts {
    bool slow = true;
    bool fast_y0 = true;
  };

  CoupledEngine(const ModelSpec& model, double eps, const StepPlan& plan, std::size_t n, std::uint64_t seed,
                Executor& ex, Parts parts)
      : model_(model), eps_(eps), plan_(plan), n_(n), rng_(seed), ex_(ex), parts_(parts), fail_(n) {
    const auto& d = model_.dims;
    if (parts_.slow) {
      x_.assign(n * d.n, 0.0);
      xn_ = x_;
    }
    yxi_.assign(n * d.m, 0.0);
    yxin_ = yxi_;
    if (parts_.fast_y0) {
      yy0_.assign(n * d.m, 0.0);
      yy0n_ = yy0_;
    }
  }

  void initialize(const Sampler& law_rho, const Sampler& law_xi, ConstVec y0) {
    const auto& d = model_.dims;
    if (parts_.fast_y0 && y0.size() != d.m) throw ConfigurationError("y0 must have the fast dimension", "scale.y0");
    for (std::size_t i = 0; i < n_; ++i) {
      if (parts_.slow) detail::draw_initial(law_rho, rng_, Channel::rho, i, OutVec(x_).subspan(i * d.n, d.n));
      detail::draw_initial(law_xi, rng_, Channel::xi, i, OutVec(yxi_).subspan(i * d.m, d.m));
      if (parts_.fast_y0) std::copy(y0.begin(), y0.end(), yy0_.begin() + static_cast<std::ptrdiff_t>(i * d.m));
    }
    if (parts_.slow && !detail::all_finite(x_)) throw BlowUpError("non-finite initial slow draw", 0, first_bad(x_, d.n), kXEps);
    if (!detail::all_finite(yxi_)) throw BlowUpError("non-finite initial fast draw", 0, first_bad(yxi_, d.m), kYEpsXi);
  }

  // Reduce phase: empirical measures of the current ensemble.
  void reduce() {
    if (parts_.slow) mu_ = model_.slow_view(x_);
    nu_ = model_.fast_view(yxi_);
  }

  // Map phase for step j (0-based); requires reduce() on the current state.
  void advance(std::size_t j) {
    const auto& d = model_.dims;
    const double h = plan_.step;
    const double fdt = h / eps_;
    const double fsq = std::sqrt(fdt);
    fail_.reset();
    ex_.for_chunks(n_, [&](std::size_t b, std::size_t e) {
      std::vector<double> drift(d.n), diff(d.n * d.d1), dB(d.d1), f(d.m), g(d.m * d.d2), z(d.d2);
      for (std::size_t i = b; i < e; ++i) {
        if (parts_.slow) {
          const ConstVec xi(x_.data() + i * d.n, d.n);
          const ConstVec ysrc = parts_.fast_y0 ? ConstVec(yy0_.data() + i * d.m, d.m) : ConstVec(yxi_.data() + i * d.m, d.m);
          model_.b1(xi, mu_, ysrc, nu_, drift);
          model_.sigma1(xi, mu_, diff);
          detail::slow_increment(rng_, plan_, i, j * plan_.noise_per_step, plan_.noise_per_step, dB);
          double* out = xn_.data() + i * d.n;
          for (std::size_t a = 0; a < d.n; ++a) {
            double v = xi[a] + drift[a] * h;
            for (std::size_t c = 0; c < d.d1; ++c) v += diff[a * d.d1 + c] * dB[c];
            out[a] = v;
          }
          if (!detail::all_finite(ConstVec(out, d.n))) fail_.report(i, 0);
        }
        for (std::size_t c = 0; c < d.d2; ++c) z[c] = fsq * rng_.normal(Channel::fast_noise, i, j * d.d2 + c);
        fast_update(ConstVec(yxi_.data() + i * d.m, d.m), OutVec(yxin_.data() + i * d.m, d.m), f, g, z, fdt);
        if (!detail::all_finite(ConstVec(yxin_.data() + i * d.m, d.m))) fail_.report(i, 1);
        if (parts_.fast_y0) {
          fast_update(ConstVec(yy0_.data() + i * d.m, d.m), OutVec(yy0n_.data() + i * d.m, d.m), f, g, z, fdt);
          if (!detail::all_finite(ConstVec(yy0n_.data() + i * d.m, d.m))) fail_.report(i, 2);
        }
      }
    });
    if (fail_.failed()) {
      static constexpr const char* labels[] = {kXEps, kYEpsXi, kYEpsY0};
      const char* label = labels[fail_.component()];
      throw BlowUpError("non-finite state in " + std::string(label) + " at step " + std::to_string(j + 1) +
                            ", particle " + std::to_string(fail_.particle()),
                        j + 1, fail_.particle(), label);
    }
    x_.swap(xn_);
    yxi_.swap(yxin_);
    yy0_.swap(yy0n_);
  }

  ConstVec x() const { return x_; }
  ConstVec y_xi() const { return yxi_; }
  ConstVec y_y0() const { return yy0_; }
  const MeasureView& mu() const { return mu_; }
  const MeasureView& nu() const { return nu_; }
  const CounterRng& rng() const { return rng_; }
  const StepPlan& plan() const { return plan_; }

 private:
  void fast_update(ConstVec y, OutVec out, std::vector<double>& f, std::vector<double>& g, const std::vector<double>& z,
                   double fdt) const {
    const auto& d = model_.dims;
    model_.b2(y, nu_, f);
    model_.sigma2(y, nu_, g);
    for (std::size_t a = 0; a < d.m; ++a) {
      double v = y[a] + f[a] * fdt;
      for (std::size_t c = 0; c < d.d2; ++c) v += g[a * d.d2 + c] * z[c];
      out[a] = v;
    }
  }

  static std::size_t first_bad(const std::vector<double>& v, std::size_t dim) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i])) return i / dim;
    return 0;
  }

  const ModelSpec& model_;
  double eps_;
  StepPlan plan_;
  std::size_t n_;
  CounterRng rng_;
  Executor& ex_;
  Parts parts_;
  detail::FailureSlot fail_;
  std::vector<double> x_, xn_, yxi_, yxin_, yy0_, yy0n_;
  MeasureView mu_, nu_;
};

namespace detail {

inline void record_frame(Ensemble& e, std::size_t f, ConstVec block) { e.set_frame(f, block); }

inline void check_coupled_inputs(const ModelSpec& model, std::size_t n) {
  model.validate();
  if (n < 2) throw ConfigurationError("at least two particles are required", "run.n_particles");
}

}  // namespace detail

// Coupled slow-fast particle system on the step min(h, eps/rho_fast).
inline PathBundle simulate_coupled(const ModelSpec& model, const ScaleParams& scale, const GridSpec& grid,
                                   std::size_t n_particles, std::uint64_t seed, const RunContext& ctx = {}) {
  detail::check_coupled_inputs(model, n_particles);
  scale.validate();
  if (!(grid.rho_fast > 0.0)) throw ConfigurationError("grid.rho_fast must be positive", "grid.rho_fast");
  PathBundle out;
  if (grid.rho_fast <= 1.0)
    warn(out.warnings, "under-resolved fast scale: eps/rho_fast >= eps (rho_fast = " + std::to_string(grid.rho_fast) + ")",
         ctx.strict);
  const double step = std::min(grid.h, scale.eps / grid.rho_fast);
  const StepPlan plan = make_plan(scale.T, step, grid.record_dt, grid.noise_steps);
  Executor ex(ctx.threads);
  CoupledEngine engine(model, scale.eps, plan, n_particles, seed, ex, {});
  engine.initialize(scale.law_rho, scale.law_xi, scale.y0);

  const auto& d = model.dims;
  out.times = detail::frame_times(plan);
  Ensemble& ex_x = out.ensembles[kXEps] = Ensemble(n_particles, plan.frames(), d.n);
  Ensemble& ex_yxi = out.ensembles[kYEpsXi] = Ensemble(n_particles, plan.frames(), d.m);
  Ensemble& ex_yy0 = out.ensembles[kYEpsY0] = Ensemble(n_particles, plan.frames(), d.m);
  auto record = [&](std::size_t f) {
    ex_x.set_frame(f, engine.x());
    ex_yxi.set_frame(f, engine.y_xi());
    ex_yy0.set_frame(f, engine.y_y0());
  };
  record(0);
  for (std::size_t j = 0; j < plan.n_steps; ++j) {
    engine.reduce();
    engine.advance(j);
    if ((j + 1) % plan.stride == 0) record((j + 1) / plan.stride);
  }
  out.ledger = detail::make_ledger(seed, plan);
  out.ledger.consumers = {{"rho", {kXEps}}, {"xi", {kYEpsXi}}, {"B", {kXEps}}, {"W", {kYEpsXi, kYEpsY0}}};
  out.eps = scale.eps;
  out.T = scale.T;
  out.n_particles = n_particles;
  out.stride = plan.stride;
  out.y0 = scale.y0;
  return out;
}

// Frozen fast system (eps = 1) on the step min(h, 1/rho_fast).
inline PathBundle simulate_frozen(const ModelSpec& model, const Sampler& law_xi, std::vector<double> y0, double T_frozen,
                                  const GridSpec& grid, std::size_t n_particles, std::uint64_t seed,
                                  const RunContext& ctx = {}) {
  detail::check_coupled_inputs(model, n_particles);
  if (!(T_frozen > 0.0)) throw ConfigurationError("frozen horizon must be positive", "frozen.T");
  if (!(grid.rho_fast > 0.0)) throw ConfigurationError("grid.rho_fast must be positive", "grid.rho_fast");
  const double step = std::min(grid.h, 1.0 / grid.rho_fast);
  const StepPlan plan = make_plan(T_frozen, step, grid.record_dt, grid.noise_steps);
  Executor ex(ctx.threads);
  CoupledEngine engine(model, 1.0, plan, n_particles, seed, ex, {.slow = false, .fast_y0 = true});
  engine.initialize(Sampler{}, law_xi, y0);
  PathBundle out;
  const auto& d = model.dims;
  out.times = detail::frame_times(plan);
  Ensemble& e_xi = out.ensembles[kYEpsXi] = Ensemble(n_particles, plan.frames(), d.m);
  Ensemble& e_y0 = out.ensembles[kYEpsY0] = Ensemble(n_particles, plan.frames(), d.m);
  e_xi.set_frame(0, engine.y_xi());
  e_y0.set_frame(0, engine.y_y0());
  for (std::size_t j = 0; j < plan.n_steps; ++j) {
    engine.reduce();
    engine.advance(j);
    if ((j + 1) % plan.stride == 0) {
      e_xi.set_frame((j + 1) / plan.stride, engine.y_xi());
      e_y0.set_frame((j + 1) / plan.stride, engine.y_y0());
    }
  }
  out.ledger = detail::make_ledger(seed, plan);
  out.ledger.consumers = {{"xi", {kYEpsXi}}, {"W", {kYEpsXi, kYEpsY0}}};
  out.eps = 1.0;
  out.T = T_frozen;
  out.n_particles = n_particles;
  out.stride = plan.stride;
  out.y0 = std::move(y0);
  return out;
}

// Pools frozen states over (burn_in, burn_in + collect] at the grid's recording
// spacing. The fast step is min(h, 1/rho_fast), so using h >= 1/rho_fast gives
// the invariant law of the same discrete chain the coupled scheme runs.
inline EmpiricalMeasure estimate_invariant_measure(const ModelSpec& model, double burn_in, double collect,
                                                   const GridSpec& grid, std::size_t n_particles, std::uint64_t seed,
                                                   const RunContext& ctx = {},
                                                   const Sampler& law_xi = gaussian_sampler(0.0, 1.0)) {
  detail::check_coupled_inputs(model, n_particles);
  if (!(burn_in > 0.0) || !(collect > 0.0))
    throw ConfigurationError("burn_in and collect must be positive", "invariant.burn_in");
  if (!(grid.rho_fast > 0.0)) throw ConfigurationError("grid.rho_fast must be positive", "grid.rho_fast");
  const double T = burn_in + collect;
  const double step = std::min(grid.h, 1.0 / grid.rho_fast);
  const StepPlan plan = make_plan(T, step, grid.record_dt, 0);
  Executor ex(ctx.threads);
  CoupledEngine engine(model, 1.0, plan, n_particles, seed, ex, {.slow = false, .fast_y0 = false});
  engine.initialize(Sampler{}, law_xi, {});
  const std::size_t m = model.dims.m;
  const std::size_t first_frame = static_cast<std::size_t>(std::ceil(burn_in / (plan.step * plan.stride) - 1e-9));
  std::vector<double> pooled;
  pooled.reserve((plan.frames() - first_frame) * n_particles * m);
  auto pool = [&](std::size_t f) {
    if (f >= first_frame) pooled.insert(pooled.end(), engine.y_xi().begin(), engine.y_xi().end());
  };
  for (std::size_t j = 0; j < plan.n_steps; ++j) {
    engine.reduce();
    engine.advance(j);
    if ((j + 1) % plan.stride == 0) pool((j + 1) / plan.stride);
  }
  return EmpiricalMeasure(std::move(pooled), m);
}

struct AveragingOptions {
  std::size_t value_atoms = 32;       // 1-D laws are compressed to this many bin means; 0 keeps all
  std::size_t derivative_atoms = 8;
};

// b1 integrated against eta x delta_eta. The nu-slot always sees eta itself;
// the y-average runs over a compressed copy of eta in one dimension.
class AveragedDrift {
 public:
  AveragedDrift() = default;

  AveragedDrift(const ModelSpec& model, const EmpiricalMeasure& eta, AveragingOptions opts = {})
      : impl_(std::make_shared<Impl>(model, eta, opts)) {}

  void value(ConstVec x, const MeasureView& mu, OutVec out) const {
    const Impl& s = *impl_;
    average(s.value_atoms, out, [&](ConstVec y, OutVec o) { s.model.b1(x, mu, y, s.nu, o); });
  }
  void operator()(ConstVec x, const MeasureView& mu, OutVec out) const { value(x, mu, out); }

  void dx(ConstVec x, const MeasureView& mu, OutVec out) const {
    const Impl& s = *impl_;
    average(s.derivative_atoms, out, [&](ConstVec y, OutVec o) { s.model.derivs.dx_b1(x, mu, y, s.nu, o); });
  }

  void dmu(ConstVec x, const MeasureView& mu, ConstVec xt, OutVec out) const {
    const Impl& s = *impl_;
    average(s.derivative_atoms, out, [&](ConstVec y, OutVec o) { s.model.derivs.dmu_b1(x, mu, y, s.nu, xt, o); });
  }

  std::function<void(ConstVec, const MeasureView&, OutVec)> as_function() const {
    return [self = *this](ConstVec x, const MeasureView& mu, OutVec out) { self.value(x, mu, out); };
  }

  const EmpiricalMeasure& eta() const { return impl_->eta; }
  const EmpiricalMeasure& value_atoms() const { return impl_->value_atoms; }
  const MeasureView& eta_view() const { return impl_->nu; }
  const ModelSpec& model() const { return impl_->model; }

 private:
  struct Impl {
    Impl(const ModelSpec& m, const EmpiricalMeasure& e, AveragingOptions o)
        : model(m),
          eta(e),
          value_atoms(e.dim() == 1 ? compress_quantile_bins(e, o.value_atoms) : e),
          derivative_atoms(e.dim() == 1 ? compress_quantile_bins(e, o.derivative_atoms) : e),
          nu(model.fast_view(eta)) {}
    ModelSpec model;
    EmpiricalMeasure eta, value_atoms, derivative_atoms;
    MeasureView nu;
  };

  // Weighted mean written as v0 + sum w_j (v_j - v0), exact when all v_j agree.
  template <class F>
  static void average(const EmpiricalMeasure& atoms, OutVec out, F&& eval) {
    thread_local std::vector<double> v0, v;
    v0.resize(out.size());
    v.resize(out.size());
    eval(atoms.point(0), v0);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t j = 1; j < atoms.size(); ++j) {
      eval(atoms.point(j), v);
      const double w = atoms.weight(j);
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * (v[c] - v0[c]);
    }
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += v0[c];
  }

  std::shared_ptr<const Impl> impl_;
};

using AveragedDriftFn = std::function<void(ConstVec, const MeasureView&, OutVec)>;

inline AveragedDrift build_averaged_drift(const ModelSpec& model, const EmpiricalMeasure& eta,
                                          AveragingOptions opts = {}) {
  model.validate();
  if (eta.size() == 0) throw ConfigurationError("invariant measure is empty");
  if (eta.dim() != model.dims.m) throw ConfigurationError("invariant measure has the wrong dimension");
  return AveragedDrift(model, eta, opts);
}

class AveragedEngine {
 public:
  AveragedEngine(const ModelSpec& model, AveragedDriftFn bbar, const StepPlan& plan, std::size_t n, std::uint64_t seed,
                 Executor& ex)
      : model_(model), bbar_(std::move(bbar)), plan_(plan), n_(n), rng_(seed), ex_(ex), fail_(n) {
    x_.assign(n * model.dims.n, 0.0);
    xn_ = x_;
  }

  void initialize(const Sampler& law_rho) {
    const std::size_t dn = model_.dims.n;
    for (std::size_t i = 0; i < n_; ++i) detail::draw_initial(law_rho, rng_, Channel::rho, i, OutVec(x_).subspan(i * dn, dn));
    if (!detail::all_finite(x_)) throw BlowUpError("non-finite initial slow draw", 0, 0, kXBar);
  }

  void reduce() { mu_ = model_.slow_view(x_); }

  void advance(std::size_t j) {
    const auto& d = model_.dims;
    const double h = plan_.step;
    fail_.reset();
    ex_.for_chunks(n_, [&](std::size_t b, std::size_t e) {
      std::vector<double> drift(d.n), diff(d.n * d.d1), dB(d.d1);
      for (std::size_t i = b; i < e; ++i) {
        const ConstVec xi(x_.data() + i * d.n, d.n);
        bbar_(xi, mu_, drift);
        model_.sigma1(xi, mu_, diff);
        detail::slow_increment(rng_, plan_, i, j * plan_.noise_per_step, plan_.noise_per_step, dB);
        double* out = xn_.data() + i * d.n;
        for (std::size_t a = 0; a < d.n; ++a) {
          double v = xi[a] + drift[a] * h;
          for (std::size_t c = 0; c < d.d1; ++c) v += diff[a * d.d1 + c] * dB[c];
          out[a] = v;
        }
        if (!detail::all_finite(ConstVec(out, d.n))) fail_.report(i, 0);
      }
    });
    if (fail_.failed())
      throw BlowUpError("non-finite state in X_bar at step " + std::to_string(j + 1) + ", particle " +
                            std::to_string(fail_.particle()),
                        j + 1, fail_.particle(), kXBar);
    x_.swap(xn_);
  }

  ConstVec x() const { return x_; }
  const MeasureView& mu() const { return mu_; }

 private:
  const ModelSpec& model_;
  AveragedDriftFn bbar_;
  StepPlan plan_;
  std::size_t n_;
  CounterRng rng_;
  Executor& ex_;
  detail::FailureSlot fail_;
  std::vector<double> x_, xn_;
  MeasureView mu_;
};

// Averaged particle system on step h. With coupled_to, the run reuses that
// bundle's seed, base Brownian grid and recording grid, so X_bar is driven by
// the same B and starts from the same draws as X_eps.
inline PathBundle simulate_averaged(const ModelSpec& model, const AveragedDriftFn& bbar, const ScaleParams& scale,
                                    const GridSpec& grid, std::size_t n_particles, std::uint64_t seed,
                                    const PathBundle* coupled_to = nullptr, const RunContext& ctx = {}) {
  detail::check_coupled_inputs(model, n_particles);
  scale.validate();
  if (!bbar) throw ConfigurationError("averaged drift callback is empty");
  double record_dt = grid.record_dt;
  std::size_t noise_steps = grid.noise_steps;
  if (coupled_to) {
    if (!coupled_to->has(kXEps)) throw ConfigurationError("coupled_to bundle has no X_eps ensemble");
    if (coupled_to->T != scale.T) throw ConfigurationError("horizon differs from the coupled run", "scale.T");
    if (coupled_to->n_particles != n_particles)
      throw ConfigurationError("particle count differs from the coupled run", "run.n_particles");
    const double coupled_record = coupled_to->ledger.step * static_cast<double>(coupled_to->stride);
    if (record_dt == 0.0) record_dt = coupled_record;
    if (std::abs(record_dt - coupled_record) > 1e-12 * scale.T)
      throw ConfigurationError("recording grid differs from the coupled run", "grid.record_dt");
    if (noise_steps != 0 && noise_steps != coupled_to->ledger.noise_steps)
      throw ConfigurationError("noise grid differs from the coupled run", "grid.noise_steps");
    noise_steps = coupled_to->ledger.noise_steps;
    seed = coupled_to->ledger.master_seed;
  }
  const StepPlan plan = make_plan(scale.T, grid.h, record_dt, noise_steps);
  if (coupled_to && plan.frames() != coupled_to->times.size())
    throw ConfigurationError("recording grid differs from the coupled run", "grid.record_dt");
  Executor ex(ctx.threads);
  AveragedEngine engine(model, bbar, plan, n_particles, seed, ex);
  engine.initialize(scale.law_rho);
  if (coupled_to) {
    const auto x0 = coupled_to->get(kXEps).frame(0);
    if (!std::equal(x0.begin(), x0.end(), engine.x().begin()))
      throw ConfigurationError("initial draws differ from the coupled run (law_rho mismatch)", "scale.law_rho");
  }
  PathBundle out;
  out.times = detail::frame_times(plan);
  Ensemble& e = out.ensembles[kXBar] = Ensemble(n_particles, plan.frames(), model.dims.n);
  e.set_frame(0, engine.x());
  for (std::size_t j = 0; j < plan.n_steps; ++j) {
    engine.reduce();
    engine.advance(j);
    if ((j + 1) % plan.stride == 0) e.set_frame((j + 1) / plan.stride, engine.x());
  }
  out.ledger = detail::make_ledger(seed, plan);
  out.ledger.consumers = {{"rho", {kXBar}}, {"B", {kXBar}}};
  out.eps = scale.eps;
  out.T = scale.T;
  out.n_particles = n_particles;
  out.stride = plan.stride;
  out.y0 = scale.y0;
  return out;
}

// (X_eps - X_bar) / sqrt(eps) on the shared recording grid.
inline Ensemble fluctuation(const PathBundle& coupled, const PathBundle& averaged) {
  const Ensemble& xe = coupled.get(kXEps);
  const Ensemble& xb = averaged.get(kXBar);
  if (xe.particles != xb.particles || xe.frames != xb.frames || xe.dim != xb.dim)
    throw ConfigurationError("coupled and averaged bundles do not share a grid");
  Ensemble u(xe.particles, xe.frames, xe.dim);
  const double s = 1.0 / std::sqrt(coupled.eps);
  for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] = (xe.data[i] - xb.data[i]) * s;
  return u;
}

using UpsilonFn = std::function<void(ConstVec x, const MeasureView& mu, OutVec out)>;

struct LimitOptions {
  std::size_t interaction_samples = 128;  // particles averaged in the E[d_mu ...] terms; >= N is exact
};

namespace detail {

// Indices used for the interaction averages at frame f. The stride subset is
// rotated from frame to frame so every particle contributes over time.
inline std::vector<std::size_t> interaction_subset(std::size_t n, std::size_t samples, std::size_t frame) {
  std::vector<std::size_t> idx;
  if (samples == 0 || samples >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  const std::size_t offset = frame % (n / samples);
  idx.resize(samples);
  for (std::size_t s = 0; s < samples; ++s) idx[s] = (s * n / samples + offset) % n;
  return idx;
}

// Drift and diffusion of the linearized fluctuation equation for particle i.
struct Linearization {
  const ModelSpec& model;
  const AveragedDrift& bbar;

  void operator()(ConstVec xbar, const MeasureView& mu, ConstVec u, const std::vector<std::size_t>& subset,
                  std::size_t i, OutVec drift, OutVec diff, std::vector<double>& work) const {
    const std::size_t n = model.dims.n, d1 = model.dims.d1;
    work.resize(n * n + n * d1);
    OutVec mat(work.data(), n * n), sig(work.data() + n * n, n * d1);
    const ConstVec xi = xbar.subspan(i * n, n), ui = u.subspan(i * n, n);
    bbar.dx(xi, mu, mat);
    std::fill(drift.begin(), drift.end(), 0.0);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) drift[a] += mat[a * n + b] * ui[b];
    model.derivs.dx_sigma1(xi, mu, ui, diff);
    const double inv = 1.0 / static_cast<double>(subset.size());
    std::vector<double> acc_drift(n, 0.0), acc_diff(n * d1, 0.0);
    for (std::size_t s : subset) {
      const ConstVec xs = xbar.subspan(s * n, n), us = u.subspan(s * n, n);
      bbar.dmu(xi, mu, xs, mat);
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) acc_drift[a] += mat[a * n + b] * us[b];
      model.derivs.dmu_sigma1(xi, mu, xs, us, sig);
      for (std::size_t c = 0; c < n * d1; ++c) acc_diff[c] += sig[c];
    }
    for (std::size_t a = 0; a < n; ++a) drift[a] += inv * acc_drift[a];
    for (std::size_t c = 0; c < n * d1; ++c) diff[c] += inv * acc_diff[c];
  }
};

inline void require_linearization(const ModelSpec& model, const char* context) {
  model.require({"dx_b1", "dmu_b1", "dx_sigma1", "dmu_sigma1"}, context);
}

}  // namespace detail

// Limit fluctuation U on the recording grid of an averaged bundle, with U_0 = 0.
// B increments are regenerated from the bundle's ledger; V uses `seed`.
inline PathBundle simulate_limit(const ModelSpec& model, const AveragedDrift& bbar, const UpsilonFn& upsilon,
                                 const PathBundle& xbar_bundle, std::uint64_t seed, LimitOptions opts = {},
                                 const RunContext& ctx = {}) {
  detail::require_linearization(model, "simulate_limit");
  if (!upsilon) throw CapabilityError("simulate_limit needs an upsilon callback");
  const Ensemble& xb = xbar_bundle.get(kXBar);
  const std::size_t n = model.dims.n, d1 = model.dims.d1, N = xb.particles, F = xb.frames;
  const SeedLedger& led = xbar_bundle.ledger;
  const std::size_t base_per_frame = led.noise_steps / led.n_steps * xbar_bundle.stride;
  const double dt = xbar_bundle.T / static_cast<double>(F - 1);
  const double bscale = std::sqrt(xbar_bundle.T / static_cast<double>(led.noise_steps));
  const CounterRng brng(led.master_seed), vrng(seed);
  Executor ex(ctx.threads);
  detail::Linearization lin{model, bbar};

  PathBundle out;
  out.times = xbar_bundle.times;
  out.ensembles[kXBar] = xb;
  Ensemble& ue = out.ensembles[kULimit] = Ensemble(N, F, n);
  std::vector<double> u(N * n, 0.0), un(N * n, 0.0);
  detail::FailureSlot fail(N);
  for (std::size_t f = 0; f + 1 < F; ++f) {
    const std::vector<double> xf = xb.frame(f);
    const MeasureView mu = model.slow_view(xf);
    const auto subset = detail::interaction_subset(N, opts.interaction_samples, f);
    ex.for_chunks(N, [&](std::size_t b, std::size_t e) {
      std::vector<double> drift(n), diff(n * d1), ups(n * n), dB(d1), dV(n), work;
      for (std::size_t i = b; i < e; ++i) {
        lin(xf, mu, u, subset, i, drift, diff, work);
        upsilon(ConstVec(xf).subspan(i * n, n), mu, ups);
        for (std::size_t c = 0; c < d1; ++c) {
          double s = 0.0;
          for (std::size_t r = f * base_per_frame; r < (f + 1) * base_per_frame; ++r)
            s += brng.normal(Channel::slow_noise, i, r * d1 + c);
          dB[c] = bscale * s;
        }
        for (std::size_t c = 0; c < n; ++c) dV[c] = std::sqrt(dt) * vrng.normal(Channel::limit_noise, i, f * n + c);
        for (std::size_t a = 0; a < n; ++a) {
          double v = u[i * n + a] + drift[a] * dt;
          for (std::size_t c = 0; c < d1; ++c) v += diff[a * d1 + c] * dB[c];
          for (std::size_t c = 0; c < n; ++c) v += ups[a * n + c] * dV[c];
          un[i * n + a] = v;
        }
        if (!detail::all_finite(ConstVec(un).subspan(i * n, n))) fail.report(i, 0);
      }
    });
    if (fail.failed())
      throw BlowUpError("non-finite state in U_limit at frame " + std::to_string(f + 1), f + 1, fail.particle(), kULimit);
    u.swap(un);
    ue.set_frame(f + 1, u);
  }
  out.ledger = led;
  out.ledger.channels["V"] = static_cast<std::uint32_t>(Channel::limit_noise);
  out.ledger.consumers = {{"B", {kULimit}}, {"V", {kULimit}}};
  out.eps = 0.0;
  out.T = xbar_bundle.T;
  out.n_particles = N;
  out.stride = xbar_bundle.stride;
  return out;
}

// Auxiliary process theta_eps. The coupled run is regenerated step by step from
// its ledger to integrate the fluctuation source on the fine grid; the
// linearized terms are stepped on the recording grid using the recorded X_bar.
inline PathBundle simulate_auxiliary(const ModelSpec& model, const AveragedDrift& bbar, const PathBundle& coupled,
                                     const PathBundle& averaged, const ScaleParams& scale, LimitOptions opts = {},
                                     const RunContext& ctx = {}) {
  detail::require_linearization(model, "simulate_auxiliary");
  const Ensemble& xe_rec = coupled.get(kXEps);
  const Ensemble& xb = averaged.get(kXBar);
  if (coupled.ledger.master_seed != averaged.ledger.master_seed || coupled.ledger.noise_steps != averaged.ledger.noise_steps ||
      coupled.times != averaged.times || coupled.n_particles != averaged.n_particles)
    throw ConfigurationError("coupled and averaged bundles do not share seed, noise grid and recording grid");
  if (scale.eps != coupled.eps || scale.T != coupled.T)
    throw ConfigurationError("scale parameters differ from the coupled run", "scale.eps");
  const std::size_t n = model.dims.n, d1 = model.dims.d1, N = coupled.n_particles, F = coupled.times.size();
  const StepPlan plan =
      make_plan(coupled.T, coupled.ledger.step, coupled.ledger.step * static_cast<double>(coupled.stride), coupled.ledger.noise_steps);
  Executor ex(ctx.threads);
  CoupledEngine engine(model, coupled.eps, plan, N, coupled.ledger.master_seed, ex, {});
  engine.initialize(scale.law_rho, scale.law_xi, scale.y0);
  const CounterRng brng(coupled.ledger.master_seed);
  const double src_scale = plan.step / std::sqrt(coupled.eps);
  const double dt = plan.step * static_cast<double>(plan.stride);
  const std::size_t base_per_frame = plan.noise_per_step * plan.stride;
  detail::Linearization lin{model, bbar};

  PathBundle out;
  out.times = coupled.times;
  out.ensembles[kXEps] = xe_rec;
  out.ensembles[kXBar] = xb;
  out.ensembles[kUEps] = fluctuation(coupled, averaged);
  Ensemble& te = out.ensembles[kThetaEps] = Ensemble(N, F, n);
  std::vector<double> theta(N * n, 0.0), theta_next(N * n, 0.0), source(N * n, 0.0);
  detail::FailureSlot fail(N);
  for (std::size_t j = 0; j < plan.n_steps; ++j) {
    engine.reduce();
    ex.for_chunks(N, [&](std::size_t b, std::size_t e) {
      std::vector<double> v1(n), v2(n);
      for (std::size_t i = b; i < e; ++i) {
        const ConstVec xi = engine.x().subspan(i * n, n);
        model.b1(xi, engine.mu(), engine.y_y0().subspan(i * model.dims.m, model.dims.m), engine.nu(), v1);
        bbar.value(xi, engine.mu(), v2);
        for (std::size_t a = 0; a < n; ++a) source[i * n + a] += (v1[a] - v2[a]) * src_scale;
      }
    });
    engine.advance(j);
    if ((j + 1) % plan.stride != 0) continue;
    const std::size_t f = j / plan.stride;
    const std::vector<double> xf = xb.frame(f);
    const MeasureView mu = model.slow_view(xf);
    const auto subset = detail::interaction_subset(N, opts.interaction_samples, f);
    ex.for_chunks(N, [&](std::size_t b, std::size_t e) {
      std::vector<double> drift(n), diff(n * d1), dB(d1), work;
      for (std::size_t i = b; i < e; ++i) {
        lin(xf, mu, theta, subset, i, drift, diff, work);
        detail::slow_increment(brng, plan, i, f * base_per_frame, base_per_frame, dB);
        for (std::size_t a = 0; a < n; ++a) {
          double v = theta[i * n + a] + source[i * n + a] + drift[a] * dt;
          for (std::size_t c = 0; c < d1; ++c) v += diff[a * d1 + c] * dB[c];
          theta_next[i * n + a] = v;
          source[i * n + a] = 0.0;
        }
        if (!detail::all_finite(ConstVec(theta_next).subspan(i * n, n))) fail.report(i, 0);
      }
    });
    if (fail.failed())
      throw BlowUpError("non-finite state in theta_eps at frame " + std::to_string(f + 1), f + 1, fail.particle(), kThetaEps);
    theta.swap(theta_next);
    te.set_frame(f + 1, theta);
    const auto rec = xe_rec.frame(f + 1);
    if (!std::equal(rec.begin(), rec.end(), engine.x().begin()))
      throw ConfigurationError("coupled bundle is not reproducible from its ledger with these scale parameters");
  }
  out.ledger = coupled.ledger;
  out.ledger.consumers = {{"B", {kXEps, kXBar, kThetaEps}}, {"W", {kYEpsXi, kYEpsY0}}};
  out.eps = coupled.eps;
  out.T = coupled.T;
  out.n_particles = N;
  out.stride = coupled.stride;
  out.y0 = coupled.y0;
  return out;
}

}  // namespace msmv
