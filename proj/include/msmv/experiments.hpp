#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msmv/errors.hpp"
#include "msmv/integrator.hpp"
#include "msmv/measure.hpp"
#include "msmv/model.hpp"
#include "msmv/paths.hpp"
#include "msmv/poisson.hpp"
#include "msmv/stats.hpp"

namespace msmv {

// Seed tags for the sub-experiments of a run.
namespace seed_tag {
inline constexpr std::uint64_t invariant = 0x1000;
inline constexpr std::uint64_t upsilon = 0x2000;
inline constexpr std::uint64_t limit = 0x3000;
inline constexpr std::uint64_t bootstrap = 0x4000;
inline constexpr std::uint64_t probe = 0x5000;
inline constexpr std::uint64_t replica = 0x6000;
inline constexpr std::uint64_t lemma = 0x7000;
}  // namespace seed_tag

struct InvariantConfig {
  double burn_in = 20.0;
  double collect = 100.0;
  std::size_t n_particles = 2048;
  // h >= 1/rho_fast runs the frozen chain at the coupled scheme's fast step.
  GridSpec grid{.h = 0.05, .rho_fast = 20.0, .record_dt = 0.5};
};

inline EmpiricalMeasure estimate_eta(const ModelSpec& model, const InvariantConfig& cfg, double rho_fast,
                                     std::uint64_t seed, const RunContext& ctx) {
  GridSpec g = cfg.grid;
  g.rho_fast = rho_fast;
  return estimate_invariant_measure(model, cfg.burn_in, cfg.collect, g, cfg.n_particles,
                                    derive_seed(seed, seed_tag::invariant), ctx);
}

// Base Brownian grid shared by every run of an eps sweep: the finest step count.
inline std::size_t sweep_noise_steps(const std::vector<double>& eps_grid, double T, const GridSpec& grid,
                                     double averaged_h) {
  std::vector<std::size_t> counts;
  for (double e : eps_grid) counts.push_back(exact_count(T, std::min(grid.h, e / grid.rho_fast), "coupled step"));
  counts.push_back(exact_count(T, averaged_h, "averaged step"));
  std::size_t finest = *std::max_element(counts.begin(), counts.end());
  for (std::size_t c : counts)
    if (finest % c != 0) throw ConfigurationError("step counts of the eps sweep are not nested", "grid.h");
  return finest;
}

inline void check_eps_grid(const std::vector<double>& eps_grid, std::size_t min_size) {
  if (eps_grid.size() < min_size)
    throw ConfigurationError("eps grid needs at least " + std::to_string(min_size) + " values", "experiment.eps_grid");
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    if (!(eps_grid[i] > 0.0 && eps_grid[i] <= 1.0)) throw ConfigurationError("eps values must lie in (0, 1]", "experiment.eps_grid");
    if (i > 0 && !(eps_grid[i] < eps_grid[i - 1]))
      throw ConfigurationError("eps grid must be strictly decreasing", "experiment.eps_grid");
  }
}

// Per-particle sup over recorded frames of |a - b|^p, averaged over particles.
inline double mean_sup_power(const Ensemble& a, const Ensemble& b, double p) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.particles; ++i) {
    double sup = 0.0;
    for (std::size_t f = 0; f < a.frames; ++f) {
      double s = 0.0;
      for (std::size_t d = 0; d < a.dim; ++d) {
        const double diff = a.at(i, f, d) - b.at(i, f, d);
        s += diff * diff;
      }
      sup = std::max(sup, s);
    }
    total += std::pow(sup, p / 2.0);
  }
  return total / static_cast<double>(a.particles);
}

struct RateConfig {
  ScaleParams scale;  // eps is replaced by each grid value
  std::vector<double> eps_grid = {0x1p-4, 0x1p-5, 0x1p-6, 0x1p-7, 0x1p-8, 0x1p-9};
  std::size_t n_particles = 2048;
  std::size_t n_replicas = 8;
  std::uint64_t seed = 1;
  GridSpec grid{.h = 1.0 / 640.0, .rho_fast = 20.0, .record_dt = 1.0 / 320.0};
  double averaged_h = 1.0 / 640.0;
  InvariantConfig invariant;
  AveragingOptions averaging;
  std::size_t bootstrap = 200;
};

struct RateReport {
  std::vector<double> eps_grid;
  std::vector<double> errors;  // (E sup_t |X_eps - X_bar|^p)^(1/p), pooled over replicas
  std::vector<double> ci_lo, ci_hi;
  std::vector<std::vector<double>> replica_moments;  // [eps][replica] E sup |.|^p
  double p = 2.0;
  double slope = 0.0, slope_lo = 0.0, slope_hi = 0.0, intercept = 0.0, r2 = 0.0;
  std::size_t n_particles = 0, n_replicas = 0, noise_steps = 0;
  std::vector<double> coupled_steps;
  double averaged_step = 0.0;
  std::vector<std::uint64_t> replica_seeds;
  std::uint64_t invariant_seed = 0;
  std::size_t eta_size = 0;
  bool degenerate = false;  // b1 does not depend on (y, nu)
  std::vector<std::string> warnings;
  bool complete = true;
  std::string abort_reason;
};

// Blow-up during a sweep; carries the partial report.
template <class Report>
class SweepAborted : public BlowUpError {
 public:
  SweepAborted(const BlowUpError& cause, Report partial)
      : BlowUpError(cause.what(), cause.step(), cause.particle(), cause.label()), partial_(std::move(partial)) {}
  const Report& partial() const { return partial_; }

 private:
  Report partial_;
};

namespace detail {

inline void fit_rate(RateReport& r, const std::vector<std::vector<double>>& moments, std::size_t bootstrap,
                     std::uint64_t seed) {
  const std::size_t E = r.eps_grid.size(), R = moments.empty() ? 0 : moments[0].size();
  std::vector<double> logeps(E);
  for (std::size_t e = 0; e < E; ++e) logeps[e] = std::log(r.eps_grid[e]);
  auto errors_for = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> out(E);
    for (std::size_t e = 0; e < E; ++e) {
      double s = 0.0;
      for (std::size_t i : idx) s += moments[e][i];
      out[e] = std::pow(s / static_cast<double>(idx.size()), 1.0 / r.p);
    }
    return out;
  };
  std::vector<std::size_t> all(R);
  for (std::size_t i = 0; i < R; ++i) all[i] = i;
  r.errors = errors_for(all);
  std::vector<double> logerr(E);
  for (std::size_t e = 0; e < E; ++e) logerr[e] = std::log(r.errors[e]);
  const auto fit = stats::fit_line(logeps, logerr);
  r.slope = fit.slope;
  r.intercept = fit.intercept;
  r.r2 = fit.r2;
  r.ci_lo.assign(E, 0.0);
  r.ci_hi.assign(E, 0.0);
  for (std::size_t e = 0; e < E; ++e) {
    const auto ci = stats::bootstrap_interval(R, bootstrap, derive_seed(seed, e), [&](const std::vector<std::size_t>& idx) {
      double s = 0.0;
      for (std::size_t i : idx) s += moments[e][i];
      return std::pow(s / static_cast<double>(idx.size()), 1.0 / r.p);
    });
    r.ci_lo[e] = ci.lo;
    r.ci_hi[e] = ci.hi;
  }
  const auto sci = stats::bootstrap_interval(R, bootstrap, derive_seed(seed, E + 1), [&](const std::vector<std::size_t>& idx) {
    const auto err = errors_for(idx);
    std::vector<double> le(E);
    for (std::size_t e = 0; e < E; ++e) le[e] = std::log(err[e]);
    return stats::fit_line(logeps, le).slope;
  });
  r.slope_lo = sci.lo;
  r.slope_hi = sci.hi;
}

}  // namespace detail

// Strong averaging error across an eps sweep. Every eps value of a replica
// reuses that replica's seed, so rho, xi and the base Brownian path B are
// shared across the sweep and with the single averaged run.
inline RateReport run_averaging_rate(const ModelSpec& model, const RateConfig& cfg, const RunContext& ctx = {}) {
  model.validate();
  check_eps_grid(cfg.eps_grid, 4);
  if (cfg.scale.p != 2.0 && cfg.scale.p != 4.0)
    throw ConfigurationError("rate experiment supports p = 2 or p = 4", "scale.p");
  if (cfg.n_replicas < 2) throw ConfigurationError("at least two replicas are required", "experiment.n_replicas");
  RateReport r;
  r.eps_grid = cfg.eps_grid;
  r.p = cfg.scale.p;
  r.n_particles = cfg.n_particles;
  r.n_replicas = cfg.n_replicas;
  r.averaged_step = cfg.averaged_h;
  r.noise_steps = sweep_noise_steps(cfg.eps_grid, cfg.scale.T, cfg.grid, cfg.averaged_h);
  for (double e : cfg.eps_grid) r.coupled_steps.push_back(std::min(cfg.grid.h, e / cfg.grid.rho_fast));
  r.degenerate = !depends_on_fast(model, derive_seed(cfg.seed, seed_tag::probe));
  r.invariant_seed = derive_seed(cfg.seed, seed_tag::invariant);
  for (std::size_t k = 0; k < cfg.n_replicas; ++k) r.replica_seeds.push_back(derive_seed(cfg.seed, seed_tag::replica + k));

  const EmpiricalMeasure eta = estimate_eta(model, cfg.invariant, cfg.grid.rho_fast, cfg.seed, ctx);
  r.eta_size = eta.size();
  const AveragedDrift bbar = build_averaged_drift(model, eta, cfg.averaging);
  const AveragedDriftFn bbar_fn = bbar.as_function();

  GridSpec grid = cfg.grid;
  grid.noise_steps = r.noise_steps;
  GridSpec agrid = grid;
  agrid.h = cfg.averaged_h;
  std::vector<std::vector<double>> moments(cfg.eps_grid.size(), std::vector<double>(cfg.n_replicas, 0.0));
  try {
    for (std::size_t k = 0; k < cfg.n_replicas; ++k) {
      PathBundle xbar;
      for (std::size_t e = 0; e < cfg.eps_grid.size(); ++e) {
        ScaleParams sc = cfg.scale;
        sc.eps = cfg.eps_grid[e];
        const PathBundle coupled = simulate_coupled(model, sc, grid, cfg.n_particles, r.replica_seeds[k], ctx);
        for (const auto& w : coupled.warnings)
          if (k == 0) r.warnings.push_back("eps=" + std::to_string(sc.eps) + ": " + w);
        if (e == 0) xbar = simulate_averaged(model, bbar_fn, sc, agrid, cfg.n_particles, r.replica_seeds[k], &coupled, ctx);
        moments[e][k] = mean_sup_power(coupled.get(kXEps), xbar.get(kXBar), r.p);
      }
    }
  } catch (const BlowUpError& err) {
    r.complete = false;
    r.abort_reason = err.what();
    r.replica_moments = moments;
    throw SweepAborted<RateReport>(err, r);
  }
  r.replica_moments = moments;
  detail::fit_rate(r, moments, cfg.bootstrap, derive_seed(cfg.seed, seed_tag::bootstrap));
  if (r.degenerate) r.warnings.push_back("degenerate: no fast dependence");
  return r;
}

struct CltConfig {
  ScaleParams scale;
  std::vector<double> eps_grid = {0x1p-4, 0x1p-6, 0x1p-8};
  std::size_t n_particles = 4096;
  std::uint64_t seed = 1;
  GridSpec grid{.h = 1.0 / 1280.0, .rho_fast = 20.0, .record_dt = 1.0 / 128.0};
  double averaged_h = 1.0 / 1280.0;
  InvariantConfig invariant;
  AveragingOptions averaging;
  UpsilonBudget upsilon;
  std::vector<double> upsilon_x = {0.0};  // Upsilon is evaluated once, at (x, delta_x)
  LimitOptions limit;
  std::size_t bootstrap = 200;
};

struct CltReport {
  std::vector<double> eps_grid;
  std::vector<double> ks, ks_lo, ks_hi;
  std::vector<double> var_eps, mean_eps, var_ratio;
  double var_limit = 0.0, mean_limit = 0.0;
  std::size_t n_eps_samples = 0, n_limit_samples = 0;
  std::vector<double> upsilon;  // n x n
  double upsilon_clipped_fraction = 0.0;
  std::size_t inversions = 0;
  bool ks_monotone = true;  // nonincreasing up to one inversion inside the bootstrap interval
  bool degenerate_limit = false;
  double moment_order = 4.0;
  std::uint64_t coupled_seed = 0, limit_seed = 0, upsilon_seed = 0;
  std::vector<std::string> warnings;
  std::vector<double> terminal_limit;                 // U_T samples
  std::vector<std::vector<double>> terminal_eps;      // U^eps_T samples per eps
};

namespace detail {

inline stats::Interval ks_bootstrap(const std::vector<double>& a, const std::vector<double>& b, std::size_t resamples,
                                    std::uint64_t seed) {
  const CounterRng rng(seed);
  std::vector<double> values;
  std::vector<double> ra(a.size()), rb(b.size());
  for (std::size_t r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < a.size(); ++i)
      ra[i] = a[std::min(a.size() - 1, static_cast<std::size_t>(rng.uniform(Channel::bootstrap, 2 * r, i) * a.size()))];
    for (std::size_t i = 0; i < b.size(); ++i)
      rb[i] = b[std::min(b.size() - 1, static_cast<std::size_t>(rng.uniform(Channel::bootstrap, 2 * r + 1, i) * b.size()))];
    values.push_back(ks_statistic(EmpiricalMeasure(ra, 1), EmpiricalMeasure(rb, 1)));
  }
  return {stats::quantile(values, 0.025), stats::quantile(values, 0.975)};
}

// Nonincreasing up to one inversion whose larger value lies inside the
// previous point's bootstrap interval.
inline void ks_trend(CltReport& r) {
  r.inversions = 0;
  bool within = true;
  for (std::size_t i = 1; i < r.ks.size(); ++i) {
    if (r.ks[i] > r.ks[i - 1]) {
      ++r.inversions;
      if (r.ks[i] > r.ks_hi[i - 1]) within = false;
    }
  }
  r.ks_monotone = r.inversions == 0 || (r.inversions == 1 && within);
}

}  // namespace detail

// Terminal-law comparison of U_eps = (X_eps - X_bar)/sqrt(eps) with the limit U.
inline CltReport run_clt(const ModelSpec& model, const CltConfig& cfg, const RunContext& ctx = {}) {
  model.validate();
  if (model.dims.n != 1) throw UnsupportedDimensionError("the CLT comparison needs a scalar slow component");
  detail::require_linearization(model, "run_clt");
  model.require({"dy_b1", "dy_b2", "dy_sigma2"}, "run_clt");
  check_eps_grid(cfg.eps_grid, 1);
  CltReport r;
  r.eps_grid = cfg.eps_grid;
  r.coupled_seed = derive_seed(cfg.seed, seed_tag::replica);
  r.limit_seed = derive_seed(cfg.seed, seed_tag::limit);
  r.upsilon_seed = derive_seed(cfg.seed, seed_tag::upsilon);

  const EmpiricalMeasure eta = estimate_eta(model, cfg.invariant, cfg.grid.rho_fast, cfg.seed, ctx);
  const AveragedDrift bbar = build_averaged_drift(model, eta, cfg.averaging);
  const EmpiricalMeasure ref_mu = EmpiricalMeasure::dirac(cfg.upsilon_x);
  const UpsilonEstimate ups = upsilon_estimate(model, eta, cfg.upsilon_x, ref_mu, cfg.upsilon, r.upsilon_seed, ctx);
  r.upsilon = ups.matrix;
  r.upsilon_clipped_fraction = ups.clipped_fraction;
  for (const auto& w : ups.warnings) r.warnings.push_back("upsilon " + w);

  GridSpec grid = cfg.grid;
  grid.noise_steps = sweep_noise_steps(cfg.eps_grid, cfg.scale.T, cfg.grid, cfg.averaged_h);
  GridSpec agrid = grid;
  agrid.h = cfg.averaged_h;
  PathBundle xbar;
  std::vector<double> xbar_T;
  for (std::size_t e = 0; e < cfg.eps_grid.size(); ++e) {
    ScaleParams sc = cfg.scale;
    sc.eps = cfg.eps_grid[e];
    const PathBundle coupled = simulate_coupled(model, sc, grid, cfg.n_particles, r.coupled_seed, ctx);
    if (e == 0) {
      xbar = simulate_averaged(model, bbar.as_function(), sc, agrid, cfg.n_particles, r.coupled_seed, &coupled, ctx);
      xbar_T = xbar.get(kXBar).frame(xbar.times.size() - 1);
    }
    const auto xe_T = coupled.get(kXEps).frame(coupled.times.size() - 1);
    std::vector<double> u(xe_T.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = (xe_T[i] - xbar_T[i]) / std::sqrt(sc.eps);
    r.terminal_eps.push_back(std::move(u));
  }
  const std::vector<double> ups_matrix = ups.matrix;
  const UpsilonFn upsilon_fn = [ups_matrix](ConstVec, const MeasureView&, OutVec out) {
    std::copy(ups_matrix.begin(), ups_matrix.end(), out.begin());
  };
  const PathBundle limit = simulate_limit(model, bbar, upsilon_fn, xbar, r.limit_seed, cfg.limit, ctx);
  r.terminal_limit = limit.get(kULimit).frame(limit.times.size() - 1);
  r.n_limit_samples = r.terminal_limit.size();
  r.n_eps_samples = cfg.n_particles;
  r.var_limit = stats::variance(r.terminal_limit);
  r.mean_limit = stats::mean(r.terminal_limit);
  r.degenerate_limit = !(r.var_limit > 1e-300);
  if (r.degenerate_limit) r.warnings.push_back("degenerate limit: U_T is a point mass");
  const EmpiricalMeasure lim(r.terminal_limit, 1);
  for (std::size_t e = 0; e < cfg.eps_grid.size(); ++e) {
    const auto& u = r.terminal_eps[e];
    r.ks.push_back(ks_statistic(EmpiricalMeasure(u, 1), lim));
    const auto ci = detail::ks_bootstrap(u, r.terminal_limit, cfg.bootstrap, derive_seed(cfg.seed, seed_tag::bootstrap + e));
    r.ks_lo.push_back(ci.lo);
    r.ks_hi.push_back(ci.hi);
    r.var_eps.push_back(stats::variance(u));
    r.mean_eps.push_back(stats::mean(u));
    r.var_ratio.push_back(r.degenerate_limit ? std::numeric_limits<double>::infinity() : r.var_eps.back() / r.var_limit);
  }
  detail::ks_trend(r);
  return r;
}

struct LemmaConfig {
  ScaleParams scale;
  std::uint64_t seed = 1;
  GridSpec grid{.h = 1.0 / 1280.0, .rho_fast = 20.0, .record_dt = 1.0 / 64.0};
  InvariantConfig invariant;
  AveragingOptions averaging{.value_atoms = 16, .derivative_atoms = 8};
  LimitOptions limit;
  std::size_t bootstrap = 200;

  std::vector<double> moment_eps = {0x1p-2, 0x1p-4, 0x1p-6, 0x1p-8};
  std::size_t moment_particles = 4096;
  double moment_spread_max = 1.5;

  double contraction_T = 4.0;
  std::size_t contraction_particles = 2048;
  double contraction_threshold = 1.35;  // 0.9 * 2(k - m) for the reference parameters

  double decay_T = 6.0;
  std::size_t decay_particles = 4096;
  std::vector<double> decay_x0 = {0.0};

  std::vector<double> aux_eps = {0x1p-4, 0x1p-8};
  std::size_t aux_particles = 512;
  double aux_record_dt = 1.0 / 128.0;

  double time_change_eps = 0x1p-4;
  std::vector<double> time_change_times = {1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0};
  std::size_t time_change_particles = 4096;
};

struct LemmaCheck {
  LemmaCheck() = default;
  LemmaCheck(std::string n, std::string c, std::string cmp)
      : name(std::move(n)), claim(std::move(c)), comparison(std::move(cmp)) {}
  std::string name;
  std::string claim;       // the property the check reproduces
  std::string comparison;  // how value is compared with threshold
  double value = 0.0;
  double threshold = 0.0;
  bool passed = false;
  std::map<std::string, double> details;
};

struct PropertyReport {
  std::vector<LemmaCheck> checks;
  std::vector<std::string> warnings;
  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const LemmaCheck& c) { return c.passed; });
  }
  const LemmaCheck* find(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return &c;
    return nullptr;
  }
};

namespace detail {

inline stats::LineFit fit_log_curve(const std::vector<double>& t, const std::vector<double>& v, double t_min) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] >= t_min && v[i] > 0.0) {
      xs.push_back(t[i]);
      ys.push_back(std::log(v[i]));
    }
  if (xs.size() < 2) throw ConfigurationError("too few positive points for an exponential fit");
  return stats::fit_line(xs, ys);
}

// sup over frames of E|.|^q, or E sup over frames when `path_sup` is set.
inline double moment_statistic(const Ensemble& e, double q, bool path_sup) {
  std::vector<double> per(e.particles, 0.0);
  double sup_of_mean = 0.0;
  for (std::size_t f = 0; f < e.frames; ++f) {
    double s = 0.0;
    for (std::size_t i = 0; i < e.particles; ++i) {
      double r2 = 0.0;
      for (std::size_t d = 0; d < e.dim; ++d) r2 += e.at(i, f, d) * e.at(i, f, d);
      const double v = std::pow(r2, 0.5 * q);
      per[i] = std::max(per[i], v);
      s += v;
    }
    sup_of_mean = std::max(sup_of_mean, s / static_cast<double>(e.particles));
  }
  return path_sup ? stats::mean(per) : sup_of_mean;
}

inline LemmaCheck moment_bound_check(const ModelSpec& model, const LemmaConfig& cfg, const RunContext& ctx) {
  LemmaCheck c{"moment_bound", "moments of order 3p of the slow and fast components stay bounded uniformly in eps",
               "max over statistics of max/min across eps <= threshold"};
  GridSpec grid = cfg.grid;
  grid.noise_steps = 0;
  const double q = 3.0 * cfg.scale.p;
  // E sup |X_eps|^q, sup_t E|Y_eps^xi|^q and sup_t E|Y_eps^y0|^q per eps.
  const char* names[] = {"x_sup_moment", "y_xi_moment", "y_y0_moment"};
  std::vector<std::vector<double>> stat(3);
  for (double eps : cfg.moment_eps) {
    ScaleParams sc = cfg.scale;
    sc.eps = eps;
    const PathBundle b = simulate_coupled(model, sc, grid, cfg.moment_particles, derive_seed(cfg.seed, seed_tag::lemma + 1), ctx);
    stat[0].push_back(moment_statistic(b.get(kXEps), q, true));
    stat[1].push_back(moment_statistic(b.get(kYEpsXi), q, false));
    stat[2].push_back(moment_statistic(b.get(kYEpsY0), q, false));
    for (std::size_t s = 0; s < 3; ++s) c.details[std::string(names[s]) + "_eps_" + std::to_string(eps)] = stat[s].back();
  }
  c.value = 0.0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double spread = *std::max_element(stat[s].begin(), stat[s].end()) / *std::min_element(stat[s].begin(), stat[s].end());
    c.details[std::string(names[s]) + "_spread"] = spread;
    c.value = std::max(c.value, spread);
  }
  c.threshold = cfg.moment_spread_max;
  c.passed = c.value <= c.threshold;
  return c;
}

inline LemmaCheck contraction_check(const ModelSpec& model, const LemmaConfig& cfg, const RunContext& ctx) {
  LemmaCheck c{"frozen_contraction", "two frozen copies on shared noise contract exponentially in mean square",
               "rate >= threshold"};
  GridSpec grid{.h = 1.0 / cfg.grid.rho_fast, .rho_fast = cfg.grid.rho_fast, .record_dt = 1.0 / cfg.grid.rho_fast};
  const std::uint64_t seed = derive_seed(cfg.seed, seed_tag::lemma + 2);
  const std::vector<double> y0(model.dims.m, 0.0);
  const PathBundle a = simulate_frozen(model, gaussian_sampler(2.0, 1.0), y0, cfg.contraction_T, grid,
                                       cfg.contraction_particles, seed, ctx);
  const PathBundle b = simulate_frozen(model, gaussian_sampler(-1.0, 0.5), y0, cfg.contraction_T, grid,
                                       cfg.contraction_particles, seed, ctx);
  const Ensemble& ya = a.get(kYEpsXi);
  const Ensemble& yb = b.get(kYEpsXi);
  std::vector<double> msd(ya.frames, 0.0);
  for (std::size_t f = 0; f < ya.frames; ++f) {
    for (std::size_t i = 0; i < ya.particles; ++i)
      for (std::size_t d = 0; d < ya.dim; ++d) msd[f] += std::pow(ya.at(i, f, d) - yb.at(i, f, d), 2);
    msd[f] /= static_cast<double>(ya.particles);
  }
  const auto fit = fit_log_curve(a.times, msd, cfg.contraction_T / 4.0);
  c.value = -fit.slope;
  c.threshold = cfg.contraction_threshold;
  c.passed = c.value >= c.threshold;
  c.details["initial_msd"] = msd.front();
  c.details["final_msd"] = msd.back();
  c.details["r2"] = fit.r2;
  return c;
}

inline LemmaCheck drift_decay_check(const ModelSpec& model, const AveragedDrift& bbar, const LemmaConfig& cfg,
                                    const RunContext& ctx) {
  LemmaCheck c{"averaged_drift_decay", "E b1 along the frozen flow relaxes exponentially to the averaged drift",
               "rate_ci_lo > threshold"};
  const std::size_t n = model.dims.n, m = model.dims.m;
  GridSpec grid{.h = 1.0 / cfg.grid.rho_fast, .rho_fast = cfg.grid.rho_fast, .record_dt = 1.0 / cfg.grid.rho_fast};
  const std::vector<double> y0(m, 1.0);
  const PathBundle b = simulate_frozen(model, gaussian_sampler(1.0, 1.0), y0, cfg.decay_T, grid, cfg.decay_particles,
                                       derive_seed(cfg.seed, seed_tag::lemma + 3), ctx);
  const EmpiricalMeasure mu = EmpiricalMeasure::dirac(cfg.decay_x0);
  const MeasureView muv = model.slow_view(mu);
  std::vector<double> bb(n);
  bbar.value(cfg.decay_x0, muv, bb);
  const Ensemble& yy = b.get(kYEpsY0);
  const Ensemble& yx = b.get(kYEpsXi);
  const std::size_t F = yy.frames, N = yy.particles;
  // vals[f][i] = first component of b1(x0, delta_x0, Y^y0_i, L_t) - bbar
  std::vector<std::vector<double>> vals(F, std::vector<double>(N));
  std::vector<double> out(n);
  for (std::size_t f = 0; f < F; ++f) {
    const auto cloud = yx.frame(f);
    const MeasureView nu = model.fast_view(cloud);
    const auto ys = yy.frame(f);
    for (std::size_t i = 0; i < N; ++i) {
      model.b1(cfg.decay_x0, muv, ConstVec(ys).subspan(i * m, m), nu, out);
      vals[f][i] = out[0] - bb[0];
    }
  }
  auto rate_for = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> g(F), se(F);
    std::vector<double> col(idx.size());
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t k = 0; k < idx.size(); ++k) col[k] = vals[f][idx[k]];
      g[f] = std::abs(stats::mean(col));
      se[f] = stats::standard_error(col);
    }
    std::vector<double> xs, ys;
    for (std::size_t f = 0; f < F; ++f)
      if (g[f] > 3.0 * se[f] && g[f] > 0.0) {
        xs.push_back(b.times[f]);
        ys.push_back(std::log(g[f]));
      }
    if (xs.size() < 3) return 0.0;
    return -stats::fit_line(xs, ys).slope;
  };
  std::vector<std::size_t> all(N);
  for (std::size_t i = 0; i < N; ++i) all[i] = i;
  c.value = rate_for(all);
  const auto ci = stats::bootstrap_interval(N, cfg.bootstrap, derive_seed(cfg.seed, seed_tag::bootstrap + 77), rate_for);
  c.threshold = 0.0;
  c.passed = c.value > 0.0 && ci.lo > 0.0;
  c.details["rate_ci_lo"] = ci.lo;
  c.details["rate_ci_hi"] = ci.hi;
  return c;
}

inline LemmaCheck auxiliary_check(const ModelSpec& model, const AveragedDrift& bbar, const LemmaConfig& cfg,
                                  const RunContext& ctx) {
  LemmaCheck c{"auxiliary_shrinkage", "E sup |U_eps - theta_eps|^2 vanishes as eps decreases",
               "value(smallest eps) < threshold = value(largest eps)"};
  GridSpec grid = cfg.grid;
  grid.record_dt = cfg.aux_record_dt;
  grid.noise_steps = sweep_noise_steps(cfg.aux_eps, cfg.scale.T, grid, cfg.grid.h);
  const std::uint64_t seed = derive_seed(cfg.seed, seed_tag::lemma + 4);
  std::vector<double> values;
  for (std::size_t e = 0; e < cfg.aux_eps.size(); ++e) {
    ScaleParams sc = cfg.scale;
    sc.eps = cfg.aux_eps[e];
    const PathBundle coupled = simulate_coupled(model, sc, grid, cfg.aux_particles, seed, ctx);
    // X_bar on the coupled step, so U_eps carries no step-mismatch error amplified by 1/sqrt(eps).
    GridSpec agrid = grid;
    agrid.h = coupled.ledger.step;
    const PathBundle xbar = simulate_averaged(model, bbar.as_function(), sc, agrid, cfg.aux_particles, seed, &coupled, ctx);
    const PathBundle aux = simulate_auxiliary(model, bbar, coupled, xbar, sc, cfg.limit, ctx);
    const double v = mean_sup_power(aux.get(kUEps), aux.get(kThetaEps), 2.0);
    values.push_back(v);
    c.details["value_eps_" + std::to_string(sc.eps)] = v;
  }
  c.value = values.back();
  c.threshold = values.front();
  c.passed = c.value < c.threshold;
  return c;
}

inline LemmaCheck time_change_check(const ModelSpec& model, const LemmaConfig& cfg, const RunContext& ctx) {
  LemmaCheck c{"time_change_law", "Y_eps at time t has the law of the frozen process at time t/eps",
               "max |z| over moments 1-4 <= threshold"};
  const double eps = cfg.time_change_eps;
  const double T = cfg.time_change_times.back();
  ScaleParams sc = cfg.scale;
  sc.eps = eps;
  sc.T = T;
  // Coupled fast step eps/rho_fast equals eps times the frozen step 1/rho_fast.
  GridSpec cg{.h = eps / cfg.grid.rho_fast, .rho_fast = cfg.grid.rho_fast, .record_dt = eps / cfg.grid.rho_fast};
  GridSpec fg{.h = 1.0 / cfg.grid.rho_fast, .rho_fast = cfg.grid.rho_fast, .record_dt = 1.0 / cfg.grid.rho_fast};
  const PathBundle coupled = simulate_coupled(model, sc, cg, cfg.time_change_particles, derive_seed(cfg.seed, seed_tag::lemma + 5), ctx);
  const PathBundle frozen = simulate_frozen(model, cfg.scale.law_xi, cfg.scale.y0, T / eps, fg, cfg.time_change_particles,
                                            derive_seed(cfg.seed, seed_tag::lemma + 6), ctx);
  double worst = 0.0;
  for (double t : cfg.time_change_times) {
    const std::size_t fc = static_cast<std::size_t>(std::llround(t / cg.record_dt));
    const std::size_t ff = static_cast<std::size_t>(std::llround(t / eps / fg.record_dt));
    const auto a = coupled.get(kYEpsXi).frame(fc);
    const auto b = frozen.get(kYEpsXi).frame(ff);
    for (int k = 1; k <= 4; ++k) {
      std::vector<double> pa(a.size()), pb(b.size());
      for (std::size_t i = 0; i < a.size(); ++i) pa[i] = std::pow(a[i], k);
      for (std::size_t i = 0; i < b.size(); ++i) pb[i] = std::pow(b[i], k);
      const double se = std::hypot(stats::standard_error(pa), stats::standard_error(pb));
      const double z = std::abs(stats::mean(pa) - stats::mean(pb)) / se;
      worst = std::max(worst, z);
      c.details["z_t" + std::to_string(t) + "_k" + std::to_string(k)] = z;
    }
  }
  c.value = worst;
  c.threshold = 3.0;
  c.passed = c.value <= c.threshold;
  return c;
}

}  // namespace detail

// Property suite for the fast process, the averaged drift and the auxiliary process.
inline PropertyReport run_lemma_checks(const ModelSpec& model, const LemmaConfig& cfg, const RunContext& ctx = {}) {
  model.validate();
  if (model.dims.m != 1) throw UnsupportedDimensionError("the lemma suite needs a scalar fast component");
  PropertyReport r;
  r.checks.push_back(detail::moment_bound_check(model, cfg, ctx));
  r.checks.push_back(detail::contraction_check(model, cfg, ctx));
  const EmpiricalMeasure eta = estimate_eta(model, cfg.invariant, cfg.grid.rho_fast, cfg.seed, ctx);
  const AveragedDrift bbar = build_averaged_drift(model, eta, cfg.averaging);
  r.checks.push_back(detail::drift_decay_check(model, bbar, cfg, ctx));
  detail::require_linearization(model, "run_lemma_checks");
  r.checks.push_back(detail::auxiliary_check(model, bbar, cfg, ctx));
  r.checks.push_back(detail::time_change_check(model, cfg, ctx));
  return r;
}

}  // namespace msmv
