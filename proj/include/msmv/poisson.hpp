#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "msmv/errors.hpp"
#include "msmv/integrator.hpp"
#include "msmv/measure.hpp"
#include "msmv/model.hpp"
#include "msmv/paths.hpp"
#include "msmv/stats.hpp"

namespace msmv {

struct PoissonOptions {
  double T_trunc = 0.0;  // 0 doubles the horizon from adaptive_start until the tail is negligible
  std::size_t mc_paths = 2000;
  std::size_t cloud_paths = 8192;  // particles carrying the law flow; at least mc_paths are used
  std::size_t batches = 16;        // independent clouds; standard errors are batch means
  GridSpec grid{.h = 0.02, .rho_fast = 20.0};
  double adaptive_start = 4.0;
  double adaptive_max = 64.0;
  double tail_tolerance = 1e-3;  // fitted tail relative to the accumulated integral
};

struct PoissonCell {
  std::vector<double> x, y;
  std::vector<double> mu_mean, nu_mean;
  std::vector<double> psi_hat, psi_se;                        // n
  std::vector<double> dy_psi_sigma2_hat, dy_psi_sigma2_se;    // n x d2, row-major
  double T_trunc = 0.0;
  std::size_t mc_paths = 0;
  double decay_rate = 0.0;  // fitted exponential rate of the integrand; NaN when not fitted
  double tail_bound = 0.0;  // fitted integral of the integrand beyond T_trunc
  std::vector<std::string> warnings;
};

namespace detail {

struct DecayFit {
  double rate = std::numeric_limits<double>::quiet_NaN();
  double tail = 0.0;
  bool failed = false;
  std::string message;
};

// Fits log|g(s)| = log A - lambda s on the leading run of grid points where
// the integrand mean is at least three standard errors away from zero.
inline DecayFit fit_decay(const std::vector<double>& s, const std::vector<double>& g, const std::vector<double>& se,
                          double T) {
  DecayFit r;
  bool all_zero = true;
  for (std::size_t j = 0; j < s.size(); ++j)
    if (g[j] != 0.0 || se[j] != 0.0) all_zero = false;
  std::vector<double> xs, ys;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (!(std::abs(g[j]) > 3.0 * se[j] && g[j] != 0.0)) {
      if (!xs.empty()) break;
      continue;
    }
    xs.push_back(s[j]);
    ys.push_back(std::log(std::abs(g[j])));
  }
  if (all_zero) {
    r.rate = std::numeric_limits<double>::infinity();
    return r;
  }
  // Last quarter: any remaining significant signal must be decaying.
  const std::size_t q0 = s.size() * 3 / 4, q1 = s.size() * 7 / 8;
  auto window = [&](std::size_t b, std::size_t e, double& m, double& err) {
    m = 0.0;
    err = 0.0;
    for (std::size_t j = b; j < e; ++j) {
      m += g[j];
      err += se[j];
    }
    m /= static_cast<double>(e - b);
    err /= static_cast<double>(e - b);
  };
  if (q1 > q0 && s.size() > q1) {
    double m_prev, e_prev, m_last, e_last;
    window(q0, q1, m_prev, e_prev);
    window(q1, s.size(), m_last, e_last);
    if (std::abs(m_last) > 3.0 * e_last && std::abs(m_last) >= std::abs(m_prev)) {
      r.failed = true;
      r.message = "integrand is not decreasing over the last quarter of [0, " + std::to_string(T) + "]";
      return r;
    }
  }
  if (xs.size() < 2) {
    r.message = "integrand is within noise of zero on most of the window; no decay fit";
    return r;
  }
  const auto fit = stats::fit_line(xs, ys);
  if (!(fit.slope < 0.0)) {
    r.failed = true;
    r.message = "fitted decay rate is not positive";
    return r;
  }
  r.rate = -fit.slope;
  r.tail = std::exp(fit.intercept - r.rate * T) / r.rate;
  return r;
}

// Split of the estimator paths into independent batches, each with its own
// cloud of interacting particles. Batch b owns paths [offset[b], offset[b+1]).
struct Batches {
  std::vector<std::size_t> offset;
  std::size_t cloud = 0;  // particles per batch engine

  Batches(std::size_t mc_paths, std::size_t cloud_paths, std::size_t batches) {
    const std::size_t g = std::max<std::size_t>(1, std::min(batches, mc_paths / 2));
    offset.assign(g + 1, 0);
    for (std::size_t b = 0; b < g; ++b) offset[b + 1] = offset[b] + mc_paths / g + (b < mc_paths % g ? 1 : 0);
    cloud = std::max(offset[1], (cloud_paths + g - 1) / g);
  }
  std::size_t count() const { return offset.size() - 1; }
  std::size_t size(std::size_t b) const { return offset[b + 1] - offset[b]; }
};

// Runs frozen pairs (Y^y, cloud Y^xi with xi drawn from nu_samples) in
// independent batches advanced in lockstep. visit(j, b, engine, offset) is
// called at every grid time j = 0..n_steps before stepping; engine paths
// 0..size(b)-1 are the estimator paths offset..offset+size(b)-1. after(j) runs
// once all batches were visited at time j.
template <class Visit, class After>
StepPlan run_frozen_pair(const ModelSpec& model, ConstVec y, const EmpiricalMeasure& nu_samples, double T,
                         const GridSpec& grid, const Batches& batches, std::uint64_t seed, Executor& ex, Visit&& visit,
                         After&& after) {
  const double step = std::min(grid.h, 1.0 / grid.rho_fast);
  const StepPlan plan = make_plan(T, step, 0.0, 0);
  std::vector<std::unique_ptr<CoupledEngine>> engines;
  for (std::size_t b = 0; b < batches.count(); ++b) {
    engines.push_back(std::make_unique<CoupledEngine>(model, 1.0, plan, batches.cloud,
                                                      batches.count() == 1 ? seed : derive_seed(seed, b), ex,
                                                      CoupledEngine::Parts{.slow = false, .fast_y0 = true}));
    engines.back()->initialize(Sampler{}, resampling_sampler(nu_samples), y);
  }
  for (std::size_t j = 0; j <= plan.n_steps; ++j) {
    for (std::size_t b = 0; b < batches.count(); ++b) {
      engines[b]->reduce();
      visit(j, b, *engines[b], batches.offset[b]);
      if (j < plan.n_steps) engines[b]->advance(j);
    }
    after(j);
  }
  return plan;
}

inline void check_query(const ModelSpec& model, ConstVec x, const EmpiricalMeasure& mu, ConstVec y,
                        const EmpiricalMeasure& nu_samples, std::size_t mc_paths) {
  model.validate();
  if (x.size() != model.dims.n || y.size() != model.dims.m) throw ConfigurationError("query point has the wrong dimension");
  if (mu.dim() != model.dims.n || nu_samples.dim() != model.dims.m)
    throw ConfigurationError("query measure has the wrong dimension");
  if (nu_samples.size() == 0) throw ConfigurationError("nu_samples is empty");
  if (mc_paths < 2) throw ConfigurationError("at least two Monte Carlo paths are required", "poisson.mc_paths");
}

inline PoissonCell make_cell(ConstVec x, const EmpiricalMeasure& mu, ConstVec y, const EmpiricalMeasure& nu) {
  PoissonCell c;
  c.x.assign(x.begin(), x.end());
  c.y.assign(y.begin(), y.end());
  const auto mv = mu.view(), nv = nu.view();
  c.mu_mean.assign(mv.mean_vector().begin(), mv.mean_vector().end());
  c.nu_mean.assign(nv.mean_vector().begin(), nv.mean_vector().end());
  return c;
}

// Time integral of a per-path integrand of width `width`, with the statistics
// the decay fit needs.
struct PathIntegral {
  std::vector<double> per_path;     // mc_paths x width
  std::vector<double> mean_curve;   // norm of the path-mean integrand at each grid time
  std::vector<double> se_curve;
  std::vector<double> times;
  StepPlan plan;
  Batches batches{2, 0, 1};
};

inline void record_curve(PathIntegral& pi, const std::vector<double>& vals, std::size_t paths, std::size_t width,
                         double t) {
  double mean_sq = 0.0, se_sq = 0.0;
  for (std::size_t c = 0; c < width; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < paths; ++i) s += vals[i * width + c];
    const double m = s / static_cast<double>(paths);
    for (std::size_t i = 0; i < paths; ++i) s2 += (vals[i * width + c] - m) * (vals[i * width + c] - m);
    mean_sq += m * m;
    se_sq += s2 / static_cast<double>(paths - 1) / static_cast<double>(paths);
  }
  pi.mean_curve.push_back(std::sqrt(mean_sq));
  pi.se_curve.push_back(std::sqrt(se_sq));
  pi.times.push_back(t);
}

// Mean over all paths; the standard error is the batch-means estimate, which
// also carries the noise each batch's cloud shares across its paths.
inline void summarize(const std::vector<double>& per_path, const Batches& batches, std::size_t width,
                      std::vector<double>& mean, std::vector<double>& se) {
  const std::size_t paths = batches.offset.back(), g = batches.count();
  mean.assign(width, 0.0);
  se.assign(width, 0.0);
  std::vector<double> col(paths);
  for (std::size_t c = 0; c < width; ++c) {
    for (std::size_t i = 0; i < paths; ++i) col[i] = per_path[i * width + c];
    mean[c] = stats::mean(col);
    if (g == 1) {
      se[c] = stats::standard_error(col);
      continue;
    }
    double acc = 0.0;
    for (std::size_t b = 0; b < g; ++b) {
      double sb = 0.0;
      for (std::size_t i = batches.offset[b]; i < batches.offset[b + 1]; ++i) sb += col[i];
      const double share = static_cast<double>(batches.size(b)) / static_cast<double>(paths);
      const double d = sb / static_cast<double>(batches.size(b)) - mean[c];
      acc += share * share * d * d;
    }
    se[c] = std::sqrt(acc * static_cast<double>(g) / static_cast<double>(g - 1));
  }
}

inline PathIntegral integrate_psi(const ModelSpec& model, const AveragedDriftFn& bbar, ConstVec x,
                                  const EmpiricalMeasure& mu, ConstVec y, const EmpiricalMeasure& nu_samples, double T,
                                  const PoissonOptions& opt, std::uint64_t seed, Executor& ex) {
  const std::size_t n = model.dims.n, M = opt.mc_paths;
  const MeasureView muv = model.slow_view(mu);
  std::vector<double> bbar_val(n);
  bbar(x, muv, bbar_val);
  PathIntegral pi;
  pi.per_path.assign(M * n, 0.0);
  std::vector<double> vals(M * n);
  const Batches batches(M, opt.cloud_paths, opt.batches);
  double step = 0.0;
  pi.plan = run_frozen_pair(
      model, y, nu_samples, T, opt.grid, batches, seed, ex,
      [&](std::size_t j, std::size_t g, const CoupledEngine& eng, std::size_t offset) {
        step = eng.plan().step;
        const std::size_t last = eng.plan().n_steps;
        ex.for_chunks(batches.size(g), [&](std::size_t b, std::size_t e) {
          for (std::size_t k = b; k < e; ++k) {
            const std::size_t i = offset + k;
            const OutVec v(vals.data() + i * n, n);
            model.b1(x, muv, eng.y_y0().subspan(k * model.dims.m, model.dims.m), eng.nu(), v);
            for (std::size_t c = 0; c < n; ++c) {
              v[c] -= bbar_val[c];
              if (!std::isfinite(v[c])) throw EvaluationError("non-finite Poisson integrand", i);
            }
            const double w = (j == 0 || j == last) ? 0.5 * step : step;
            for (std::size_t c = 0; c < n; ++c) pi.per_path[i * n + c] += w * v[c];
          }
        });
      },
      [&](std::size_t j) { record_curve(pi, vals, M, n, static_cast<double>(j) * step); });
  pi.batches = batches;
  return pi;
}

inline PathIntegral integrate_dy_psi(const ModelSpec& model, ConstVec x, const EmpiricalMeasure& mu, ConstVec y,
                                     const EmpiricalMeasure& nu_samples, double T, const PoissonOptions& opt,
                                     std::uint64_t seed, Executor& ex) {
  const auto [n, m, d1, d2] = model.dims;
  const std::size_t M = opt.mc_paths;
  const MeasureView muv = model.slow_view(mu);
  PathIntegral pi;
  pi.per_path.assign(M * n * m, 0.0);
  std::vector<double> vals(M * n * m), jac(M * m * m, 0.0), jac_next(M * m * m);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t a = 0; a < m; ++a) jac[i * m * m + a * m + a] = 1.0;
  const Batches batches(M, opt.cloud_paths, opt.batches);
  double step = 0.0;
  std::size_t last = 0;
  pi.plan = run_frozen_pair(
      model, y, nu_samples, T, opt.grid, batches, seed, ex,
      [&](std::size_t j, std::size_t g, const CoupledEngine& eng, std::size_t offset) {
        step = eng.plan().step;
        last = eng.plan().n_steps;
        const double fsq = std::sqrt(step);
        ex.for_chunks(batches.size(g), [&](std::size_t b, std::size_t e) {
          std::vector<double> dyb1(n * m), dyb2(m * m), dsig(m * d2), col(m), z(d2);
          for (std::size_t k = b; k < e; ++k) {
            const std::size_t i = offset + k;
            const ConstVec yi = eng.y_y0().subspan(k * m, m);
            const double* J = jac.data() + i * m * m;
            model.derivs.dy_b1(x, muv, yi, eng.nu(), dyb1);
            double* v = vals.data() + i * n * m;
            for (std::size_t a = 0; a < n; ++a)
              for (std::size_t c = 0; c < m; ++c) {
                double s = 0.0;
                for (std::size_t q = 0; q < m; ++q) s += dyb1[a * m + q] * J[q * m + c];
                v[a * m + c] = s;
                if (!std::isfinite(s)) throw EvaluationError("non-finite variation integrand", i);
              }
            const double w = (j == 0 || j == last) ? 0.5 * step : step;
            for (std::size_t c = 0; c < n * m; ++c) pi.per_path[i * n * m + c] += w * v[c];
            if (j == last) continue;
            // First-variation step driven by the same W increment as Y^y.
            model.derivs.dy_b2(yi, eng.nu(), dyb2);
            for (std::size_t c = 0; c < d2; ++c) z[c] = fsq * eng.rng().normal(Channel::fast_noise, k, j * d2 + c);
            double* Jn = jac_next.data() + i * m * m;
            for (std::size_t c = 0; c < m; ++c) {
              for (std::size_t a = 0; a < m; ++a) col[a] = J[a * m + c];
              model.derivs.dy_sigma2(yi, eng.nu(), col, dsig);
              for (std::size_t a = 0; a < m; ++a) {
                double s = col[a];
                for (std::size_t q = 0; q < m; ++q) s += dyb2[a * m + q] * col[q] * step;
                for (std::size_t q = 0; q < d2; ++q) s += dsig[a * d2 + q] * z[q];
                Jn[a * m + c] = s;
              }
            }
          }
        });
      },
      [&](std::size_t j) {
        record_curve(pi, vals, M, n * m, static_cast<double>(j) * step);
        if (j < last) jac.swap(jac_next);
      });
  pi.batches = batches;
  return pi;
}

inline void apply_decay(PoissonCell& cell, const PathIntegral& pi, double T, bool strict) {
  const DecayFit fit = fit_decay(pi.times, pi.mean_curve, pi.se_curve, T);
  cell.decay_rate = fit.rate;
  cell.tail_bound = fit.tail;
  if (fit.failed) {
    if (strict) throw TruncationError("truncation at T = " + std::to_string(T) + ": " + fit.message);
    cell.warnings.push_back("truncation: " + fit.message);
  } else if (!fit.message.empty()) {
    cell.warnings.push_back(fit.message);
  }
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double e : v) s += e * e;
  return std::sqrt(s);
}

// Runs `body(T)` for the configured or adaptively doubled horizon.
template <class Body>
PoissonCell with_horizon(const PoissonOptions& opt, Body&& body) {
  if (opt.T_trunc > 0.0) return body(opt.T_trunc);
  if (!(opt.adaptive_start > 0.0)) throw ConfigurationError("poisson.adaptive_start must be positive");
  double T = opt.adaptive_start;
  for (;;) {
    PoissonCell cell = body(T);
    const double scale = std::max(norm(cell.psi_hat), norm(cell.dy_psi_sigma2_hat));
    const bool settled = std::isfinite(cell.decay_rate) ? cell.tail_bound < opt.tail_tolerance * scale : true;
    if (settled || T * 2.0 > opt.adaptive_max) {
      if (!settled) cell.warnings.push_back("adaptive horizon reached poisson.adaptive_max before the tail settled");
      return cell;
    }
    T *= 2.0;
  }
}

}  // namespace detail

// Psi(x, mu, y, nu) as the truncated time integral of E b1(x, mu, Y_s^y, L_s) - bbar(x, mu).
inline PoissonCell psi_estimate(const ModelSpec& model, const AveragedDriftFn& bbar, ConstVec x,
                                const EmpiricalMeasure& mu, ConstVec y, const EmpiricalMeasure& nu_samples,
                                const PoissonOptions& opt, std::uint64_t seed, const RunContext& ctx = {}) {
  detail::check_query(model, x, mu, y, nu_samples, opt.mc_paths);
  if (!bbar) throw ConfigurationError("averaged drift callback is empty");
  Executor ex(ctx.threads);
  return detail::with_horizon(opt, [&](double T) {
    const auto pi = detail::integrate_psi(model, bbar, x, mu, y, nu_samples, T, opt, seed, ex);
    PoissonCell cell = detail::make_cell(x, mu, y, nu_samples);
    detail::summarize(pi.per_path, pi.batches, model.dims.n, cell.psi_hat, cell.psi_se);
    cell.T_trunc = T;
    cell.mc_paths = opt.mc_paths;
    detail::apply_decay(cell, pi, T, ctx.strict);
    return cell;
  });
}

// d_y Psi sigma2 through the first-variation process of Y^y.
inline PoissonCell dy_psi_sigma2_estimate(const ModelSpec& model, ConstVec x, const EmpiricalMeasure& mu, ConstVec y,
                                          const EmpiricalMeasure& nu_samples, const PoissonOptions& opt,
                                          std::uint64_t seed, const RunContext& ctx = {}) {
  detail::check_query(model, x, mu, y, nu_samples, opt.mc_paths);
  model.require({"dy_b1", "dy_b2", "dy_sigma2"}, "dy_psi_sigma2_estimate");
  const auto [n, m, d1, d2] = model.dims;
  Executor ex(ctx.threads);
  return detail::with_horizon(opt, [&](double T) {
    const auto pi = detail::integrate_dy_psi(model, x, mu, y, nu_samples, T, opt, seed, ex);
    std::vector<double> sig(m * d2);
    const MeasureView nuv = model.fast_view(nu_samples);
    model.sigma2(y, nuv, sig);
    // Right-multiply every per-path integral by sigma2(y, nu).
    std::vector<double> prod(opt.mc_paths * n * d2, 0.0);
    for (std::size_t i = 0; i < opt.mc_paths; ++i)
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t c = 0; c < d2; ++c) {
          double s = 0.0;
          for (std::size_t k = 0; k < m; ++k) s += pi.per_path[i * n * m + a * m + k] * sig[k * d2 + c];
          prod[i * n * d2 + a * d2 + c] = s;
        }
    PoissonCell cell = detail::make_cell(x, mu, y, nu_samples);
    detail::summarize(prod, pi.batches, n * d2, cell.dy_psi_sigma2_hat, cell.dy_psi_sigma2_se);
    cell.T_trunc = T;
    cell.mc_paths = opt.mc_paths;
    detail::apply_decay(cell, pi, T, ctx.strict);
    return cell;
  });
}

struct UpsilonBudget {
  std::size_t cells = 32;  // evaluation points y_j; 1-D laws use equal-mass bin means
  PoissonOptions poisson{.T_trunc = 8.0, .mc_paths = 2000};
};

struct UpsilonEstimate {
  std::size_t n = 0;
  std::vector<double> matrix;             // n x n symmetric PSD
  std::vector<double> raw_second_moment;  // n x n
  std::vector<double> eigenvalues;        // of raw_second_moment, ascending
  double clipped_fraction = 0.0;          // |negative eigenvalues| / sum |eigenvalues|
  double tolerance = 0.0;                 // bound on |matrix^2 - raw| (Frobenius)
  std::vector<double> cell_y;             // cells x m
  std::vector<double> cell_weights;
  std::vector<double> cell_values;        // cells x n x d2
  std::vector<double> cell_se;
  std::size_t mc_paths = 0;
  double T_trunc = 0.0;
  std::vector<std::string> warnings;
};

// Symmetric PSD square root with negative eigenvalues clipped to zero.
inline void psd_sqrt(UpsilonEstimate& out) {
  const std::size_t n = out.n;
  Eigen::MatrixXd raw(n, n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      raw(a, b) = 0.5 * (out.raw_second_moment[a * n + b] + out.raw_second_moment[b * n + a]);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(raw);
  const auto& lam = es.eigenvalues();
  double neg = 0.0, total = 0.0;
  Eigen::VectorXd root(n);
  out.eigenvalues.resize(n);
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    out.eigenvalues[static_cast<std::size_t>(i)] = lam(i);
    total += std::abs(lam(i));
    if (lam(i) < 0.0) neg += -lam(i);
    root(i) = std::sqrt(std::max(lam(i), 0.0));
  }
  out.clipped_fraction = total > 0.0 ? neg / total : 0.0;
  if (out.clipped_fraction > 0.05)
    throw ConditioningError("eigenvalue clipping removed " + std::to_string(100.0 * out.clipped_fraction) +
                                "% of the trace of the averaged outer product",
                            out.clipped_fraction);
  const Eigen::MatrixXd S = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
  out.matrix.assign(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) out.matrix[a * n + b] = 0.5 * (S(a, b) + S(b, a));
  // Clipped mass plus a rounding allowance.
  out.tolerance = neg + 1e-12 * (1.0 + raw.norm());
}

// Upsilon(x, mu): PSD square root of the eta-average of (dyPsi sigma2)(dyPsi sigma2)^T, nu fixed to eta.
inline UpsilonEstimate upsilon_estimate(const ModelSpec& model, const EmpiricalMeasure& eta, ConstVec x,
                                        const EmpiricalMeasure& mu, const UpsilonBudget& budget, std::uint64_t seed,
                                        const RunContext& ctx = {}) {
  model.validate();
  if (eta.size() == 0) throw ConfigurationError("invariant measure is empty");
  if (budget.cells == 0) throw ConfigurationError("upsilon.cells must be positive", "upsilon.cells");
  const auto [n, m, d1, d2] = model.dims;
  UpsilonEstimate out;
  out.n = n;
  out.mc_paths = budget.poisson.mc_paths;
  EmpiricalMeasure cells;
  if (m == 1) {
    cells = compress_quantile_bins(eta, budget.cells);
  } else {
    const CounterRng rng(seed);
    const Sampler draw = resampling_sampler(eta);
    std::vector<double> pts(budget.cells * m);
    for (std::size_t j = 0; j < budget.cells; ++j) {
      DrawStream s(rng, Channel::resample, j);
      draw(s, OutVec(pts).subspan(j * m, m));
    }
    cells = EmpiricalMeasure(std::move(pts), m);
  }
  out.raw_second_moment.assign(n * n, 0.0);
  for (std::size_t j = 0; j < cells.size(); ++j) {
    const ConstVec yj = cells.point(j);
    const PoissonCell cell = dy_psi_sigma2_estimate(model, x, mu, yj, eta, budget.poisson, derive_seed(seed, j), ctx);
    const double w = cells.weight(j);
    const auto& D = cell.dy_psi_sigma2_hat;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        double s = 0.0;
        for (std::size_t c = 0; c < d2; ++c) s += D[a * d2 + c] * D[b * d2 + c];
        out.raw_second_moment[a * n + b] += w * s;
      }
    out.cell_y.insert(out.cell_y.end(), yj.begin(), yj.end());
    out.cell_weights.push_back(w);
    out.cell_values.insert(out.cell_values.end(), D.begin(), D.end());
    out.cell_se.insert(out.cell_se.end(), cell.dy_psi_sigma2_se.begin(), cell.dy_psi_sigma2_se.end());
    out.T_trunc = cell.T_trunc;
    for (const auto& w : cell.warnings) out.warnings.push_back("cell " + std::to_string(j) + ": " + w);
  }
  psd_sqrt(out);
  return out;
}

struct DynkinOptions {
  std::size_t mc_paths = 2000;
  std::size_t cloud_paths = 8192;
  std::size_t batches = 16;
  std::size_t outer_points = 32;  // end states at which Psi is re-estimated
  GridSpec grid{.h = 0.02, .rho_fast = 20.0};
};

struct DynkinResult {
  double residual = 0.0;
  double combined_se = 0.0;
  std::vector<double> lhs, rhs;
  double lhs_se = 0.0, rhs_se = 0.0;
  std::size_t outer_points = 0;
};

// Psi evaluated at (y', nu'); `query` numbers the calls so the caller can vary seeds.
using PsiQuery = std::function<PoissonCell(ConstVec y, const EmpiricalMeasure& nu, std::size_t query)>;

// Integrated form of the Poisson equation over [0, t_short]:
// E Psi(Y_t, L_t) - Psi(y, nu) versus -int_0^t (E b1 - bbar) ds.
inline DynkinResult dynkin_residual(const ModelSpec& model, const AveragedDriftFn& bbar, const PsiQuery& psi_query,
                                    ConstVec x, const EmpiricalMeasure& mu, ConstVec y,
                                    const EmpiricalMeasure& nu_samples, double t_short, const DynkinOptions& opt,
                                    std::uint64_t seed, const RunContext& ctx = {}) {
  detail::check_query(model, x, mu, y, nu_samples, opt.mc_paths);
  if (!(t_short >= 0.0)) throw ConfigurationError("t_short must be nonnegative", "dynkin.t_short");
  const std::size_t n = model.dims.n, m = model.dims.m;
  DynkinResult r;
  r.lhs.assign(n, 0.0);
  r.rhs.assign(n, 0.0);
  if (t_short == 0.0) return r;
  Executor ex(ctx.threads);

  // Right side plus the end states of the same paths.
  const MeasureView muv = model.slow_view(mu);
  std::vector<double> bbar_val(n), per_path(opt.mc_paths * n, 0.0), vals(opt.mc_paths * n);
  bbar(x, muv, bbar_val);
  std::vector<double> end_y(opt.mc_paths * m), end_cloud;
  const detail::Batches batches(opt.mc_paths, opt.cloud_paths, opt.batches);
  detail::run_frozen_pair(
      model, y, nu_samples, t_short, opt.grid, batches, seed, ex,
      [&](std::size_t j, std::size_t g, const CoupledEngine& eng, std::size_t offset) {
        const double step = eng.plan().step;
        const std::size_t last = eng.plan().n_steps;
        const double w = (j == 0 || j == last) ? 0.5 * step : step;
        for (std::size_t k = 0; k < batches.size(g); ++k) {
          const std::size_t i = offset + k;
          const OutVec v(vals.data() + i * n, n);
          model.b1(x, muv, eng.y_y0().subspan(k * m, m), eng.nu(), v);
          for (std::size_t c = 0; c < n; ++c) per_path[i * n + c] += w * (v[c] - bbar_val[c]);
        }
        if (j == last) {
          std::copy_n(eng.y_y0().begin(), batches.size(g) * m, end_y.begin() + offset * m);
          // Pooled end clouds of all batches stand in for the law at t_short.
          end_cloud.insert(end_cloud.end(), eng.y_xi().begin(), eng.y_xi().end());
        }
      },
      [](std::size_t) {});
  std::vector<double> rhs_se(n);
  detail::summarize(per_path, batches, n, r.rhs, rhs_se);
  for (double& v : r.rhs) v = -v;

  const PoissonCell base = psi_query(y, nu_samples, 0);
  const EmpiricalMeasure cloud(end_cloud, m);
  const auto outer = detail::interaction_subset(opt.mc_paths, opt.outer_points, 0);
  r.outer_points = outer.size();
  std::vector<double> psi_end(outer.size() * n);
  for (std::size_t o = 0; o < outer.size(); ++o) {
    const ConstVec yo(end_y.data() + outer[o] * m, m);
    const PoissonCell c = psi_query(yo, cloud, o + 1);
    for (std::size_t a = 0; a < n; ++a) psi_end[o * n + a] = c.psi_hat[a];
  }
  std::vector<double> end_mean, end_se;
  detail::summarize(psi_end, detail::Batches(outer.size(), 0, 1), n, end_mean, end_se);
  double lhs_var = 0.0, rhs_var = 0.0, res = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    r.lhs[a] = end_mean[a] - base.psi_hat[a];
    lhs_var += end_se[a] * end_se[a] + base.psi_se[a] * base.psi_se[a];
    rhs_var += rhs_se[a] * rhs_se[a];
    res += (r.lhs[a] - r.rhs[a]) * (r.lhs[a] - r.rhs[a]);
  }
  r.residual = std::sqrt(res);
  r.lhs_se = std::sqrt(lhs_var);
  r.rhs_se = std::sqrt(rhs_var);
  r.combined_se = std::sqrt(lhs_var + rhs_var);
  return r;
}

}  // namespace msmv
