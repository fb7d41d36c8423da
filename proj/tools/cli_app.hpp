#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "msmv/msmv.hpp"

namespace msmv::cli {

using nlohmann::json;

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s = {"audit", "invariant-measure", "simulate", "avg-rate",
                                             "clt",   "poisson",           "lemma-checks"};
  return s;
}

// Documented defaults; a few subcommands override grid and sample sizes.
inline std::map<std::string, std::string> default_values(const std::string& sub) {
  std::map<std::string, std::string> d = {
      {"model.name", "example"},
      {"model.a", "1"},
      {"model.b", "1"},
      {"model.q", "1"},
      {"model.k", "1"},
      {"model.m", "0.25"},
      {"model.reference_constants", "false"},
      {"scale.eps", "0.0625"},
      {"scale.T", "1"},
      {"scale.p", "2"},
      {"scale.y0", "0.5"},
      {"scale.rho_mean", "0"},
      {"scale.rho_sd", "1"},
      {"scale.xi_mean", "0"},
      {"scale.xi_sd", "1"},
      {"grid.h", "0.0015625"},
      {"grid.rho_fast", "20"},
      {"grid.record_dt", "0.003125"},
      {"grid.noise_steps", "0"},
      {"run.n_particles", "2048"},
      {"run.seed", "1"},
      {"run.strict", "false"},
      {"invariant.burn_in", "20"},
      {"invariant.collect", "100"},
      {"invariant.n_particles", "2048"},
      {"invariant.h", "0.05"},
      {"invariant.record_dt", "0.5"},
      {"invariant.mean_tol", "0.05"},
      {"invariant.var_tol", "0.05"},
      {"averaging.value_atoms", "32"},
      {"averaging.derivative_atoms", "8"},
      {"audit.probes", "4096"},
      {"audit.box", "3"},
      {"audit.require_margin", "false"},
      {"simulate.process", "coupled"},
      {"simulate.frozen_T", "10"},
      {"simulate.sample_paths", "8"},
      {"rate.eps_grid", "0.0625,0.03125,0.015625,0.0078125,0.00390625,0.001953125"},
      {"rate.n_replicas", "8"},
      {"rate.averaged_h", "0.0015625"},
      {"rate.bootstrap", "200"},
      {"rate.slope_min", "0.4"},
      {"rate.slope_max", "0.6"},
      {"rate.r2_min", "0.95"},
      {"clt.eps_grid", "0.0625,0.015625,0.00390625"},
      {"clt.averaged_h", "0.00078125"},
      {"clt.upsilon_x", "0"},
      {"clt.upsilon_cells", "32"},
      {"clt.upsilon_mc_paths", "2000"},
      {"clt.upsilon_T", "8"},
      {"clt.interaction_samples", "128"},
      {"clt.bootstrap", "200"},
      {"clt.ks_max", "0.1"},
      {"clt.var_ratio_min", "0.8"},
      {"clt.var_ratio_max", "1.25"},
      {"poisson.x", "0"},
      {"poisson.y", "1"},
      {"poisson.T_trunc", "0"},
      {"poisson.mc_paths", "2000"},
      {"poisson.cloud_paths", "8192"},
      {"poisson.batches", "16"},
      {"poisson.h", "0.02"},
      {"poisson.adaptive_max", "64"},
      {"poisson.tail_tolerance", "0.001"},
      {"poisson.t_short", "0.5"},
      {"poisson.dynkin_T", "8"},
      {"poisson.outer_points", "32"},
      {"poisson.dynkin_z_max", "3"},
      {"poisson.upsilon_cells", "32"},
      {"poisson.upsilon_T", "8"},
      {"lemma.moment_eps", "0.25,0.0625,0.015625,0.00390625"},
      {"lemma.moment_particles", "4096"},
      {"lemma.moment_spread_max", "1.5"},
      {"lemma.contraction_T", "4"},
      {"lemma.contraction_particles", "2048"},
      {"lemma.contraction_threshold", "0"},
      {"lemma.decay_T", "6"},
      {"lemma.decay_particles", "4096"},
      {"lemma.aux_eps", "0.0625,0.00390625"},
      {"lemma.aux_particles", "512"},
      {"lemma.aux_record_dt", "0.0078125"},
      {"lemma.time_change_eps", "0.0625"},
      {"lemma.time_change_times", "0.0625,0.125,0.25"},
      {"lemma.time_change_particles", "4096"},
      {"lemma.bootstrap", "200"},
  };
  if (sub == "invariant-measure") d["invariant.collect"] = "20";
  if (sub == "clt") {
    d["grid.h"] = "0.00078125";
    d["grid.record_dt"] = "0.0078125";
    d["run.n_particles"] = "4096";
  }
  if (sub == "poisson") {
    d["invariant.h"] = "0.02";
    d["invariant.collect"] = "200";
    d["invariant.n_particles"] = "8192";
  }
  if (sub == "lemma-checks") {
    d["grid.h"] = "0.00078125";
    d["grid.record_dt"] = "0.015625";
  }
  return d;
}

inline Config load_config(const std::string& sub, const std::string& path, const std::vector<std::string>& overrides) {
  Config c(default_values(sub));
  if (!path.empty()) c.merge_file(path);
  for (const auto& o : overrides) c.set(o);
  return c;
}

inline ExampleParams example_params(const Config& c) {
  if (c.flag("model.reference_constants"))
    return ExampleParams::with_reference_constants(c.number("scale.p"), c.number("model.a"), c.number("model.b"),
                                                   c.number("model.q"));
  return ExampleParams{c.number("model.a"), c.number("model.b"), c.number("model.q"),
                       c.number("model.k"), c.number("model.m"), c.number("scale.p")};
}

inline ModelSpec model_from(const Config& c) {
  if (c.text("model.name") != "example")
    throw ConfigurationError("unknown model '" + c.text("model.name") + "'; available: example", "model.name");
  return build_example_model(example_params(c));
}

inline ScaleParams scale_from(const Config& c) {
  ScaleParams s;
  s.eps = c.number("scale.eps");
  s.T = c.number("scale.T");
  s.p = c.number("scale.p");
  s.y0 = c.list("scale.y0");
  s.law_rho = gaussian_sampler(c.number("scale.rho_mean"), c.number("scale.rho_sd"));
  s.law_xi = gaussian_sampler(c.number("scale.xi_mean"), c.number("scale.xi_sd"));
  return s;
}

inline GridSpec grid_from(const Config& c) {
  return GridSpec{c.number("grid.h"), c.number("grid.rho_fast"), c.number("grid.record_dt"), c.count("grid.noise_steps")};
}

inline InvariantConfig invariant_from(const Config& c) {
  InvariantConfig i;
  i.burn_in = c.number("invariant.burn_in");
  i.collect = c.number("invariant.collect");
  i.n_particles = c.count("invariant.n_particles");
  i.grid = GridSpec{c.number("invariant.h"), c.number("grid.rho_fast"), c.number("invariant.record_dt"), 0};
  return i;
}

inline AveragingOptions averaging_from(const Config& c) {
  return AveragingOptions{c.count("averaging.value_atoms"), c.count("averaging.derivative_atoms")};
}

// Writes files under the output directory only.
class OutputDir {
 public:
  OutputDir(std::filesystem::path dir, std::string hash, std::uint64_t seed)
      : dir_(std::move(dir)), hash_(std::move(hash)), seed_(seed) {
    std::filesystem::create_directories(dir_);
  }

  static std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  void csv(const std::string& name, const std::vector<std::string>& columns,
           const std::vector<std::vector<double>>& rows) const {
    std::ofstream f(path(name));
    f << "# config_hash=" << hash_ << " seed=" << seed_ << "\n";
    for (std::size_t c = 0; c < columns.size(); ++c) f << (c ? "," : "") << columns[c];
    f << "\n";
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < r.size(); ++c) f << (c ? "," : "") << num(r[c]);
      f << "\n";
    }
  }

  void dat(const std::string& name, const std::string& xlabel, const std::string& ylabel, const std::vector<double>& x,
           const std::vector<double>& y) const {
    std::ofstream f(path(name));
    f << "# config_hash=" << hash_ << " seed=" << seed_ << "\n# " << xlabel << " " << ylabel << "\n";
    for (std::size_t i = 0; i < x.size(); ++i) f << num(x[i]) << " " << num(y[i]) << "\n";
  }

  void text(const std::string& name, const std::string& body) const {
    std::ofstream f(path(name));
    f << body;
  }

 private:
  std::filesystem::path path(const std::string& name) const {
    if (name.find('/') != std::string::npos || name.find("..") != std::string::npos)
      throw ConfigurationError("output name escapes the output directory: " + name);
    return dir_ / name;
  }

  std::filesystem::path dir_;
  std::string hash_;
  std::uint64_t seed_;
};

struct Outcome {
  json results = json::object();
  json thresholds = json::array();
  json anchors = json::object();
  std::vector<std::string> warnings;

  void threshold(const std::string& name, double value, const std::string& rule, double bound, bool passed) {
    thresholds.push_back({{"name", name}, {"value", value}, {"rule", rule}, {"bound", bound}, {"passed", passed}});
  }
  bool passed() const {
    for (const auto& t : thresholds)
      if (!t["passed"].get<bool>()) return false;
    return true;
  }
};

inline json error_json(const std::exception& e) {
  json j = {{"message", e.what()}, {"kind", "internal"}};
  if (const auto* m = dynamic_cast<const Error*>(&e)) j["kind"] = m->kind();
  if (const auto* c = dynamic_cast<const ConfigurationError*>(&e)) {
    j["key"] = c->key();
    j["line"] = c->line();
  }
  if (const auto* b = dynamic_cast<const BlowUpError*>(&e)) {
    j["step"] = b->step();
    j["particle"] = b->particle();
    j["process"] = b->label();
  }
  if (const auto* v = dynamic_cast<const EvaluationError*>(&e)) j["index"] = v->index();
  if (const auto* m = dynamic_cast<const ModelError*>(&e)) j["inputs"] = m->inputs();
  if (const auto* k = dynamic_cast<const ConditioningError*>(&e)) j["clipped_fraction"] = k->clipped_fraction();
  return j;
}

inline json rate_json(const RateReport& r) {
  return {{"eps_grid", r.eps_grid},
          {"errors", r.errors},
          {"ci_lo", r.ci_lo},
          {"ci_hi", r.ci_hi},
          {"replica_moments", r.replica_moments},
          {"p", r.p},
          {"slope", r.slope},
          {"slope_ci", {r.slope_lo, r.slope_hi}},
          {"intercept", r.intercept},
          {"r2", r.r2},
          {"n_particles", r.n_particles},
          {"n_replicas", r.n_replicas},
          {"noise_steps", r.noise_steps},
          {"coupled_steps", r.coupled_steps},
          {"averaged_step", r.averaged_step},
          {"replica_seeds", r.replica_seeds},
          {"invariant_seed", r.invariant_seed},
          {"eta_size", r.eta_size},
          {"degenerate", r.degenerate},
          {"complete", r.complete},
          {"abort_reason", r.abort_reason}};
}

inline void run_audit(const Config& c, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const AuditReport a = audit_assumptions(model, c.number("scale.p"), c.count("audit.probes"), c.number("audit.box"),
                                          derive_seed(c.u64("run.seed"), seed_tag::probe));
  o.anchors = {{"lip_b1s1_hat", "joint Lipschitz constant of the slow coefficients"},
               {"lip_b2s2_hat", "joint Lipschitz constant of the fast coefficients"},
               {"margin", "dissipativity margin beta1 - beta2 - 6p L"}};
  o.results = {{"lip_b1s1_hat", a.lip_b1s1_hat}, {"lip_b2s2_hat", a.lip_b2s2_hat}, {"beta1_hat", a.beta1_hat},
               {"beta2_hat", a.beta2_hat},       {"kappa_hat", a.kappa_hat},       {"margin", a.margin},
               {"alpha1", a.alpha1},             {"alpha2", a.alpha2},             {"p", a.p},
               {"margin_positive", a.margin_positive}, {"sampled_estimate", a.sampled_estimate},
               {"sample_count", a.sample_count}};
  if (!a.margin_positive) o.warnings.push_back("sampled dissipativity margin is not positive");
  if (c.flag("audit.require_margin")) o.threshold("margin", a.margin, ">", 0.0, a.margin_positive);
  out.csv("audit.csv", {"lip_b1s1_hat", "lip_b2s2_hat", "beta1_hat", "beta2_hat", "kappa_hat", "margin", "alpha1", "alpha2"},
          {{a.lip_b1s1_hat, a.lip_b2s2_hat, a.beta1_hat, a.beta2_hat, a.kappa_hat, a.margin, a.alpha1, a.alpha2}});
}

inline void run_invariant(const Config& c, const RunContext& ctx, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const EmpiricalMeasure eta = estimate_eta(model, invariant_from(c), c.number("grid.rho_fast"), c.u64("run.seed"), ctx);
  const std::size_t m = eta.dim();
  std::vector<double> mean(m, 0.0), var(m, 0.0);
  for (std::size_t d = 0; d < m; ++d) {
    std::vector<double> col(eta.size());
    for (std::size_t i = 0; i < eta.size(); ++i) col[i] = eta.point(i)[d];
    mean[d] = stats::mean(col);
    var[d] = stats::variance(col);
  }
  o.anchors = {{"mean", "stationary mean of the frozen fast process"},
               {"variance", "stationary variance of the frozen fast process"}};
  o.results = {{"samples", eta.size()}, {"mean", mean}, {"variance", var}};
  if (model.name == "example") {
    const ExampleParams P = example_params(c);
    const double target = 1.0 / (2.0 * P.k);
    o.results["reference_variance"] = target;
    o.threshold("mean", std::abs(mean[0]), "<=", c.number("invariant.mean_tol"),
                std::abs(mean[0]) <= c.number("invariant.mean_tol"));
    o.threshold("variance_error", std::abs(var[0] - target), "<=", c.number("invariant.var_tol"),
                std::abs(var[0] - target) <= c.number("invariant.var_tol"));
  }
  if (m == 1) {
    const double sd = std::sqrt(var[0]);
    const std::size_t bins = 60;
    const double lo = mean[0] - 5.0 * sd, width = 10.0 * sd / static_cast<double>(bins);
    std::vector<double> centers(bins), density(bins, 0.0);
    for (std::size_t b = 0; b < bins; ++b) centers[b] = lo + (static_cast<double>(b) + 0.5) * width;
    for (std::size_t i = 0; i < eta.size(); ++i) {
      const double pos = (eta.point(i)[0] - lo) / width;
      if (pos >= 0.0 && pos < static_cast<double>(bins)) density[static_cast<std::size_t>(pos)] += eta.weight(i) / width;
    }
    std::vector<std::vector<double>> rows;
    for (std::size_t b = 0; b < bins; ++b) rows.push_back({centers[b], density[b]});
    out.csv("histogram.csv", {"bin_center", "density"}, rows);
    out.dat("histogram.dat", "y", "density", centers, density);
  }
}

inline void run_simulate(const Config& c, const RunContext& ctx, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const ScaleParams scale = scale_from(c);
  const GridSpec grid = grid_from(c);
  const std::size_t N = c.count("run.n_particles");
  const std::uint64_t seed = c.u64("run.seed");
  const std::string process = c.text("simulate.process");
  PathBundle b;
  std::vector<std::string> labels;
  if (process == "coupled") {
    b = simulate_coupled(model, scale, grid, N, seed, ctx);
    labels = {kXEps, kYEpsXi};
  } else if (process == "frozen") {
    b = simulate_frozen(model, scale.law_xi, scale.y0, c.number("simulate.frozen_T"), grid, N, seed, ctx);
    labels = {kYEpsXi, kYEpsY0};
  } else if (process == "averaged") {
    const EmpiricalMeasure eta = estimate_eta(model, invariant_from(c), grid.rho_fast, seed, ctx);
    const AveragedDrift bbar = build_averaged_drift(model, eta, averaging_from(c));
    b = simulate_averaged(model, bbar.as_function(), scale, grid, N, seed, nullptr, ctx);
    labels = {kXBar};
  } else {
    throw ConfigurationError("simulate.process must be coupled, frozen or averaged", "simulate.process");
  }
  o.warnings.insert(o.warnings.end(), b.warnings.begin(), b.warnings.end());
  o.anchors = {{"paths", "Euler-Maruyama particle approximation"}};
  std::vector<std::string> cols = {"time"};
  for (const auto& l : labels) {
    cols.push_back(l + "_mean");
    cols.push_back(l + "_var");
  }
  std::vector<std::vector<double>> rows;
  for (std::size_t f = 0; f < b.times.size(); ++f) {
    std::vector<double> row = {b.times[f]};
    for (const auto& l : labels) {
      const auto fr = b.get(l).frame(f);
      std::vector<double> first(N);
      const std::size_t dim = b.get(l).dim;
      for (std::size_t i = 0; i < N; ++i) first[i] = fr[i * dim];
      row.push_back(stats::mean(first));
      row.push_back(stats::variance(first));
    }
    rows.push_back(row);
  }
  out.csv("trajectories.csv", cols, rows);
  const std::size_t k = std::min(N, c.count("simulate.sample_paths"));
  std::vector<std::string> pcols = {"time"};
  for (std::size_t i = 0; i < k; ++i) pcols.push_back(labels[0] + "_" + std::to_string(i));
  std::vector<std::vector<double>> prow;
  std::vector<double> mean_curve;
  for (std::size_t f = 0; f < b.times.size(); ++f) {
    std::vector<double> row = {b.times[f]};
    for (std::size_t i = 0; i < k; ++i) row.push_back(b.get(labels[0]).at(i, f, 0));
    prow.push_back(row);
    mean_curve.push_back(rows[f][1]);
  }
  out.csv("sample_paths.csv", pcols, prow);
  out.dat("mean.dat", "time", labels[0] + "_mean", b.times, mean_curve);
  o.results = {{"process", process}, {"frames", b.times.size()}, {"n_particles", N},
               {"step", b.ledger.step}, {"noise_steps", b.ledger.noise_steps},
               {"final_mean", rows.back()[1]}, {"final_var", rows.back()[2]}};
}

inline RateConfig rate_config_from(const Config& c) {
  RateConfig r;
  r.scale = scale_from(c);
  r.eps_grid = c.list("rate.eps_grid");
  r.n_particles = c.count("run.n_particles");
  r.n_replicas = c.count("rate.n_replicas");
  r.seed = c.u64("run.seed");
  r.grid = grid_from(c);
  r.averaged_h = c.number("rate.averaged_h");
  r.invariant = invariant_from(c);
  r.averaging = averaging_from(c);
  r.bootstrap = c.count("rate.bootstrap");
  return r;
}

inline void write_rate(const RateReport& r, const OutputDir& out) {
  std::vector<std::vector<double>> rows, reps;
  std::vector<double> le, lr;
  for (std::size_t e = 0; e < r.errors.size(); ++e) {
    rows.push_back({r.eps_grid[e], r.errors[e], r.ci_lo[e], r.ci_hi[e], r.coupled_steps[e]});
    le.push_back(std::log(r.eps_grid[e]));
    lr.push_back(std::log(r.errors[e]));
  }
  for (std::size_t e = 0; e < r.replica_moments.size(); ++e)
    for (std::size_t k = 0; k < r.replica_moments[e].size(); ++k)
      reps.push_back({r.eps_grid[e], static_cast<double>(k), r.replica_moments[e][k]});
  out.csv("rate.csv", {"eps", "error", "ci_lo", "ci_hi", "coupled_step"}, rows);
  out.csv("replicas.csv", {"eps", "replica", "mean_sup_power"}, reps);
  if (!le.empty()) out.dat("rate.dat", "log_eps", "log_error", le, lr);
}

inline void run_rate(const Config& c, const RunContext& ctx, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const RateConfig cfg = rate_config_from(c);
  o.anchors = {{"slope", "strong averaging error of order eps^{1/2}"}, {"errors", "E sup_t |X_eps - X_bar|^p"}};
  RateReport r;
  try {
    r = run_averaging_rate(model, cfg, ctx);
  } catch (const SweepAborted<RateReport>& a) {
    o.results = rate_json(a.partial());
    throw;
  }
  o.results = rate_json(r);
  o.warnings.insert(o.warnings.end(), r.warnings.begin(), r.warnings.end());
  write_rate(r, out);
  const double lo = c.number("rate.slope_min"), hi = c.number("rate.slope_max");
  o.threshold("slope_min", r.slope, ">=", lo, r.slope >= lo);
  o.threshold("slope_max", r.slope, "<=", hi, r.slope <= hi);
  o.threshold("r2", r.r2, ">=", c.number("rate.r2_min"), r.r2 >= c.number("rate.r2_min"));
}

inline CltConfig clt_config_from(const Config& c) {
  CltConfig k;
  k.scale = scale_from(c);
  k.eps_grid = c.list("clt.eps_grid");
  k.n_particles = c.count("run.n_particles");
  k.seed = c.u64("run.seed");
  k.grid = grid_from(c);
  k.averaged_h = c.number("clt.averaged_h");
  k.invariant = invariant_from(c);
  k.averaging = averaging_from(c);
  k.upsilon.cells = c.count("clt.upsilon_cells");
  k.upsilon.poisson.mc_paths = c.count("clt.upsilon_mc_paths");
  k.upsilon.poisson.T_trunc = c.number("clt.upsilon_T");
  k.upsilon.poisson.cloud_paths = c.count("poisson.cloud_paths");
  k.upsilon.poisson.batches = c.count("poisson.batches");
  k.upsilon.poisson.grid = GridSpec{c.number("poisson.h"), c.number("grid.rho_fast"), 0.0, 0};
  k.upsilon_x = c.list("clt.upsilon_x");
  k.limit.interaction_samples = c.count("clt.interaction_samples");
  k.bootstrap = c.count("clt.bootstrap");
  return k;
}

inline void run_clt_cmd(const Config& c, const RunContext& ctx, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const CltConfig cfg = clt_config_from(c);
  const CltReport r = run_clt(model, cfg, ctx);
  o.anchors = {{"ks", "weak convergence of (X_eps - X_bar)/sqrt(eps) to the limit U"},
               {"var_ratio", "variance of U_eps against the limit U at the terminal time"}};
  o.results = {{"eps_grid", r.eps_grid},         {"ks", r.ks},
               {"ks_ci_lo", r.ks_lo},            {"ks_ci_hi", r.ks_hi},
               {"var_eps", r.var_eps},           {"mean_eps", r.mean_eps},
               {"var_ratio", r.var_ratio},       {"var_limit", r.var_limit},
               {"mean_limit", r.mean_limit},     {"n_eps_samples", r.n_eps_samples},
               {"n_limit_samples", r.n_limit_samples}, {"upsilon", r.upsilon},
               {"upsilon_clipped_fraction", r.upsilon_clipped_fraction},
               {"inversions", r.inversions},     {"ks_monotone", r.ks_monotone},
               {"degenerate_limit", r.degenerate_limit}, {"moment_order", r.moment_order},
               {"coupled_seed", r.coupled_seed}, {"limit_seed", r.limit_seed},
               {"upsilon_seed", r.upsilon_seed}};
  o.warnings.insert(o.warnings.end(), r.warnings.begin(), r.warnings.end());
  std::vector<std::vector<double>> rows;
  for (std::size_t e = 0; e < r.ks.size(); ++e)
    rows.push_back({r.eps_grid[e], r.ks[e], r.ks_lo[e], r.ks_hi[e], r.mean_eps[e], r.var_eps[e], r.var_ratio[e]});
  out.csv("clt.csv", {"eps", "ks", "ks_ci_lo", "ks_ci_hi", "mean", "variance", "var_ratio"}, rows);
  std::vector<std::string> cols = {"particle", "U_limit"};
  for (double e : r.eps_grid) cols.push_back("U_eps_" + OutputDir::num(e));
  std::vector<std::vector<double>> samples;
  for (std::size_t i = 0; i < r.terminal_limit.size(); ++i) {
    std::vector<double> row = {static_cast<double>(i), r.terminal_limit[i]};
    for (const auto& u : r.terminal_eps) row.push_back(u[i]);
    samples.push_back(row);
  }
  out.csv("terminal_samples.csv", cols, samples);
  auto ecdf = [&](const std::string& name, std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::vector<double> p(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = static_cast<double>(i + 1) / static_cast<double>(v.size());
    out.dat(name, "u", "ecdf", v, p);
  };
  ecdf("ecdf_limit.dat", r.terminal_limit);
  ecdf("ecdf_eps_min.dat", r.terminal_eps.back());
  const double ks = r.ks.back(), vr = r.var_ratio.back();
  o.threshold("ks_smallest_eps", ks, "<", c.number("clt.ks_max"), ks < c.number("clt.ks_max"));
  o.threshold("var_ratio_min", vr, ">=", c.number("clt.var_ratio_min"), vr >= c.number("clt.var_ratio_min"));
  o.threshold("var_ratio_max", vr, "<=", c.number("clt.var_ratio_max"), vr <= c.number("clt.var_ratio_max"));
  o.threshold("ks_inversions", static_cast<double>(r.inversions), "<=", 1.0, r.ks_monotone);
}

inline void run_poisson_cmd(const Config& c, const RunContext& ctx, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const std::uint64_t seed = c.u64("run.seed");
  const EmpiricalMeasure eta = estimate_eta(model, invariant_from(c), c.number("grid.rho_fast"), seed, ctx);
  const AveragedDrift bbar = build_averaged_drift(model, eta, averaging_from(c));
  const std::vector<double> x = c.list("poisson.x"), y = c.list("poisson.y");
  const EmpiricalMeasure mu = EmpiricalMeasure::dirac(x);
  PoissonOptions po;
  po.T_trunc = c.number("poisson.T_trunc");
  po.mc_paths = c.count("poisson.mc_paths");
  po.cloud_paths = c.count("poisson.cloud_paths");
  po.batches = c.count("poisson.batches");
  po.grid = GridSpec{c.number("poisson.h"), c.number("grid.rho_fast"), 0.0, 0};
  po.adaptive_max = c.number("poisson.adaptive_max");
  po.tail_tolerance = c.number("poisson.tail_tolerance");
  const PoissonCell psi = psi_estimate(model, bbar.as_function(), x, mu, y, eta, po, derive_seed(seed, 1), ctx);
  const PoissonCell dy = dy_psi_sigma2_estimate(model, x, mu, y, eta, po, derive_seed(seed, 2), ctx);
  PoissonOptions pq = po;
  pq.T_trunc = c.number("poisson.dynkin_T");
  const PsiQuery query = [&](ConstVec yq, const EmpiricalMeasure& nu, std::size_t k) {
    return psi_estimate(model, bbar.as_function(), x, mu, yq, nu, pq, derive_seed(seed, 100 + k), ctx);
  };
  DynkinOptions dopt;
  dopt.mc_paths = po.mc_paths;
  dopt.cloud_paths = po.cloud_paths;
  dopt.batches = po.batches;
  dopt.outer_points = c.count("poisson.outer_points");
  dopt.grid = po.grid;
  const DynkinResult dk = dynkin_residual(model, bbar.as_function(), query, x, mu, y, eta, c.number("poisson.t_short"),
                                          dopt, derive_seed(seed, 3), ctx);
  UpsilonBudget ub;
  ub.cells = c.count("poisson.upsilon_cells");
  ub.poisson = po;
  ub.poisson.T_trunc = c.number("poisson.upsilon_T");
  const UpsilonEstimate ups = upsilon_estimate(model, eta, x, mu, ub, derive_seed(seed, seed_tag::upsilon), ctx);
  for (const auto* cell : {&psi, &dy}) o.warnings.insert(o.warnings.end(), cell->warnings.begin(), cell->warnings.end());
  o.warnings.insert(o.warnings.end(), ups.warnings.begin(), ups.warnings.end());
  o.anchors = {{"psi", "corrector solving the Poisson equation of the frozen generator"},
               {"dy_psi_sigma2", "derivative of the corrector along sigma2"},
               {"dynkin", "integrated form of the Poisson equation"},
               {"upsilon", "square root of the averaged outer product of dy_psi_sigma2"}};
  o.results = {{"psi", psi.psi_hat},
               {"psi_se", psi.psi_se},
               {"psi_T_trunc", psi.T_trunc},
               {"psi_decay_rate", psi.decay_rate},
               {"psi_tail_bound", psi.tail_bound},
               {"dy_psi_sigma2", dy.dy_psi_sigma2_hat},
               {"dy_psi_sigma2_se", dy.dy_psi_sigma2_se},
               {"dy_T_trunc", dy.T_trunc},
               {"dynkin_residual", dk.residual},
               {"dynkin_combined_se", dk.combined_se},
               {"dynkin_lhs", dk.lhs},
               {"dynkin_rhs", dk.rhs},
               {"upsilon", ups.matrix},
               {"upsilon_raw", ups.raw_second_moment},
               {"upsilon_eigenvalues", ups.eigenvalues},
               {"upsilon_clipped_fraction", ups.clipped_fraction},
               {"upsilon_tolerance", ups.tolerance},
               {"mc_paths", po.mc_paths}};
  std::vector<std::vector<double>> rows = {
      {0.0, psi.psi_hat[0], psi.psi_se[0]},
      {1.0, dy.dy_psi_sigma2_hat[0], dy.dy_psi_sigma2_se[0]},
      {2.0, dk.residual, dk.combined_se},
      {3.0, ups.raw_second_moment[0], 0.0}};
  out.csv("poisson.csv", {"quantity_id", "value", "se"}, rows);
  std::vector<std::vector<double>> cells;
  std::vector<double> cy, cv;
  const std::size_t m = model.dims.m, w = model.dims.n * model.dims.d2;
  for (std::size_t j = 0; j < ups.cell_weights.size(); ++j) {
    cells.push_back({ups.cell_y[j * m], ups.cell_weights[j], ups.cell_values[j * w], ups.cell_se[j * w]});
    cy.push_back(ups.cell_y[j * m]);
    cv.push_back(ups.cell_values[j * w]);
  }
  out.csv("upsilon_cells.csv", {"y", "weight", "dy_psi_sigma2", "se"}, cells);
  out.dat("dy_psi_sigma2.dat", "y", "dy_psi_sigma2", cy, cv);
  const double z = c.number("poisson.dynkin_z_max");
  o.threshold("dynkin_residual", dk.residual, "<=", z * dk.combined_se, dk.residual <= z * dk.combined_se);
  double sq_err = 0.0;
  const std::size_t n = ups.n;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ups.matrix[a * n + k] * ups.matrix[k * n + b];
      sq_err += std::pow(s - ups.raw_second_moment[a * n + b], 2);
    }
  o.threshold("upsilon_square", std::sqrt(sq_err), "<=", ups.tolerance, std::sqrt(sq_err) <= ups.tolerance);
}

inline LemmaConfig lemma_config_from(const Config& c, const ModelSpec& model) {
  LemmaConfig l;
  l.scale = scale_from(c);
  l.seed = c.u64("run.seed");
  l.grid = grid_from(c);
  l.invariant = invariant_from(c);
  l.averaging = averaging_from(c);
  l.bootstrap = c.count("lemma.bootstrap");
  l.moment_eps = c.list("lemma.moment_eps");
  l.moment_particles = c.count("lemma.moment_particles");
  l.moment_spread_max = c.number("lemma.moment_spread_max");
  l.contraction_T = c.number("lemma.contraction_T");
  l.contraction_particles = c.count("lemma.contraction_particles");
  l.contraction_threshold = c.number("lemma.contraction_threshold");
  if (l.contraction_threshold == 0.0) {
    if (model.name != "example")
      throw ConfigurationError("lemma.contraction_threshold must be set for this model", "lemma.contraction_threshold");
    const ExampleParams P = example_params(c);
    l.contraction_threshold = 0.9 * 2.0 * (P.k - P.m);
  }
  l.decay_T = c.number("lemma.decay_T");
  l.decay_particles = c.count("lemma.decay_particles");
  l.aux_eps = c.list("lemma.aux_eps");
  l.aux_particles = c.count("lemma.aux_particles");
  l.aux_record_dt = c.number("lemma.aux_record_dt");
  l.time_change_eps = c.number("lemma.time_change_eps");
  l.time_change_times = c.list("lemma.time_change_times");
  l.time_change_particles = c.count("lemma.time_change_particles");
  return l;
}

inline void run_lemma_cmd(const Config& c, const RunContext& ctx, const OutputDir& out, Outcome& o) {
  const ModelSpec model = model_from(c);
  const PropertyReport r = run_lemma_checks(model, lemma_config_from(c, model), ctx);
  std::vector<std::vector<double>> rows;
  json checks = json::array();
  for (std::size_t i = 0; i < r.checks.size(); ++i) {
    const auto& k = r.checks[i];
    checks.push_back({{"name", k.name}, {"anchor", k.claim}, {"comparison", k.comparison}, {"value", k.value},
                      {"threshold", k.threshold}, {"passed", k.passed}, {"details", k.details}});
    o.anchors[k.name] = k.claim;
    rows.push_back({static_cast<double>(i), k.value, k.threshold, k.passed ? 1.0 : 0.0});
    o.threshold(k.name, k.value, k.comparison, k.threshold, k.passed);
  }
  o.results = {{"checks", checks}};
  o.warnings.insert(o.warnings.end(), r.warnings.begin(), r.warnings.end());
  out.csv("lemma_checks.csv", {"check_id", "value", "threshold", "passed"}, rows);
}

struct Invocation {
  std::string subcommand;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string seed;
  unsigned threads = 1;
  std::string out_dir = "out";
  bool strict = false;
};

// Runs one parsed invocation; returns 0 when every threshold passes, 1 when
// some threshold fails and 2 on an error.
inline int execute(const Invocation& inv, std::ostream& log = std::cerr) {
  Config cfg;
  json report = {{"subcommand", inv.subcommand}};
  std::unique_ptr<OutputDir> out;
  Outcome o;
  int status = 0;
  try {
    cfg = load_config(inv.subcommand, inv.config_path, inv.overrides);
    if (!inv.seed.empty()) cfg.set("run.seed", inv.seed);
    if (inv.strict) cfg.set("run.strict", "true");
    cfg.u64("run.seed");
    const RunContext ctx{std::max(1u, inv.threads), cfg.flag("run.strict")};
    out = std::make_unique<OutputDir>(inv.out_dir, cfg.hash_hex(), cfg.u64("run.seed"));
    out->text("config.resolved", cfg.emit());
    const std::string& s = inv.subcommand;
    if (s == "audit") run_audit(cfg, *out, o);
    else if (s == "invariant-measure") run_invariant(cfg, ctx, *out, o);
    else if (s == "simulate") run_simulate(cfg, ctx, *out, o);
    else if (s == "avg-rate") run_rate(cfg, ctx, *out, o);
    else if (s == "clt") run_clt_cmd(cfg, ctx, *out, o);
    else if (s == "poisson") run_poisson_cmd(cfg, ctx, *out, o);
    else if (s == "lemma-checks") run_lemma_cmd(cfg, ctx, *out, o);
    else throw ConfigurationError("unknown subcommand '" + s + "'");
    status = o.passed() ? 0 : 1;
    report["error"] = nullptr;
  } catch (const std::exception& e) {
    report["error"] = error_json(e);
    log << "error: " << e.what() << "\n";
    status = 2;
  }
  report["config_hash"] = cfg.hash_hex();
  report["config"] = cfg.values();
  report["config_text"] = cfg.emit();
  report["anchors"] = o.anchors;
  report["results"] = o.results;
  report["thresholds"] = o.thresholds;
  report["warnings"] = o.warnings;
  report["passed"] = status == 0;
  if (!out) {
    std::filesystem::create_directories(inv.out_dir);
    out = std::make_unique<OutputDir>(inv.out_dir, cfg.hash_hex(), 0);
  }
  out->text("report.json", report.dump(2) + "\n");
  for (const auto& t : o.thresholds)
    log << (t["passed"].get<bool>() ? "PASS " : "FAIL ") << t["name"].get<std::string>() << " = "
        << OutputDir::num(t["value"].get<double>()) << " " << t["rule"].get<std::string>() << " "
        << OutputDir::num(t["bound"].get<double>()) << "\n";
  return status;
}

inline int run_cli(int argc, char** argv) {
  CLI::App app{"Slow-fast McKean-Vlasov particle experiments"};
  app.require_subcommand(1);
  Invocation inv;
  for (const auto& name : subcommands()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", inv.config_path, "key = value config file");
    sub->add_option("--set", inv.overrides, "inline override key=value (repeatable)");
    sub->add_option("--seed", inv.seed, "master seed");
    sub->add_option("--threads", inv.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", inv.out_dir, "output directory");
    sub->add_flag("--strict", inv.strict, "escalate warnings to errors");
    sub->callback([&inv, name] { inv.subcommand = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  return execute(inv);
}

}  // namespace msmv::cli
