#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "msmv/errors.hpp"
#include "msmv/measure.hpp"
#include "msmv/rng.hpp"

namespace msmv {

// Fills one draw of an initial condition.
using Sampler = std::function<void(DrawStream&, OutVec)>;

inline Sampler gaussian_sampler(std::vector<double> mean, double sd) {
  return [mean = std::move(mean), sd](DrawStream& s, OutVec out) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (mean.size() == 1 ? mean[0] : mean[c]) + sd * s.normal();
  };
}

inline Sampler gaussian_sampler(double mean = 0.0, double sd = 1.0) { return gaussian_sampler(std::vector<double>{mean}, sd); }

inline Sampler point_mass_sampler(std::vector<double> point) {
  return [point = std::move(point)](DrawStream&, OutVec out) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = point.size() == 1 ? point[0] : point[c];
  };
}

// Draws atoms of an empirical law according to its weights.
inline Sampler resampling_sampler(const EmpiricalMeasure& law) {
  std::vector<double> cdf(law.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < law.size(); ++i) cdf[i] = (acc += law.weight(i));
  return [samples = law.samples(), cdf = std::move(cdf), dim = law.dim()](DrawStream& s, OutVec out) {
    const double u = s.uniform() * cdf.back();
    std::size_t i = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    i = std::min(i, cdf.size() - 1);
    std::copy_n(samples.begin() + static_cast<std::ptrdiff_t>(i * dim), dim, out.begin());
  };
}

struct ScaleParams {
  double eps = 1.0;
  double T = 1.0;
  double p = 2.0;
  std::vector<double> y0 = {0.5};
  Sampler law_rho = gaussian_sampler(0.0, 1.0);
  Sampler law_xi = gaussian_sampler(0.0, 1.0);

  void validate() const {
    if (!(eps > 0.0 && eps <= 1.0)) throw ConfigurationError("scale.eps must lie in (0, 1]", "scale.eps");
    if (!(T > 0.0)) throw ConfigurationError("scale.T must be positive", "scale.T");
    if (!(p >= 2.0)) throw ConfigurationError("scale.p must be at least 2", "scale.p");
    if (!law_rho || !law_xi) throw ConfigurationError("scale needs samplers for the initial laws");
  }
};

struct GridSpec {
  double h = 1.0 / 640.0;     // base step; the coupled step is min(h, eps / rho_fast)
  double rho_fast = 20.0;
  double record_dt = 0.0;     // spacing of recorded frames; 0 records every step
  std::size_t noise_steps = 0;  // base Brownian grid over [0, T]; 0 uses the run's own step count
};

// Resolved time discretization of one run.
struct StepPlan {
  double T = 0.0;
  double step = 0.0;
  std::size_t n_steps = 0;
  std::size_t stride = 1;
  std::size_t noise_steps = 0;
  std::size_t noise_per_step = 1;
  double noise_dt = 0.0;

  std::size_t frames() const { return n_steps / stride + 1; }
  double time_of_frame(std::size_t f) const { return static_cast<double>(f * stride) * step; }
};

inline std::size_t exact_count(double total, double dt, const std::string& what) {
  const double r = total / dt;
  const double n = std::round(r);
  if (!(dt > 0.0) || n < 1.0 || std::abs(r - n) > 1e-9 * std::max(1.0, r))
    throw ConfigurationError(what + " must divide the horizon into an integer number of steps");
  return static_cast<std::size_t>(n);
}

inline StepPlan make_plan(double T, double step, double record_dt, std::size_t noise_steps) {
  StepPlan p;
  p.T = T;
  p.n_steps = exact_count(T, step, "time step");
  p.step = T / static_cast<double>(p.n_steps);
  if (record_dt > 0.0) {
    const std::size_t frames = exact_count(T, record_dt, "grid.record_dt");
    if (p.n_steps % frames != 0)
      throw ConfigurationError("grid.record_dt must be a multiple of the time step", "grid.record_dt");
    p.stride = p.n_steps / frames;
  }
  p.noise_steps = noise_steps == 0 ? p.n_steps : noise_steps;
  if (p.noise_steps % p.n_steps != 0)
    throw ConfigurationError("grid.noise_steps must be a multiple of the number of time steps", "grid.noise_steps");
  p.noise_per_step = p.noise_steps / p.n_steps;
  p.noise_dt = T / static_cast<double>(p.noise_steps);
  return p;
}

// Per-particle trajectories, laid out as [particle][frame][dim].
struct Ensemble {
  std::size_t particles = 0;
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> data;

  Ensemble() = default;
  Ensemble(std::size_t p, std::size_t f, std::size_t d) : particles(p), frames(f), dim(d), data(p * f * d, 0.0) {}

  double& at(std::size_t p, std::size_t f, std::size_t d = 0) { return data[(p * frames + f) * dim + d]; }
  double at(std::size_t p, std::size_t f, std::size_t d = 0) const { return data[(p * frames + f) * dim + d]; }

  // Copies frame f of every particle into a flat particle x dim block.
  std::vector<double> frame(std::size_t f) const {
    std::vector<double> out(particles * dim);
    for (std::size_t p = 0; p < particles; ++p)
      for (std::size_t d = 0; d < dim; ++d) out[p * dim + d] = at(p, f, d);
    return out;
  }

  void set_frame(std::size_t f, ConstVec block) {
    for (std::size_t p = 0; p < particles; ++p)
      for (std::size_t d = 0; d < dim; ++d) at(p, f, d) = block[p * dim + d];
  }

  EmpiricalMeasure frame_measure(std::size_t f) const { return EmpiricalMeasure(frame(f), dim); }
};

// Master seed plus the stream layout of a run. Increment k of channel c for
// particle i is the Philox counter (c, i, k) under the master seed.
struct SeedLedger {
  std::uint64_t master_seed = 0;
  std::size_t noise_steps = 0;
  std::size_t n_steps = 0;
  double step = 0.0;
  std::map<std::string, std::uint32_t> channels;
  std::map<std::string, std::vector<std::string>> consumers;  // channel name -> process labels

  // Counter of the first normal consumed by `label` at (particle, step) on its driving channel.
  std::array<std::uint64_t, 3> increment_key(const std::string& label, std::size_t particle, std::size_t step_index,
                                             std::size_t noise_dim = 1) const {
    for (const auto& [channel, labels] : consumers) {
      if (std::find(labels.begin(), labels.end(), label) == labels.end()) continue;
      const std::uint64_t per_step = channel == "B" ? noise_steps / std::max<std::size_t>(n_steps, 1) : 1;
      return {channels.at(channel), particle, step_index * per_step * noise_dim};
    }
    throw ConfigurationError("no noise channel recorded for process '" + label + "'");
  }
};

inline constexpr const char* kXEps = "X_eps";
inline constexpr const char* kYEpsXi = "Y_eps_xi";
inline constexpr const char* kYEpsY0 = "Y_eps_y0";
inline constexpr const char* kXBar = "X_bar";
inline constexpr const char* kUEps = "U_eps";
inline constexpr const char* kThetaEps = "theta_eps";
inline constexpr const char* kULimit = "U_limit";

struct PathBundle {
  std::vector<double> times;
  std::map<std::string, Ensemble> ensembles;
  SeedLedger ledger;
  double eps = 1.0;
  double T = 0.0;
  std::size_t n_particles = 0;
  std::size_t stride = 1;
  std::vector<double> y0;
  std::vector<std::string> warnings;

  bool has(const std::string& label) const { return ensembles.count(label) != 0; }
  const Ensemble& get(const std::string& label) const {
    auto it = ensembles.find(label);
    if (it == ensembles.end()) throw ConfigurationError("path bundle has no process '" + label + "'");
    return it->second;
  }
};

}  // namespace msmv
