#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "msmv/experiments.hpp"

using namespace msmv;

namespace {

// b1 = -x/2 with no fast dependence and no slow noise; all derivatives supplied.
ModelSpec fast_free_linear() {
  ModelSpec s;
  s.name = "fast_free_linear";
  s.b1 = [](ConstVec x, const MeasureView&, ConstVec, const MeasureView&, OutVec o) { o[0] = -0.5 * x[0]; };
  s.sigma1 = [](ConstVec, const MeasureView&, OutVec o) { o[0] = 0.0; };
  s.b2 = [](ConstVec y, const MeasureView&, OutVec o) { o[0] = -y[0]; };
  s.sigma2 = [](ConstVec, const MeasureView&, OutVec o) { o[0] = 1.0; };
  s.derivs.dx_b1 = [](ConstVec, const MeasureView&, ConstVec, const MeasureView&, OutVec o) { o[0] = -0.5; };
  s.derivs.dy_b1 = [](ConstVec, const MeasureView&, ConstVec, const MeasureView&, OutVec o) { o[0] = 0.0; };
  s.derivs.dmu_b1 = [](ConstVec, const MeasureView&, ConstVec, const MeasureView&, ConstVec, OutVec o) { o[0] = 0.0; };
  s.derivs.dx_sigma1 = [](ConstVec, const MeasureView&, ConstVec, OutVec o) { o[0] = 0.0; };
  s.derivs.dmu_sigma1 = [](ConstVec, const MeasureView&, ConstVec, ConstVec, OutVec o) { o[0] = 0.0; };
  s.derivs.dy_b2 = [](ConstVec, const MeasureView&, OutVec o) { o[0] = -1.0; };
  s.derivs.dy_sigma2 = [](ConstVec, const MeasureView&, ConstVec, OutVec o) { o[0] = 0.0; };
  return s;
}

RateConfig small_rate(std::size_t replicas) {
  RateConfig c;
  c.eps_grid = {0x1p-2, 0x1p-3, 0x1p-4, 0x1p-5};
  c.n_particles = 128;
  c.n_replicas = replicas;
  c.grid = {.h = 1.0 / 64.0, .rho_fast = 20.0, .record_dt = 1.0 / 16.0};
  c.averaged_h = 1.0 / 64.0;
  c.invariant.burn_in = 5.0;
  c.invariant.collect = 5.0;
  c.invariant.n_particles = 256;
  c.bootstrap = 100;
  c.seed = 3;
  return c;
}

LemmaConfig small_lemma() {
  LemmaConfig c;
  c.grid = {.h = 1.0 / 320.0, .rho_fast = 20.0, .record_dt = 1.0 / 16.0};
  c.invariant.burn_in = 5.0;
  c.invariant.collect = 5.0;
  c.invariant.n_particles = 256;
  c.bootstrap = 50;
  c.moment_eps = {0x1p-2, 0x1p-4};
  c.moment_particles = 256;
  c.contraction_T = 2.0;
  c.contraction_particles = 256;
  c.decay_T = 3.0;
  c.decay_particles = 512;
  c.aux_eps = {0x1p-2, 0x1p-4};
  c.aux_particles = 32;
  c.aux_record_dt = 1.0 / 16.0;
  c.time_change_particles = 256;
  return c;
}

}  // namespace

TEST(EpsGrid, ValidationRules) {
  EXPECT_NO_THROW(check_eps_grid({0.5, 0.25, 0.125, 0.0625}, 4));
  EXPECT_THROW(check_eps_grid({0.5, 0.25, 0.125}, 4), ConfigurationError);
  EXPECT_THROW(check_eps_grid({0.5, 0.5, 0.25, 0.125}, 4), ConfigurationError);
  EXPECT_THROW(check_eps_grid({0.25, 0.5, 0.125, 0.0625}, 4), ConfigurationError);
  EXPECT_THROW(check_eps_grid({2.0, 0.5, 0.25, 0.125}, 4), ConfigurationError);
  EXPECT_THROW(check_eps_grid({0.5, 0.25, 0.125, 0.0}, 4), ConfigurationError);
}

TEST(EpsGrid, SweepNoiseStepsIsTheFinestNestedCount) {
  const GridSpec g{.h = 1.0 / 64.0, .rho_fast = 20.0};
  // Coupled steps eps/20 give 80, 160, 320 steps; the averaged run needs 64.
  EXPECT_EQ(sweep_noise_steps({0x1p-2, 0x1p-3, 0x1p-4}, 1.0, g, 1.0 / 64.0), 320u);
  EXPECT_THROW(sweep_noise_steps({0x1p-2, 0x1p-3}, 1.0, g, 1.0 / 96.0), ConfigurationError);
}

TEST(Rate, RejectsInvalidSettings) {
  const ModelSpec model = build_example_model({});
  RateConfig c = small_rate(2);
  c.eps_grid = {0.25, 0.125, 0.0625};
  EXPECT_THROW(run_averaging_rate(model, c), ConfigurationError);
  c = small_rate(2);
  c.scale.p = 3.0;
  EXPECT_THROW(run_averaging_rate(model, c), ConfigurationError);
  c = small_rate(1);
  EXPECT_THROW(run_averaging_rate(model, c), ConfigurationError);
}

TEST(Rate, RecoversAnExactPowerLaw) {
  RateReport r;
  r.eps_grid = {0x1p-4, 0x1p-5, 0x1p-6, 0x1p-7, 0x1p-8};
  r.p = 2.0;
  std::vector<std::vector<double>> moments;
  for (double e : r.eps_grid) moments.push_back({3.0 * e, 3.0 * e, 3.0 * e});
  detail::fit_rate(r, moments, 50, 1);
  EXPECT_NEAR(r.slope, 0.5, 1e-12);
  EXPECT_NEAR(r.r2, 1.0, 1e-12);
  EXPECT_NEAR(r.intercept, 0.5 * std::log(3.0), 1e-12);
  for (std::size_t e = 0; e < r.errors.size(); ++e) EXPECT_NEAR(r.errors[e], std::sqrt(3.0 * r.eps_grid[e]), 1e-12);
}

TEST(Rate, SmallSweepIsDeterministicAndWellFormed) {
  const ModelSpec model = build_example_model({});
  const RateConfig c = small_rate(3);
  const RateReport a = run_averaging_rate(model, c);
  const RateReport b = run_averaging_rate(model, c, {.threads = 3});
  EXPECT_EQ(a.errors, b.errors);
  EXPECT_EQ(a.slope, b.slope);
  ASSERT_EQ(a.errors.size(), 4u);
  EXPECT_FALSE(a.degenerate);
  EXPECT_TRUE(a.complete);
  EXPECT_EQ(a.noise_steps, 640u);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_GT(a.errors[e], 0.0);
    EXPECT_LE(a.ci_lo[e], a.errors[e]);
    EXPECT_GE(a.ci_hi[e], a.errors[e]);
    EXPECT_DOUBLE_EQ(a.coupled_steps[e], a.eps_grid[e] / 20.0);
  }
  EXPECT_NE(a.replica_seeds[0], a.replica_seeds[1]);
  EXPECT_LE(a.slope_lo, a.slope);
  EXPECT_GE(a.slope_hi, a.slope);
}

TEST(Rate, FastIndependentDriftIsFlaggedDegenerate) {
  const RateReport r = run_averaging_rate(fast_free_linear(), small_rate(2));
  EXPECT_TRUE(r.degenerate);
  bool warned = false;
  for (const auto& w : r.warnings) warned = warned || w.find("degenerate") != std::string::npos;
  EXPECT_TRUE(warned);
  // X_bar runs on the coupled base grid, so only the Euler step mismatch remains.
  for (double e : r.errors) EXPECT_LT(e, 1e-2);
}

TEST(Rate, DoublingReplicasNarrowsIntervalsByRootTwo) {
  const ModelSpec model = build_example_model({});
  RateConfig c = small_rate(16);
  c.n_particles = 512;
  c.bootstrap = 400;
  const RateReport wide = run_averaging_rate(model, c);
  c.n_replicas = 32;
  const RateReport narrow = run_averaging_rate(model, c);
  double ratio = 0.0;
  for (std::size_t e = 0; e < wide.errors.size(); ++e)
    ratio += (narrow.ci_hi[e] - narrow.ci_lo[e]) / (wide.ci_hi[e] - wide.ci_lo[e]);
  ratio /= static_cast<double>(wide.errors.size());
  // Across seeds the ratio scatters with a standard deviation of about 0.08.
  EXPECT_NEAR(ratio, 1.0 / std::sqrt(2.0), 0.2);
}

TEST(Rate, BlowUpAbortsWithPartialReport) {
  ModelSpec m = fast_free_linear();
  m.b1 = [](ConstVec x, const MeasureView&, ConstVec, const MeasureView&, OutVec o) { o[0] = std::exp(50.0 * (1.0 + x[0] * x[0])); };
  RateConfig c = small_rate(2);
  c.scale.law_rho = point_mass_sampler({1.0});
  try {
    run_averaging_rate(m, c);
    FAIL() << "expected an abort";
  } catch (const SweepAborted<RateReport>& a) {
    EXPECT_FALSE(a.partial().complete);
    EXPECT_FALSE(a.partial().abort_reason.empty());
    EXPECT_EQ(a.label(), kXEps);
  }
}

TEST(Clt, RequiresScalarSlowComponentAndDerivatives) {
  ModelSpec m = fast_free_linear();
  m.dims.n = 2;
  EXPECT_THROW(run_clt(m, CltConfig{}), UnsupportedDimensionError);
  ModelSpec bare = fast_free_linear();
  bare.derivs = {};
  EXPECT_THROW(run_clt(bare, CltConfig{}), CapabilityError);
}

TEST(Clt, FastIndependentDriftWithoutNoiseCollapsesToZero) {
  CltConfig c;
  c.eps_grid = {0x1p-2, 0x1p-3};
  c.n_particles = 64;
  // The coupled step h is below eps/rho_fast, so X_bar and X_eps share every step.
  c.grid = {.h = 1.0 / 320.0, .rho_fast = 20.0, .record_dt = 1.0 / 16.0};
  c.averaged_h = 1.0 / 320.0;
  c.invariant.burn_in = 2.0;
  c.invariant.collect = 2.0;
  c.invariant.n_particles = 128;
  c.upsilon.cells = 2;
  c.upsilon.poisson = {.T_trunc = 1.0, .mc_paths = 32, .cloud_paths = 32};
  c.bootstrap = 20;
  const CltReport r = run_clt(fast_free_linear(), c);
  EXPECT_TRUE(r.degenerate_limit);
  for (double u : r.terminal_limit) EXPECT_EQ(u, 0.0);
  for (const auto& ue : r.terminal_eps)
    for (double u : ue) EXPECT_EQ(u, 0.0);
  EXPECT_EQ(r.upsilon[0], 0.0);
}

TEST(Lemma, RequiresScalarFastComponent) {
  ModelSpec m = fast_free_linear();
  m.dims.m = 2;
  EXPECT_THROW(run_lemma_checks(m, small_lemma()), UnsupportedDimensionError);
}

TEST(Lemma, SuiteNamesEveryCheckAndItsClaim) {
  const PropertyReport r = run_lemma_checks(build_example_model({}), small_lemma());
  const std::vector<std::string> names = {"moment_bound", "frozen_contraction", "averaged_drift_decay",
                                          "auxiliary_shrinkage", "time_change_law"};
  ASSERT_EQ(r.checks.size(), names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    EXPECT_EQ(r.checks[i].name, names[i]);
    EXPECT_FALSE(r.checks[i].claim.empty());
    EXPECT_FALSE(r.checks[i].comparison.empty());
    EXPECT_TRUE(std::isfinite(r.checks[i].value));
  }
  ASSERT_NE(r.find("frozen_contraction"), nullptr);
  // Mean-square contraction of the example runs at 2(k - m) = 1.5.
  EXPECT_NEAR(r.find("frozen_contraction")->value, 1.5, 0.15);
  EXPECT_EQ(r.find("no_such_check"), nullptr);
}

TEST(Lemma, MomentStatisticSupremumConventions) {
  Ensemble e(2, 2, 1);
  e.data = {1.0, 3.0, 2.0, 0.0};  // particle-major: p0 = (1, 3), p1 = (2, 0)
  // E sup: (3^2 + 2^2)/2; sup E: max((1 + 4)/2, (9 + 0)/2).
  EXPECT_DOUBLE_EQ(detail::moment_statistic(e, 2.0, true), 6.5);
  EXPECT_DOUBLE_EQ(detail::moment_statistic(e, 2.0, false), 4.5);
}
