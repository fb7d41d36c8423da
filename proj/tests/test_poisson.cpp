#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "msmv/integrator.hpp"
#include "msmv/model.hpp"
#include "msmv/poisson.hpp"
#include "oracles.hpp"

using namespace msmv;

namespace {

constexpr double kPoissonStep = 0.02;

ExampleParams example_params() { return {.a = 1, .b = 1, .q = 1, .k = 1.0, .m = 0.25}; }

// Invariant law of the frozen chain on the Poisson step, shared by the suite.
const EmpiricalMeasure& eta() {
  static const EmpiricalMeasure e = estimate_invariant_measure(
      build_example_model(example_params()), 20.0, 200.0, {.h = kPoissonStep, .rho_fast = 20, .record_dt = 0.5}, 8192, 17);
  return e;
}

PoissonOptions options(double T = 0.0, std::size_t paths = 2000) {
  PoissonOptions o;
  o.T_trunc = T;
  o.mc_paths = paths;
  o.grid = {.h = kPoissonStep, .rho_fast = 20};
  return o;
}

const std::vector<double> kOrigin{0.0};

}  // namespace

TEST(Psi, VanishesForFastIndependentDrift) {
  ModelSpec s = build_example_model(example_params());
  s.b1 = [](ConstVec x, const MeasureView& mu, ConstVec, const MeasureView&, OutVec o) { o[0] = std::sin(x[0]) + mu.mean(); };
  const auto bbar = build_averaged_drift(s, eta());
  const std::vector<double> x{0.4}, y{1.2};
  const auto cell = psi_estimate(s, bbar.as_function(), x, EmpiricalMeasure({0.1, 0.5}, 1), y, eta(), options(2.0, 256), 3);
  EXPECT_EQ(cell.psi_hat[0], 0.0);
  EXPECT_EQ(cell.psi_se[0], 0.0);
}

TEST(Psi, AtOriginMatchesQuadratureOracle) {
  const auto model = build_example_model(example_params());
  const auto bbar = build_averaged_drift(model, eta());
  const auto cell = psi_estimate(model, bbar.as_function(), kOrigin, EmpiricalMeasure::dirac(0.0), kOrigin, eta(),
                                 options(0.0, 8192), 5);
  const double expected = oracle::Example{}.psi(0.0);
  EXPECT_NEAR(expected, 0.1037890014062163, 1e-10);
  EXPECT_NEAR(cell.psi_hat[0], expected, 3.0 * cell.psi_se[0]);
  EXPECT_GT(cell.decay_rate, 0.0);
  EXPECT_GT(cell.T_trunc, 0.0);
}

TEST(Psi, IsLinearInTheSlowDrift) {
  const auto model = build_example_model(example_params());
  ModelSpec doubled = model;
  doubled.b1 = [f = model.b1](ConstVec x, const MeasureView& mu, ConstVec y, const MeasureView& nu, OutVec o) {
    f(x, mu, y, nu, o);
    o[0] *= 2.0;
  };
  const auto b1 = build_averaged_drift(model, eta());
  const auto b2 = build_averaged_drift(doubled, eta());
  const std::vector<double> y{0.8};
  const auto c1 = psi_estimate(model, b1.as_function(), kOrigin, EmpiricalMeasure::dirac(0.0), y, eta(), options(2.0, 512), 9);
  const auto c2 = psi_estimate(doubled, b2.as_function(), kOrigin, EmpiricalMeasure::dirac(0.0), y, eta(), options(2.0, 512), 9);
  EXPECT_NEAR(c2.psi_hat[0], 2.0 * c1.psi_hat[0], 1e-12);
  EXPECT_NEAR(c2.psi_se[0], 2.0 * c1.psi_se[0], 1e-12);
}

TEST(Psi, TruncationHorizonsAgreeOnceTheTailIsNegligible) {
  const auto model = build_example_model(example_params());
  const auto bbar = build_averaged_drift(model, eta());
  const std::vector<double> y{1.0};
  const auto a = psi_estimate(model, bbar.as_function(), kOrigin, EmpiricalMeasure::dirac(0.0), y, eta(), options(8.0, 4096), 21);
  const auto b = psi_estimate(model, bbar.as_function(), kOrigin, EmpiricalMeasure::dirac(0.0), y, eta(), options(16.0, 4096), 21);
  EXPECT_NEAR(a.psi_hat[0], b.psi_hat[0], 3.0 * std::hypot(a.psi_se[0], b.psi_se[0]));
  EXPECT_LT(a.tail_bound, 0.01);
}

TEST(Psi, RejectsInvalidQueries) {
  const auto model = build_example_model(example_params());
  const auto bbar = build_averaged_drift(model, eta());
  const std::vector<double> bad{0.0, 1.0};
  EXPECT_THROW(psi_estimate(model, bbar.as_function(), bad, EmpiricalMeasure::dirac(0.0), kOrigin, eta(), options(1.0), 1),
               ConfigurationError);
  EXPECT_THROW(psi_estimate(model, bbar.as_function(), kOrigin, EmpiricalMeasure::dirac(0.0), kOrigin, eta(), options(1.0, 1), 1),
               ConfigurationError);
}

TEST(DyPsi, VanishesAtOriginBySymmetry) {
  const auto model = build_example_model(example_params());
  const auto cell = dy_psi_sigma2_estimate(model, kOrigin, EmpiricalMeasure::dirac(0.0), kOrigin, eta(), options(8.0), 4);
  EXPECT_NEAR(cell.dy_psi_sigma2_hat[0], 0.0, 3.0 * cell.dy_psi_sigma2_se[0] + 1e-3);
}

TEST(DyPsi, AtUnitStateMatchesQuadratureOracle) {
  const auto model = build_example_model(example_params());
  const std::vector<double> y{1.0};
  const auto cell = dy_psi_sigma2_estimate(model, kOrigin, EmpiricalMeasure::dirac(0.0), y, eta(), options(0.0, 4096), 6);
  const double expected = oracle::Example{}.dy_psi(1.0);
  EXPECT_NEAR(expected, -0.4052802898861886, 1e-10);
  EXPECT_NEAR(cell.dy_psi_sigma2_hat[0], expected, 0.05 * std::abs(expected));
}

TEST(DyPsi, MissingDerivativesAreACapabilityError) {
  ModelSpec s = build_example_model(example_params());
  s.derivs.dy_b1 = nullptr;
  EXPECT_THROW(dy_psi_sigma2_estimate(s, kOrigin, EmpiricalMeasure::dirac(0.0), kOrigin, eta(), options(1.0), 1),
               CapabilityError);
}

TEST(Upsilon, SquareMatchesQuadratureOracle) {
  const auto model = build_example_model(example_params());
  UpsilonBudget budget;
  budget.poisson = options(8.0, 2000);
  budget.poisson.cloud_paths = 2000;
  const auto u = upsilon_estimate(model, eta(), kOrigin, EmpiricalMeasure::dirac(0.0), budget, 8);
  const double expected = oracle::Example{}.upsilon_squared();
  EXPECT_NEAR(expected, 0.0766104881695376, 1e-9);
  EXPECT_NEAR(u.raw_second_moment[0], expected, 0.05 * expected);
  EXPECT_NEAR(u.matrix[0] * u.matrix[0], u.raw_second_moment[0], u.tolerance);
  EXPECT_GE(u.matrix[0], 0.0);
  EXPECT_EQ(u.cell_weights.size(), budget.cells);
}

TEST(Upsilon, SquareRootOfAPsdMatrix) {
  UpsilonEstimate e;
  e.n = 2;
  e.raw_second_moment = {2.0, 1.0, 1.0, 2.0};
  psd_sqrt(e);
  EXPECT_EQ(e.clipped_fraction, 0.0);
  const auto& S = e.matrix;
  EXPECT_NEAR(S[0] * S[0] + S[1] * S[2], 2.0, 1e-12);
  EXPECT_NEAR(S[0] * S[1] + S[1] * S[3], 1.0, 1e-12);
  EXPECT_NEAR(S[2] * S[1] + S[3] * S[3], 2.0, 1e-12);
  EXPECT_EQ(S[1], S[2]);
}

TEST(Upsilon, SmallNegativeEigenvaluesAreClippedWithinTolerance) {
  UpsilonEstimate e;
  e.n = 2;
  e.raw_second_moment = {1.0, 0.0, 0.0, -0.01};
  psd_sqrt(e);
  EXPECT_GT(e.clipped_fraction, 0.0);
  EXPECT_NEAR(e.matrix[3], 0.0, 1e-15);
  EXPECT_GE(e.tolerance, 0.01);
}

TEST(Upsilon, IndefiniteInputIsAConditioningError) {
  UpsilonEstimate e;
  e.n = 2;
  e.raw_second_moment = {1.0, 0.0, 0.0, -1.0};
  try {
    psd_sqrt(e);
    FAIL() << "expected ConditioningError";
  } catch (const ConditioningError& err) {
    EXPECT_NEAR(err.clipped_fraction(), 0.5, 1e-12);
  }
}

TEST(Dynkin, ZeroHorizonGivesZeroResidual) {
  const auto model = build_example_model(example_params());
  const auto bbar = build_averaged_drift(model, eta());
  const PsiQuery never = [](ConstVec, const EmpiricalMeasure&, std::size_t) -> PoissonCell {
    throw std::logic_error("not queried");
  };
  const auto r = dynkin_residual(model, bbar.as_function(), never, kOrigin, EmpiricalMeasure::dirac(0.0), kOrigin, eta(), 0.0,
                                 {}, 1);
  EXPECT_EQ(r.residual, 0.0);
}

TEST(Dynkin, PoissonEquationHoldsInIntegratedForm) {
  const auto model = build_example_model(example_params());
  const auto bbar = build_averaged_drift(model, eta());
  const auto mu = EmpiricalMeasure::dirac(0.0);
  const PsiQuery query = [&](ConstVec y, const EmpiricalMeasure& nu, std::size_t k) {
    return psi_estimate(model, bbar.as_function(), kOrigin, mu, y, nu, options(8.0), derive_seed(40, k));
  };
  DynkinOptions opt;
  opt.grid = {.h = kPoissonStep, .rho_fast = 20};
  const std::vector<double> y{1.0};
  const auto r = dynkin_residual(model, bbar.as_function(), query, kOrigin, mu, y, eta(), 0.5, opt, 41);
  EXPECT_GT(r.combined_se, 0.0);
  EXPECT_LE(r.residual, 3.0 * r.combined_se);
  EXPECT_EQ(r.outer_points, opt.outer_points);
}
