#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "msmv/model.hpp"

using namespace msmv;

namespace {

double eval_b2(const ModelSpec& s, double y, const EmpiricalMeasure& nu) {
  double out = 0.0;
  const std::vector<double> yv{y};
  s.b2(yv, s.fast_view(nu), OutVec(&out, 1));
  return out;
}

ModelSpec constant_model() {
  ModelSpec s;
  s.name = "constant";
  s.b1 = [](ConstVec, const MeasureView&, ConstVec, const MeasureView&, OutVec o) { o[0] = 0.3; };
  s.sigma1 = [](ConstVec, const MeasureView&, OutVec o) { o[0] = 0.5; };
  s.b2 = [](ConstVec, const MeasureView&, OutVec o) { o[0] = -1.0; };
  s.sigma2 = [](ConstVec, const MeasureView&, OutVec o) { o[0] = 1.0; };
  return s;
}

}  // namespace

TEST(ExampleModel, ReferenceConstantsForMomentOrderTwo) {
  const auto p = ExampleParams::with_reference_constants(2.0);
  EXPECT_DOUBLE_EQ(p.k, 1.0 / 48.0);
  EXPECT_DOUBLE_EQ(p.m, 1.0 / 96.0);
}

TEST(ExampleModel, FastDriftAtUnitStateAndPointMass) {
  const auto s = build_example_model({.k = 1.0, .m = 0.25});
  EXPECT_DOUBLE_EQ(eval_b2(s, 1.0, EmpiricalMeasure::dirac(0.0)), -1.0);
}

TEST(ExampleModel, SlowDiffusionAtPointMass) {
  const auto s = build_example_model({});
  const EmpiricalMeasure mu = EmpiricalMeasure::dirac(2.0);
  for (double x : {-3.0, 0.0, 5.0}) {
    double out = 0.0;
    const std::vector<double> xv{x};
    s.sigma1(xv, s.slow_view(mu), OutVec(&out, 1));
    EXPECT_DOUBLE_EQ(out, 1.6);
  }
}

TEST(ExampleModel, SlowDriftFormula) {
  const auto s = build_example_model({.a = 2.0, .b = 0.5, .q = 3.0});
  const EmpiricalMeasure mu({1.0, 2.0}, 1), nu({0.2, -0.4, 1.0}, 1);
  const std::vector<double> x{0.7}, y{-1.1};
  double out = 0.0;
  s.b1(x, s.slow_view(mu), y, s.fast_view(nu), OutVec(&out, 1));
  const double cq = (std::cos(0.6) + std::cos(-1.2) + std::cos(3.0)) / 3.0;
  EXPECT_NEAR(out, std::sin(1.4) + 1.5 + std::cos(-0.55) + cq, 1e-14);
}

TEST(ExampleModel, BoundsHoldPointwise) {
  const auto s = build_example_model({});
  const CounterRng r(4);
  for (std::size_t t = 0; t < 500; ++t) {
    DrawStream d(r, Channel::user, t);
    const std::vector<double> x{10 * (d.uniform() - 0.5)}, y{10 * (d.uniform() - 0.5)};
    const EmpiricalMeasure mu({10 * (d.uniform() - 0.5), 10 * (d.uniform() - 0.5)}, 1);
    const EmpiricalMeasure nu({10 * (d.uniform() - 0.5)}, 1);
    const auto muv = s.slow_view(mu);
    double b = 0.0, sig = 0.0;
    s.b1(x, muv, y, s.fast_view(nu), OutVec(&b, 1));
    s.sigma2(y, s.fast_view(nu), OutVec(&sig, 1));
    EXPECT_LE(std::abs(b), 3.0 + std::abs(muv.mean()) + 1e-12);
    EXPECT_EQ(sig, 1.0);
  }
}

TEST(ExampleModel, WithoutMeanFieldTheFastDriftIgnoresTheLaw) {
  const auto s = build_example_model({.k = 1.0, .m = 0.0});
  const double ref = eval_b2(s, 0.8, EmpiricalMeasure::dirac(0.0));
  for (double c : {-5.0, 1.0, 40.0}) EXPECT_EQ(eval_b2(s, 0.8, EmpiricalMeasure({c, 2 * c}, 1)), ref);
}

TEST(ExampleModel, InvalidParametersAreRejected) {
  EXPECT_THROW(build_example_model({.k = 0.5, .m = 0.5}), ConfigurationError);
  EXPECT_THROW(build_example_model({.k = 0.0, .m = 0.0}), ConfigurationError);
  EXPECT_THROW(build_example_model({.k = 1.0, .m = -0.1}), ConfigurationError);
}

TEST(ExampleModel, DerivativeCallbacksMatchFiniteDifferences) {
  const auto s = build_example_model({.a = 1.3, .b = 0.7});
  const EmpiricalMeasure mu({0.5, -1.0}, 1), nu({0.1}, 1);
  const auto muv = s.slow_view(mu), nuv = s.fast_view(nu);
  const double h = 1e-6;
  for (double x0 : {-1.0, 0.3}) {
    for (double y0 : {-0.4, 2.0}) {
      auto b1 = [&](double x, double y) {
        double o = 0.0;
        const std::vector<double> xv{x}, yv{y};
        s.b1(xv, muv, yv, nuv, OutVec(&o, 1));
        return o;
      };
      const std::vector<double> xv{x0}, yv{y0};
      double dx = 0.0, dy = 0.0;
      s.derivs.dx_b1(xv, muv, yv, nuv, OutVec(&dx, 1));
      s.derivs.dy_b1(xv, muv, yv, nuv, OutVec(&dy, 1));
      EXPECT_NEAR(dx, (b1(x0 + h, y0) - b1(x0 - h, y0)) / (2 * h), 1e-8);
      EXPECT_NEAR(dy, (b1(x0, y0 + h) - b1(x0, y0 - h)) / (2 * h), 1e-8);
    }
  }
  for (double x : {-2.0, -0.3, 0.0, 0.4, 3.0})
    EXPECT_NEAR(cubic_ratio_derivative(x), (cubic_ratio(x + h) - cubic_ratio(x - h)) / (2 * h), 1e-8);
}

TEST(Capabilities, MissingPiecesAreReported) {
  ModelSpec s = constant_model();
  EXPECT_NO_THROW(s.validate());
  EXPECT_THROW(s.require({"dx_b1"}, "test"), CapabilityError);
  s.sigma2 = nullptr;
  EXPECT_THROW(s.validate(), ConfigurationError);
  const auto ex = build_example_model({});
  EXPECT_NO_THROW(ex.require({"dx_b1", "dy_b1", "dmu_b1", "dx_sigma1", "dmu_sigma1", "dy_b2", "dy_sigma2"}, "test"));
}

TEST(Capabilities, FastDependenceIsDetected) {
  EXPECT_TRUE(depends_on_fast(build_example_model({}), 1));
  EXPECT_FALSE(depends_on_fast(constant_model(), 1));
}

TEST(Audit, ConstantModelHasZeroLipschitzEstimates) {
  const auto r = audit_assumptions(constant_model(), 2.0, 256, 2.0, 3);
  EXPECT_EQ(r.lip_b1s1_hat, 0.0);
  EXPECT_EQ(r.lip_b2s2_hat, 0.0);
  EXPECT_DOUBLE_EQ(r.margin, r.beta1_hat - r.beta2_hat);
  EXPECT_TRUE(r.sampled_estimate);
  EXPECT_EQ(r.sample_count, 256u);
}

TEST(Audit, ExampleLipschitzEstimateRespectsTheAnalyticBound) {
  for (const auto& p : {ExampleParams{.k = 1.0, .m = 0.25}, ExampleParams::with_reference_constants(2.0)}) {
    const auto r = audit_assumptions(build_example_model(p), 2.0, 2048, 2.0, 5);
    // Squared difference quotient against 2(k^2 + m^2).
    EXPECT_LE(r.lip_b2s2_hat, 2.0 * (p.k * p.k + p.m * p.m) + 1e-12);
    EXPECT_GT(r.lip_b2s2_hat, 0.0);
  }
}

TEST(Audit, ExampleDissipativityConstants) {
  for (const auto& p : {ExampleParams{.k = 1.0, .m = 0.25}, ExampleParams::with_reference_constants(2.0)}) {
    const auto r = audit_assumptions(build_example_model(p), 2.0, 4096, 2.0, 6);
    EXPECT_NEAR(r.beta1_hat, p.k, 1e-9 * p.k);
    const double b2 = p.m * p.m / p.k;
    EXPECT_LE(r.beta2_hat, b2 * (1.0 + 1e-9));
    EXPECT_GE(r.beta2_hat, 0.95 * b2);
  }
}

TEST(Audit, ReferenceConstantsGiveAPositiveMargin) {
  const auto r = audit_assumptions(build_example_model(ExampleParams::with_reference_constants(2.0)), 2.0, 1024, 2.0, 7);
  EXPECT_TRUE(r.margin_positive);
  EXPECT_NEAR(r.alpha1, r.beta1_hat - 6.0 * r.lip_b2s2_hat, 1e-15);
  EXPECT_NEAR(r.alpha2, r.beta2_hat + 5.0 * r.lip_b2s2_hat, 1e-15);
}

TEST(Audit, EstimatesAreMonotoneInTheProbePrefix) {
  const auto model = build_example_model({});
  AuditReport prev = audit_assumptions(model, 2.0, 2, 2.0, 9);
  for (std::size_t n : {4u, 16u, 64u, 256u, 1024u}) {
    const auto r = audit_assumptions(model, 2.0, n, 2.0, 9);
    EXPECT_GE(r.lip_b1s1_hat, prev.lip_b1s1_hat);
    EXPECT_GE(r.lip_b2s2_hat, prev.lip_b2s2_hat);
    EXPECT_LE(r.kappa_hat, prev.kappa_hat);
    prev = r;
  }
}

TEST(Audit, NonFiniteOutputRaisesModelErrorWithInputs) {
  ModelSpec s = constant_model();
  s.b2 = [](ConstVec y, const MeasureView&, OutVec o) { o[0] = y[0] > 0.0 ? NAN : 0.0; };
  try {
    audit_assumptions(s, 2.0, 64, 2.0, 1);
    FAIL() << "expected ModelError";
  } catch (const ModelError& e) {
    EXPECT_FALSE(e.inputs().empty());
  }
}

TEST(Audit, InvalidArgumentsAreRejected) {
  EXPECT_THROW(audit_assumptions(constant_model(), 2.0, 1, 2.0, 1), ConfigurationError);
  EXPECT_THROW(audit_assumptions(constant_model(), 2.0, 8, 0.0, 1), ConfigurationError);
}
