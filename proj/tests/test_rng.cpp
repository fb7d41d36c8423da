#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "msmv/rng.hpp"
#include "msmv/stats.hpp"

using namespace msmv;

TEST(Philox, KnownAnswerVectors) {
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, 0, 0), (PhiloxBlock{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, 0xffffffffu, 0xffffffffu),
            (PhiloxBlock{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, 0xa4093822u, 0x299f31d0u),
            (PhiloxBlock{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(CounterRng, DrawsArePureFunctionsOfTheCounter) {
  const CounterRng a(42), b(42), c(43);
  for (std::uint64_t k = 0; k < 100; ++k) {
    EXPECT_EQ(a.normal(Channel::slow_noise, 7, k), b.normal(Channel::slow_noise, 7, k));
    EXPECT_NE(a.normal(Channel::slow_noise, 7, k), c.normal(Channel::slow_noise, 7, k));
    EXPECT_NE(a.normal(Channel::slow_noise, 7, k), a.normal(Channel::fast_noise, 7, k));
    EXPECT_NE(a.normal(Channel::slow_noise, 7, k), a.normal(Channel::slow_noise, 8, k));
  }
}

TEST(CounterRng, UniformsLieInTheOpenUnitInterval) {
  const CounterRng r(1);
  for (std::uint64_t k = 0; k < 10000; ++k) {
    const double u = r.uniform(Channel::user, 0, k);
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
  EXPECT_GT(to_open_unit(0, 0), 0.0);
  EXPECT_LT(to_open_unit(0xffffffffu, 0xffffffffu), 1.0);
}

TEST(CounterRng, NormalMomentsMatchStandardGaussian) {
  const CounterRng r(2024);
  const std::size_t n = 200000;
  std::vector<double> z(n);
  for (std::size_t k = 0; k < n; ++k) z[k] = r.normal(Channel::user, 3, k);
  const double se = 1.0 / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(stats::mean(z), 0.0, 4.0 * se);
  EXPECT_NEAR(stats::variance(z), 1.0, 4.0 * std::sqrt(2.0) * se);
  EXPECT_NEAR(stats::excess_kurtosis(z), 0.0, 4.0 * std::sqrt(24.0) * se);
}

TEST(CounterRng, SumOfNormalsMatchesTermwiseSum) {
  const CounterRng r(5);
  for (std::uint64_t k0 : {0u, 1u, 6u, 7u}) {
    for (std::uint64_t count : {0u, 1u, 2u, 3u, 8u, 9u}) {
      double s = 0.0;
      for (std::uint64_t k = k0; k < k0 + count; ++k) s += r.normal(Channel::slow_noise, 2, k);
      EXPECT_NEAR(r.sum_normals(Channel::slow_noise, 2, k0, count), s, 1e-12);
    }
  }
}

TEST(CounterRng, DrawStreamIsReproducible) {
  const CounterRng r(9);
  DrawStream a(r, Channel::xi, 4), b(r, Channel::xi, 4);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.uniform(), b.uniform());
  }
}

TEST(DeriveSeed, ChildSeedsAreDistinct) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t tag = 0; tag < 1000; ++tag) seen.insert(derive_seed(1, tag));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}
