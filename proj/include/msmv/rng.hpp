#pragma once

// Counter-based random streams. Every draw is a pure function of
// (seed, channel, particle, index), so results do not depend on scheduling.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace msmv {

enum class Channel : std::uint32_t {
  rho = 1,
  xi = 2,
  slow_noise = 3,   // B
  fast_noise = 4,   // W
  limit_noise = 5,  // V
  probe = 6,
  bootstrap = 7,
  resample = 8,
  user = 64,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Child seed for a named sub-experiment (replica, ε index, ...).
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
}

using PhiloxBlock = std::array<std::uint32_t, 4>;

inline PhiloxBlock philox4x32(PhiloxBlock ctr, std::uint32_t k0, std::uint32_t k1) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
    k0 += w0;
    k1 += w1;
  }
  return ctr;
}

inline double to_open_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
  return (static_cast<double>(bits >> 12) + 0.5) * 0x1.0p-52;
}

inline std::array<double, 2> box_muller(double u1, double u2) {
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(theta), r * std::sin(theta)};
}

class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  PhiloxBlock block(Channel channel, std::uint64_t particle, std::uint64_t index) const {
    const PhiloxBlock ctr = {static_cast<std::uint32_t>(channel), static_cast<std::uint32_t>(particle),
                             static_cast<std::uint32_t>(index),
                             static_cast<std::uint32_t>(index >> 32) ^
                                 (static_cast<std::uint32_t>(particle >> 32) << 16)};
    return philox4x32(ctr, static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32));
  }

  // Standard normals number 2*pair and 2*pair+1 of a stream.
  std::array<double, 2> normal_pair(Channel channel, std::uint64_t particle, std::uint64_t pair) const {
    const PhiloxBlock b = block(channel, particle, pair);
    return box_muller(to_open_unit(b[0], b[1]), to_open_unit(b[2], b[3]));
  }

  double normal(Channel channel, std::uint64_t particle, std::uint64_t k) const {
    return normal_pair(channel, particle, k >> 1)[k & 1];
  }

  double uniform(Channel channel, std::uint64_t particle, std::uint64_t k) const {
    const PhiloxBlock b = block(channel, particle, k >> 1);
    return (k & 1) ? to_open_unit(b[2], b[3]) : to_open_unit(b[0], b[1]);
  }

  // Sum of normals k0 .. k0+count-1 of one stream, consuming pairs sequentially.
  double sum_normals(Channel channel, std::uint64_t particle, std::uint64_t k0, std::uint64_t count) const {
    double s = 0.0;
    std::uint64_t k = k0;
    const std::uint64_t end = k0 + count;
    if (k < end && (k & 1)) s += normal(channel, particle, k++);
    for (; k + 1 < end; k += 2) {
      const auto z = normal_pair(channel, particle, k >> 1);
      s += z[0];
      s += z[1];
    }
    if (k < end) s += normal(channel, particle, k);
    return s;
  }

 private:
  std::uint64_t seed_ = 0;
};

// Sequential view on one (channel, particle) stream, used by samplers.
class DrawStream {
 public:
  DrawStream(const CounterRng& rng, Channel channel, std::uint64_t particle)
      : rng_(rng), channel_(channel), particle_(particle) {}

  double uniform() { return rng_.uniform(channel_, particle_, next_++); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const auto z = box_muller(u1, u2);
    spare_ = z[1];
    has_spare_ = true;
    return z[0];
  }

 private:
  CounterRng rng_;
  Channel channel_;
  std::uint64_t particle_;
  std::uint64_t next_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace msmv
