#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace pscm {

// Philox4x32-10 counter-based generator (Salmon et al., "Parallel random
// numbers: as easy as 1, 2, 3"). Output is a pure function of (key, counter),
// so any replicate can be regenerated independently of the others and of the
// number of worker threads.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;

  static Counter block(std::uint64_t seed, Counter ctr) {
    std::uint32_t k0 = static_cast<std::uint32_t>(seed);
    std::uint32_t k1 = static_cast<std::uint32_t>(seed >> 32);
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ k0, static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ k1, static_cast<std::uint32_t>(p0)};
      k0 += kWeyl0;
      k1 += kWeyl1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

// A sequential stream over Philox blocks. `stream` and `substream` name the
// consumer (e.g. a pipeline stage and a replicate index); draws within the
// stream advance the low counter words.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint32_t stream, std::uint32_t substream = 0)
      : seed_(seed), stream_(stream), substream_(substream) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() {
    if (lane_ == 2) refill();
    const std::uint64_t hi = buffer_[2 * lane_];
    const std::uint64_t lo = buffer_[2 * lane_ + 1];
    ++lane_;
    return (hi << 32) | lo;
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1).
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller; the spare deviate is kept so draws come in pairs.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

 private:
  void refill() {
    buffer_ = Philox4x32::block(seed_, {counter_lo_, counter_hi_, substream_, stream_});
    if (++counter_lo_ == 0) ++counter_hi_;
    lane_ = 0;
  }

  std::uint64_t seed_;
  std::uint32_t stream_;
  std::uint32_t substream_;
  std::uint32_t counter_lo_ = 0;
  std::uint32_t counter_hi_ = 0;
  Philox4x32::Counter buffer_{};
  int lane_ = 2;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stream ids for the pipeline stages that consume randomness.
namespace streams {
inline constexpr std::uint32_t kSimulation = 1;
inline constexpr std::uint32_t kPlacebo = 2;
inline constexpr std::uint32_t kClustering = 3;
}  // namespace streams

}  // namespace pscm
