#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>

#include <boost/math/special_functions/erf.hpp>

namespace fsde {

//---------------------------------------------------------------------------//
/*!
 * Philox4x32-10 counter-based generator.
 *
 * A pure function of (key, counter): any Gaussian increment of any path can
 * be regenerated without replaying the stream, which makes every result
 * independent of how paths are farmed out to workers.
 */
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  explicit Philox4x32(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  Counter operator()(Counter ctr) const {
    Key key = key_;
    for (int round = 0; round < 10; ++round) {
      ctr = single_round(ctr, key);
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static Counter single_round(const Counter& c, const Key& k) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
    return {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k[0], static_cast<std::uint32_t>(p1),
            static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k[1], static_cast<std::uint32_t>(p0)};
  }

  Key key_;
};

// Maps 64 random bits to the open interval (0, 1).
inline double to_open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Standard normal quantile.
inline double normal_quantile(double u) {
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * u);
}

//---------------------------------------------------------------------------//
/*!
 * Standard normal variates keyed by (path, step, component).
 *
 * Inverse-CDF transform of the Philox stream: one uniform per variate, no
 * rejection, so the consumption pattern never depends on the values.
 */
class NormalStream {
 public:
  NormalStream(std::uint64_t seed, std::uint32_t stream = 0) : gen_(seed), stream_(stream) {}

  double operator()(std::uint64_t path, std::uint64_t step, std::uint32_t component) const {
    const std::uint32_t block = component >> 1;
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                                  static_cast<std::uint32_t>(path),
                                  (static_cast<std::uint32_t>(path >> 32) & 0xFFFFu) | ((block & 0xFFu) << 16) |
                                      (stream_ << 24)};
    const auto out = gen_(ctr);
    const std::uint64_t bits = (component & 1u)
                                   ? (static_cast<std::uint64_t>(out[2]) << 32) | out[3]
                                   : (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
    return normal_quantile(to_open_unit(bits));
  }

 private:
  Philox4x32 gen_;
  std::uint32_t stream_;
};

// Uniform (0,1) variates keyed by (index, slot); used for sampling-based
// validators, never for the dynamics.
class UniformStream {
 public:
  explicit UniformStream(std::uint64_t seed) : gen_(seed) {}

  double operator()(std::uint64_t index, std::uint32_t slot) const {
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), slot,
                                  0xA5A5A5A5u};
    const auto out = gen_(ctr);
    return to_open_unit((static_cast<std::uint64_t>(out[0]) << 32) | out[1]);
  }

 private:
  Philox4x32 gen_;
};

//---------------------------------------------------------------------------//
/*!
 * Brownian increments on a grid of step h, generated on a grid 2^refine times
 * finer and summed pairwise. Two sources with the same seed and the same
 * finest step therefore drive nested grids with the same Brownian path.
 */
class BrownianIncrements {
 public:
  BrownianIncrements(std::uint64_t seed, std::uint64_t path, double h, int refine = 0, std::uint32_t stream = 0)
      : normals_(seed, stream), path_(path), refine_(refine),
        fine_scale_(std::sqrt(h / static_cast<double>(std::uint64_t{1} << refine))) {}

  void fill(std::uint64_t step, std::span<double> out) const {
    const std::uint64_t per = std::uint64_t{1} << refine_;
    for (std::size_t c = 0; c < out.size(); ++c) {
      double acc = 0.0;
      for (std::uint64_t k = 0; k < per; ++k) {
        acc += normals_(path_, step * per + k, static_cast<std::uint32_t>(c));
      }
      out[c] = fine_scale_ * acc;
    }
  }

 private:
  NormalStream normals_;
  std::uint64_t path_;
  int refine_;
  double fine_scale_;
};

}  // namespace fsde
