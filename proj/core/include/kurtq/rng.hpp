// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <variant>

#include "kurtq/tensor.hpp"

namespace kurtq {

/// Seeded pseudorandom source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Distributions are implemented here rather than taken from
/// <random> because the standard distributions are implementation-defined:
///   uniform   53-bit mantissa fill, u in [0, 1)
///   normal    Box-Muller, both variates used in order
///   gamma     Marsaglia-Tsang squeeze (shape < 1 boosted by u^(1/shape))
///   student_t z / sqrt(chi2(nu) / nu) with chi2(nu) = 2 * gamma(nu / 2)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double uniform01();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  double normal();
  double gamma(double shape);
  double student_t(double dof);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct UniformDist {
  double lo = -1.0;
  double hi = 1.0;
};
struct NormalDist {
  double mean = 0.0;
  double stddev = 1.0;
};
struct StudentTDist {
  double dof = 2.5;
  double scale = 1.0;
};

using Distribution = std::variant<UniformDist, NormalDist, StudentTDist>;

/// Tensor of i.i.d. samples. Throws ParameterError for hi <= lo, stddev <= 0,
/// dof <= 0 or scale <= 0.
Tensor rand_tensor(Rng& rng, const Shape& shape, const Distribution& dist);

}  // namespace kurtq
