// SPDX-License-Identifier: Apache-2.0
#include "kurtq/rng.hpp"

#include <cmath>
#include <numbers>

namespace kurtq {

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw ParameterError("Rng::below needs a positive bound");
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % bound;
}

double Rng::uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  const double u2 = uniform01();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw ParameterError("gamma shape must be positive");
  if (shape < 1.0) {
    double u;
    do {
      u = uniform01();
    } while (u <= 0.0);
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform01();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double Rng::student_t(double dof) {
  if (!(dof > 0.0)) throw ParameterError("student_t degrees of freedom must be positive");
  const double z = normal();
  double chi2;
  do {
    chi2 = 2.0 * gamma(dof / 2.0);
  } while (chi2 <= 0.0);
  return z / std::sqrt(chi2 / dof);
}

namespace {

struct Sampler {
  Rng& rng;
  double operator()(const UniformDist& d) const { return rng.uniform(d.lo, d.hi); }
  double operator()(const NormalDist& d) const { return d.mean + d.stddev * rng.normal(); }
  double operator()(const StudentTDist& d) const { return d.scale * rng.student_t(d.dof); }
};

struct Validator {
  void operator()(const UniformDist& d) const {
    if (!(d.hi > d.lo)) throw ParameterError("uniform distribution needs hi > lo");
  }
  void operator()(const NormalDist& d) const {
    if (!(d.stddev > 0.0)) throw ParameterError("normal distribution needs stddev > 0");
  }
  void operator()(const StudentTDist& d) const {
    if (!(d.dof > 0.0)) throw ParameterError("student_t distribution needs dof > 0");
    if (!(d.scale > 0.0)) throw ParameterError("student_t distribution needs scale > 0");
  }
};

}  // namespace

Tensor rand_tensor(Rng& rng, const Shape& shape, const Distribution& dist) {
  std::visit(Validator{}, dist);
  Tensor out(shape);
  Sampler sampler{rng};
  for (auto& v : out.data()) v = static_cast<float>(std::visit(sampler, dist));
  return out;
}

}  // namespace kurtq
