#pragma once

#include <cmath>

#include "s3pet/gradcheck.hpp"
#include "s3pet/rng.hpp"

namespace s3pet::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0, double offset = 0.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = offset + rng.gaussian(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

// Positive entries bounded away from zero.
inline Tensor random_positive(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = 0.5 + 1.5 * rng.uniform_open();
  return Tensor::from(std::move(shape), std::move(v));
}

// Fixed random weights turn any output into a scalar loss, so every output
// element receives a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed, "weights");
  std::vector<double> w(out.numel());
  for (double& x : w) x = rng.gaussian(0.0, 1.0);
  return sum(mul(out, Tensor::from(out.shape(), std::move(w))));
}

// Owning copy, safe to iterate when `t` is a temporary.
inline std::vector<double> all_values(const Tensor& t) { return t.values(); }

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;

}  // namespace s3pet::testing
