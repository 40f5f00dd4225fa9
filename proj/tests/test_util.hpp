#pragma once

#include <random>
#include <vector>

#include "xda/tensor.hpp"

namespace xda::testing {

inline std::vector<Real> random_values(std::mt19937_64& rng, std::size_t n, Real lo = -1.0, Real hi = 1.0) {
  std::uniform_real_distribution<Real> dist(lo, hi);
  std::vector<Real> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline Tensor random_param(std::mt19937_64& rng, Shape shape, Real lo = -1.0, Real hi = 1.0) {
  const std::size_t n = numel(shape);
  return Tensor::parameter(std::move(shape), random_values(rng, n, lo, hi));
}

inline Tensor random_const(std::mt19937_64& rng, Shape shape, Real lo = -1.0, Real hi = 1.0) {
  const std::size_t n = numel(shape);
  return Tensor::constant(std::move(shape), random_values(rng, n, lo, hi));
}

// Random row-stochastic rows built without going through softmax_rows.
inline std::vector<Real> random_prob_rows(std::mt19937_64& rng, std::size_t rows, std::size_t n) {
  std::uniform_real_distribution<Real> dist(0.01, 1.0);
  std::vector<Real> v(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (v[r * n + j] = dist(rng));
    for (std::size_t j = 0; j < n; ++j) v[r * n + j] /= z;
  }
  return v;
}

}  // namespace xda::testing
