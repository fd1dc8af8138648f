// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "adastate/tensor.hpp"

namespace adastate {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every
/// coordinate of x. `f` must be deterministic; x is restored afterwards.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x,
                               double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor probe = x.detach();
  auto data = probe.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = f(probe);
    data[i] = orig - h;
    const double down = f(probe);
    data[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

/// |a - b| / max(|a|, |b|, floor), the comparison used by every gradient check.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-6) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

}  // namespace adastate
