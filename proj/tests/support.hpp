// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for unit and acceptance tests: random tensors and a central
// finite-difference gradient checker.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "roadformer/nn.hpp"
#include "roadformer/ops.hpp"

namespace roadformer::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.uniform(-1.0, 1.0);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output component takes part in the check.
inline Tensor project(const Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, out.shape());
  return sum(mul(out, w));
}

struct GradCheck {
  // max over inputs of |analytic - numeric|_inf / max(|numeric|_inf, floor); the floor keeps
  // structurally zero gradients (e.g. a bias followed by normalization) from dividing noise by ~0
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::string worst;     // label of the worst input
};

/// Compares the analytic gradient of scalar `f` with respect to each tensor in
/// `inputs` against central differences with step `h`.
inline GradCheck gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           const std::vector<std::string>& labels = {}, double h = 1e-6, double floor = 1e-3) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }
  GradCheck r;
  NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k];
    auto v = t.values_mut();
    std::vector<double> numeric(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = v[i];
      v[i] = x + h;
      const double up = f().item();
      v[i] = x - h;
      const double down = f().item();
      v[i] = x;
      numeric[i] = (up - down) / (2.0 * h);
    }
    double scale = floor, err = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      scale = std::max(scale, std::abs(numeric[i]));
      err = std::max(err, std::abs(numeric[i] - analytic[k][i]));
    }
    const double rel = err / scale;
    r.max_abs = std::max(r.max_abs, err);
    if (rel >= r.max_rel) {
      r.max_rel = rel;
      r.worst = k < labels.size() ? labels[k] : "input" + std::to_string(k);
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return r;
}

}  // namespace roadformer::testing
