#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "sleepdg/autodiff/tensor.hpp"

namespace sleepdg::ad {

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  double low = -1.0;
  double high = 1.0;
};

/// Relative discrepancy of two gradient vectors in the max norm:
/// max|a - n| / max(max|a|, max|n|). Zero when both vanish.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale == 0.0) return diff;
  return diff / scale;
}

/// Compares reverse-mode gradients of `f` at the given inputs with central
/// finite differences, returning the worst relative error over all inputs.
inline double grad_check(const ScalarFn& f, const std::vector<Tensor<double>>& inputs,
                         GradCheckOptions opts = {}) {
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(in.detach(true));
  const auto grads = backward(f(leaves));

  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto analytic = grads.of(leaves[k]);
    std::vector<double> numeric(leaves[k].size());
    for (std::size_t i = 0; i < leaves[k].size(); ++i) {
      std::vector<Tensor<double>> probe;
      probe.reserve(leaves.size());
      for (const auto& l : leaves) probe.push_back(l.detach());
      NoGradGuard no_grad;
      auto plus = probe[k].values();
      auto minus = plus;
      plus[i] += opts.step;
      minus[i] -= opts.step;
      probe[k] = Tensor<double>::from(leaves[k].shape(), plus);
      const double fp = f(probe).item();
      probe[k] = Tensor<double>::from(leaves[k].shape(), minus);
      const double fm = f(probe).item();
      numeric[i] = (fp - fm) / (2.0 * opts.step);
    }
    worst = std::max(worst, relative_error(analytic.data(), numeric));
  }
  return worst;
}

/// Checks a closure over existing leaves (for example model parameters) by
/// perturbing them in place. The relative error is taken over all leaves
/// jointly, as if they were one concatenated vector.
inline double grad_check_leaves(const std::function<Tensor<double>()>& f,
                                std::vector<Tensor<double>> leaves, GradCheckOptions opts = {}) {
  const auto grads = backward(f());
  std::vector<double> analytic, numeric;
  NoGradGuard no_grad;
  for (auto& leaf : leaves) {
    const auto g = grads.of(leaf);
    analytic.insert(analytic.end(), g.data().begin(), g.data().end());
    auto values = leaf.mutable_leaf_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opts.step;
      const double fp = f().item();
      values[i] = saved - opts.step;
      const double fm = f().item();
      values[i] = saved;
      numeric.push_back((fp - fm) / (2.0 * opts.step));
    }
  }
  return relative_error(analytic, numeric);
}

/// Draws inputs of the given shapes uniformly from [low, high) and checks `f`.
inline double grad_check(const ScalarFn& f, const std::vector<Shape>& shapes, std::uint64_t seed,
                         GradCheckOptions opts = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(opts.low, opts.high);
  std::vector<Tensor<double>> inputs;
  for (const auto& s : shapes) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = dist(rng);
    inputs.push_back(Tensor<double>::from(s, std::move(v)));
  }
  return grad_check(f, inputs, opts);
}

}  // namespace sleepdg::ad
