#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sleepdg/autodiff/tensor.hpp"
#include "sleepdg/errors.hpp"

namespace sleepdg::ad {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  /// false: L2 term added to the gradient. true: decay applied to the weights directly.
  bool decoupled_weight_decay = false;
};

/// Moment accumulators for a fixed, ordered list of parameters.
template <class T>
struct AdamState {
  AdamOptions options;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(AdamOptions opts, std::span<const Tensor<T>> params) : options(opts) {
    for (const auto& p : params) {
      first_moment.emplace_back(p.size(), T(0));
      second_moment.emplace_back(p.size(), T(0));
    }
  }
};

/// One bias-corrected Adam update, in place on the parameter leaves.
template <class T>
void adam_step(AdamState<T>& state, std::span<Tensor<T>> params, const Gradients<T>& grads) {
  if (params.size() != state.first_moment.size()) {
    throw ContractError("adam_step: parameter list does not match optimizer state");
  }
  for (const auto& p : params) {
    if (!grads.contains(p)) {
      throw ContractError("adam_step: missing gradient for parameter of shape " +
                          to_string(p.shape()));
    }
  }
  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(o.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(o.beta2, t));
  const T lr = static_cast<T>(o.learning_rate);
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T eps = static_cast<T>(o.eps), wd = static_cast<T>(o.weight_decay);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = grads.raw(params[k]);
    auto w = params[k].mutable_leaf_data();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != w.size()) throw ContractError("adam_step: moment shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      T gi = g[i];
      if (!o.decoupled_weight_decay) gi += wd * w[i];
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      T update = mhat / (std::sqrt(vhat) + eps);
      if (o.decoupled_weight_decay) update += wd * w[i];
      w[i] -= lr * update;
    }
  }
}

}  // namespace sleepdg::ad
