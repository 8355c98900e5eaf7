#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sleepdg/autodiff/grad_check.hpp"
#include "sleepdg/losses.hpp"
#include "sleepdg/model.hpp"

namespace sleepdg::gradcheck {

using ad::Tensor;
using TensorD = Tensor<double>;

struct TermResult {
  std::string name;
  double max_error = 0.0;
  std::size_t seeds = 0;
};

/// A small model that still has every kind of layer.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.samples_per_epoch = 16;
  c.channels = 2;
  c.sequence_length = 3;
  c.feature_dim = 8;
  c.conv_kernels = {3, 3};
  c.conv_widths = {3, 4};
  c.attention_layers = 1;
  c.attention_heads = 2;
  return c;
}

namespace detail {

inline TensorD random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return TensorD::from(std::move(shape), std::move(v));
}

inline TensorD random_one_hot(std::size_t batch, std::size_t len, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  std::vector<std::uint8_t> labels(batch * len);
  for (auto& l : labels) l = static_cast<std::uint8_t>(pick(rng));
  return loss::one_hot<double>(labels, {batch, len}, classes);
}

/// `per_domain` consecutive sequences per domain.
inline std::vector<std::size_t> tags(std::size_t domains, std::size_t per_domain) {
  std::vector<std::size_t> t;
  for (std::size_t d = 0; d < domains; ++d) t.insert(t.end(), per_domain, d);
  return t;
}

inline TensorD sequence_term(const TensorD& h, const std::vector<std::size_t>& t) {
  std::vector<TensorD> corr;
  for (const auto& g : loss::split_by_domain<double>(h, t)) corr.push_back(loss::domain_correlation(g));
  return loss::sequence_level_loss(corr);
}

inline TensorD full_objective(const SleepModel<double>& model, const TensorD& x, const TensorD& y,
                              const std::vector<std::size_t>& t) {
  const auto h = model.encode(x);
  loss::LossTerms<double> terms;
  terms.classify = loss::classification_loss(model.classify(h), y);
  terms.reconstruction = loss::reconstruction_loss(x, model.decode(h));
  const auto groups = loss::split_by_domain<double>(h, t);
  terms.epoch = loss::epoch_level_loss(loss::epoch_banks(groups));
  std::vector<TensorD> corr;
  for (const auto& g : groups) corr.push_back(loss::domain_correlation(g));
  terms.sequence = loss::sequence_level_loss(corr);
  return loss::total_loss(terms, loss::LossWeights{});
}

}  // namespace detail

/// Worst relative error of one named check at one seed.
inline double check_term(const std::string& name, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  using detail::random_tensor;
  if (name == "reconstruction") {
    auto x = random_tensor({2, 3, 4, 2}, rng);
    auto xh = random_tensor({2, 3, 4, 2}, rng);
    return ad::grad_check([](const auto& in) { return loss::reconstruction_loss(in[0], in[1]); }, {x, xh});
  }
  if (name == "epoch_first_order" || name == "epoch_second_order" || name == "epoch_level" ||
      name == "mmd" || name == "coral") {
    std::vector<TensorD> banks{random_tensor({6, 4}, rng), random_tensor({5, 4}, rng),
                               random_tensor({7, 4}, rng, -0.5, 1.5)};
    const double bandwidth = loss::median_bandwidth(banks);
    return ad::grad_check(
        [name, bandwidth](const std::vector<TensorD>& in) {
          if (name == "epoch_first_order") return loss::epoch_first_order(in);
          if (name == "epoch_second_order") return loss::epoch_second_order(in);
          if (name == "mmd") return loss::mmd_loss(in, loss::Pairs::unordered, bandwidth);
          if (name == "coral") return loss::coral_loss(in);
          return loss::epoch_level_loss(in);
        },
        banks);
  }
  if (name == "sequence_level") {
    auto h = random_tensor({6, 4, 5}, rng);
    const auto t = detail::tags(3, 2);
    return ad::grad_check([t](const auto& in) { return detail::sequence_term(in[0], t); }, {h});
  }
  if (name == "classification") {
    auto logits = random_tensor({2, 3, 5}, rng, -2.0, 2.0);
    auto y = detail::random_one_hot(2, 3, 5, rng);
    return ad::grad_check(
        [y](const auto& in) { return loss::classification_loss(ad::softmax(in[0], -1), y); }, {logits});
  }
  if (name == "total") {
    auto h = random_tensor({4, 3, 4}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto x = random_tensor({4, 3, 4, 2}, rng);
    auto xh = random_tensor({4, 3, 4, 2}, rng);
    auto y = detail::random_one_hot(4, 3, 5, rng);
    const auto t = detail::tags(2, 2);
    return ad::grad_check(
        [y, t](const std::vector<TensorD>& in) {
          loss::LossTerms<double> terms;
          terms.classify = loss::classification_loss(ad::softmax(ad::matmul(in[0], in[1]), -1), y);
          terms.reconstruction = loss::reconstruction_loss(in[2], in[3]);
          const auto groups = loss::split_by_domain<double>(in[0], t);
          terms.epoch = loss::epoch_level_loss(loss::epoch_banks(groups));
          terms.sequence = detail::sequence_term(in[0], t);
          return loss::total_loss(terms, loss::LossWeights{});
        },
        {h, w, x, xh});
  }
  if (name == "model") {
    const auto cfg = tiny_model_config();
    SleepModel<double> model(cfg, seed);
    auto x = random_tensor({4, cfg.sequence_length, cfg.samples_per_epoch, cfg.channels}, rng);
    auto y = detail::random_one_hot(4, cfg.sequence_length, cfg.num_stages, rng);
    const auto t = detail::tags(2, 2);
    std::vector<TensorD> leaves;
    for (const auto& [n, p] : model.named_parameters()) leaves.push_back(p);
    return ad::grad_check_leaves([&] { return detail::full_objective(model, x, y, t); }, leaves);
  }
  throw ContractError("grad-check: unknown term " + name);
}

inline const std::vector<std::string>& term_names() {
  static const std::vector<std::string> names{
      "reconstruction", "epoch_first_order", "epoch_second_order", "epoch_level", "sequence_level",
      "classification", "total", "mmd", "coral", "model"};
  return names;
}

/// Every term over `seeds` consecutive seeds starting at `base_seed`.
inline std::vector<TermResult> run_suite(std::size_t seeds, std::uint64_t base_seed = 0) {
  std::vector<TermResult> out;
  for (const auto& name : term_names()) {
    TermResult r{name, 0.0, seeds};
    for (std::size_t s = 0; s < seeds; ++s) r.max_error = std::max(r.max_error, check_term(name, base_seed + s));
    out.push_back(r);
  }
  return out;
}

}  // namespace sleepdg::gradcheck
