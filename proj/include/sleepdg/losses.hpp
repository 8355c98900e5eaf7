#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sleepdg/autodiff/ops.hpp"
#include "sleepdg/autodiff/tensor.hpp"
#include "sleepdg/errors.hpp"

namespace sleepdg::loss {

using ad::Shape;
using ad::Tensor;

inline constexpr double kPearsonEps = 1e-8;
inline constexpr double kLogFloor = 1e-12;
inline constexpr double kCoralNormalizer = 4.0;

/// How domain pairs enter the pairwise discrepancy sums.
enum class Pairs { unordered, ordered };

struct LossWeights {
  double reconstruction = 0.5;  // lambda1
  double epoch = 0.5;           // lambda2
  double sequence = 0.5;        // lambda3

  void validate() const {
    auto check = [](double v, const char* name) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ContractError(std::string("loss_weights.") + name + ": must be finite and >= 0");
      }
    };
    check(reconstruction, "reconstruction");
    check(epoch, "epoch");
    check(sequence, "sequence");
  }
};

namespace detail {

template <class T>
Tensor<T> pair_sum(std::size_t count, Pairs pairs, auto&& term) {
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = i + 1; j < count; ++j) total = ad::add(total, term(i, j));
  if (pairs == Pairs::ordered) total = ad::mul_scalar(total, T(2));
  return total;
}

template <class T>
void require_domains(const std::vector<Tensor<T>>& banks, const char* op) {
  if (banks.size() < 2) {
    throw ContractError(std::string(op) + ": needs at least 2 domains, got " +
                        std::to_string(banks.size()));
  }
}

template <class T>
void require_bank(const Tensor<T>& b, std::size_t min_rows, const char* op) {
  if (b.rank() != 2) throw ShapeError(std::string(op) + ": bank must be (count, d)");
  if (b.dim(0) < min_rows) {
    throw ContractError(std::string(op) + ": domain bank has " + std::to_string(b.dim(0)) +
                        " rows, needs at least " + std::to_string(min_rows));
  }
}

}  // namespace detail

/// Groups the sequences of a batch (B, ...) by domain tag. Returns one tensor
/// per distinct tag in ascending tag order, each holding that domain's rows.
template <class T>
std::vector<Tensor<T>> split_by_domain(const Tensor<T>& batch, std::span<const std::size_t> tags) {
  if (batch.rank() == 0 || batch.dim(0) != tags.size()) {
    throw ShapeError("split_by_domain: " + std::to_string(tags.size()) + " tags for batch " +
                     ad::to_string(batch.shape()));
  }
  std::vector<std::size_t> ids(tags.begin(), tags.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<Tensor<T>> out;
  for (auto id : ids) {
    std::vector<Tensor<T>> runs;
    std::size_t i = 0;
    while (i < tags.size()) {
      if (tags[i] != id) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < tags.size() && tags[j] == id) ++j;
      runs.push_back(ad::slice(batch, 0, i, j));
      i = j;
    }
    out.push_back(runs.size() == 1 ? runs[0] : ad::concat(runs, 0));
  }
  return out;
}

/// Flattens per-domain sequence features (k, L, d) into epoch banks (k * L, d).
template <class T>
std::vector<Tensor<T>> epoch_banks(const std::vector<Tensor<T>>& domain_sequences) {
  std::vector<Tensor<T>> banks;
  for (const auto& s : domain_sequences) {
    if (s.rank() != 3) throw ShapeError("epoch_banks: expected (k, L, d), got " + ad::to_string(s.shape()));
    banks.push_back(ad::reshape(s, {s.dim(0) * s.dim(1), s.dim(2)}));
  }
  return banks;
}

/// Sum of squared per-epoch difference norms divided by B * L.
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_hat) {
  if (x.shape() != x_hat.shape() || x.rank() != 4) {
    throw ShapeError("reconstruction_loss: expected equal (B, L, n, C) shapes, got " +
                     ad::to_string(x.shape()) + " and " + ad::to_string(x_hat.shape()));
  }
  const T epochs = static_cast<T>(x.dim(0) * x.dim(1));
  return ad::mul_scalar(ad::sum(ad::square(ad::sub(x, x_hat))), T(1) / epochs);
}

/// Column means of a bank (count, d) -> (d).
template <class T>
Tensor<T> bank_mean(const Tensor<T>& bank) {
  detail::require_bank(bank, 1, "bank_mean");
  return ad::mean(bank, 0);
}

/// Sample covariance of a bank (count, d) -> (d, d), divisor count - 1.
template <class T>
Tensor<T> bank_covariance(const Tensor<T>& bank) {
  detail::require_bank(bank, 2, "bank_covariance");
  auto centered = ad::sub(bank, ad::mean(bank, 0, true));
  return ad::mul_scalar(ad::matmul(ad::transpose(centered, 0, 1), centered),
                        T(1) / static_cast<T>(bank.dim(0) - 1));
}

template <class T>
Tensor<T> epoch_first_order(const std::vector<Tensor<T>>& banks, Pairs pairs = Pairs::unordered) {
  detail::require_domains(banks, "epoch_first_order");
  std::vector<Tensor<T>> means;
  for (const auto& b : banks) means.push_back(bank_mean(b));
  return detail::pair_sum<T>(means.size(), pairs, [&](std::size_t i, std::size_t j) {
    return ad::sum(ad::square(ad::sub(means[i], means[j])));
  });
}

template <class T>
Tensor<T> epoch_second_order(const std::vector<Tensor<T>>& banks, Pairs pairs = Pairs::unordered) {
  detail::require_domains(banks, "epoch_second_order");
  std::vector<Tensor<T>> covs;
  for (const auto& b : banks) covs.push_back(bank_covariance(b));
  return detail::pair_sum<T>(covs.size(), pairs, [&](std::size_t i, std::size_t j) {
    return ad::sum(ad::square(ad::sub(covs[i], covs[j])));
  });
}

template <class T>
Tensor<T> epoch_level_loss(const std::vector<Tensor<T>>& banks, Pairs pairs = Pairs::unordered) {
  return ad::add(epoch_first_order(banks, pairs), epoch_second_order(banks, pairs));
}

/// Pearson correlation between the L epoch vectors of each sequence, taken
/// across the d coordinates: (..., L, d) -> (..., L, L).
/// rho = c / sqrt((v_k + eps)(v_t + eps)) with population moments; the
/// diagonal is exactly 1.
template <class T>
Tensor<T> pearson_matrix(const Tensor<T>& h, T eps = T(kPearsonEps)) {
  if (h.rank() < 2) throw ShapeError("pearson_matrix: expected (..., L, d)");
  const std::size_t len = h.dim(h.rank() - 2), d = h.dim(h.rank() - 1);
  if (len < 2 || d < 2) throw ShapeError("pearson_matrix: needs L >= 2 and d >= 2");
  const std::size_t batch = h.size() / (len * d);
  auto x = ad::reshape(h, {batch, len, d});
  auto centered = ad::sub(x, ad::mean(x, -1, true));
  auto var = ad::mean(ad::square(centered), -1, true);
  auto z = ad::div(centered, ad::sqrt(ad::add_scalar(var, eps)));
  auto r = ad::mul_scalar(ad::matmul(z, ad::transpose(z, 1, 2)), T(1) / static_cast<T>(d));
  std::vector<T> off(len * len, T(1)), diag(len * len, T(0));
  for (std::size_t k = 0; k < len; ++k) {
    off[k * len + k] = T(0);
    diag[k * len + k] = T(1);
  }
  r = ad::add(ad::mul(r, Tensor<T>::from({len, len}, std::move(off))),
              Tensor<T>::from({len, len}, std::move(diag)));
  Shape out_shape(h.shape().begin(), h.shape().end() - 1);
  out_shape.push_back(len);
  return ad::reshape(r, out_shape);
}

/// Mean correlation matrix over one domain's sequences (k, L, d) -> (L, L).
template <class T>
Tensor<T> domain_correlation(const Tensor<T>& sequences, T eps = T(kPearsonEps)) {
  if (sequences.rank() != 3) {
    throw ShapeError("domain_correlation: expected (k, L, d), got " + ad::to_string(sequences.shape()));
  }
  if (sequences.dim(0) == 0) throw ContractError("domain_correlation: empty domain");
  return ad::mean(pearson_matrix(sequences, eps), 0);
}

template <class T>
Tensor<T> sequence_level_loss(const std::vector<Tensor<T>>& correlations,
                              Pairs pairs = Pairs::unordered) {
  detail::require_domains(correlations, "sequence_level_loss");
  for (const auto& r : correlations) {
    if (r.shape() != correlations[0].shape() || r.rank() != 2) {
      throw ShapeError("sequence_level_loss: correlation matrices must share an (L, L) shape");
    }
  }
  return detail::pair_sum<T>(correlations.size(), pairs, [&](std::size_t i, std::size_t j) {
    return ad::sum(ad::square(ad::sub(correlations[i], correlations[j])));
  });
}

/// One-hot encoding of integer labels (B, L) -> (B, L, classes).
template <class T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels, Shape label_shape, std::size_t classes) {
  if (ad::numel(label_shape) != labels.size()) throw ShapeError("one_hot: label count mismatch");
  std::vector<T> v(labels.size() * classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    }
    v[i * classes + labels[i]] = T(1);
  }
  label_shape.push_back(classes);
  return Tensor<T>::from(std::move(label_shape), std::move(v));
}

/// Cross-entropy summed over the L epochs of each sequence, averaged over the batch.
template <class T>
Tensor<T> classification_loss(const Tensor<T>& probs, const Tensor<T>& targets,
                              T log_floor = T(kLogFloor)) {
  if (probs.rank() != 3 || probs.shape() != targets.shape()) {
    throw ShapeError("classification_loss: expected equal (B, L, N) shapes, got " +
                     ad::to_string(probs.shape()) + " and " + ad::to_string(targets.shape()));
  }
  const std::size_t classes = probs.dim(2);
  const auto& y = targets.values();
  for (std::size_t r = 0; r < y.size() / classes; ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const T v = y[r * classes + c];
      if (v == T(1)) {
        ++ones;
      } else if (v != T(0)) {
        ones = 2;
        break;
      }
    }
    if (ones != 1) {
      throw ContractError("classification_loss: label row " + std::to_string(r) + " is not one-hot");
    }
  }
  auto nll = ad::mul(targets.detach(), ad::log_guarded(probs, log_floor));
  return ad::mul_scalar(ad::sum(nll), T(-1) / static_cast<T>(probs.dim(0)));
}

/// The four loss terms of one step. Inactive terms may be left undefined.
template <class T>
struct LossTerms {
  Tensor<T> classify, reconstruction, epoch, sequence;
};

/// classify + l1 * reconstruction + l2 * epoch + l3 * sequence.
/// Undefined terms count as 0.
template <class T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& w) {
  w.validate();
  auto check = [](const Tensor<T>& t, const char* name) {
    if (!t.defined()) return;
    if (t.size() != 1) throw ShapeError(std::string("total_loss: term ") + name + " is not scalar");
    if (!std::isfinite(static_cast<double>(t.data()[0]))) {
      throw ContractError(std::string("total_loss: non-finite ") + name + " term");
    }
  };
  if (!terms.classify.defined()) throw ContractError("total_loss: classification term missing");
  check(terms.classify, "classification");
  check(terms.reconstruction, "reconstruction");
  check(terms.epoch, "epoch");
  check(terms.sequence, "sequence");
  auto weighted = [](const Tensor<T>& t, double lambda) {
    if (!t.defined()) return Tensor<T>::scalar(T(0));
    return ad::mul_scalar(ad::reshape(t, {}), static_cast<T>(lambda));
  };
  auto total = ad::reshape(terms.classify, {});
  total = ad::add(total, weighted(terms.reconstruction, w.reconstruction));
  total = ad::add(total, weighted(terms.epoch, w.epoch));
  total = ad::add(total, weighted(terms.sequence, w.sequence));
  return total;
}

namespace detail {

/// Pairwise squared distances between rows of a (m, d) and b (k, d).
template <class T>
Tensor<T> squared_distances(const Tensor<T>& a, const Tensor<T>& b) {
  auto an = ad::sum(ad::square(a), 1, true);
  auto bn = ad::reshape(ad::sum(ad::square(b), 1), {1, b.dim(0)});
  auto cross = ad::matmul(a, ad::transpose(b, 0, 1));
  return ad::sub(ad::add(an, bn), ad::mul_scalar(cross, T(2)));
}

}  // namespace detail

/// Median of squared distances over distinct row pairs of the pooled banks.
template <class T>
double median_bandwidth(const std::vector<Tensor<T>>& banks) {
  std::vector<const T*> rows;
  std::size_t d = 0;
  for (const auto& b : banks) {
    d = b.dim(1);
    for (std::size_t r = 0; r < b.dim(0); ++r) rows.push_back(b.data().data() + r * d);
  }
  std::vector<double> dist;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(rows[i][k]) - static_cast<double>(rows[j][k]);
        s += diff * diff;
      }
      dist.push_back(s);
    }
  if (dist.empty()) return 1.0;
  const auto mid = dist.begin() + static_cast<long>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  return *mid > 0.0 ? *mid : 1.0;
}

/// Pairwise-summed squared MMD with the Gaussian kernel exp(-|a - b|^2 / (2 s)).
/// s is `bandwidth` when positive, otherwise the median squared distance of the
/// pooled samples; either way it is a constant for differentiation.
template <class T>
Tensor<T> mmd_loss(const std::vector<Tensor<T>>& banks, Pairs pairs = Pairs::unordered,
                   double bandwidth = 0.0) {
  detail::require_domains(banks, "mmd_loss");
  for (const auto& b : banks) detail::require_bank(b, 1, "mmd_loss");
  const double s = bandwidth > 0.0 ? bandwidth : median_bandwidth(banks);
  const T scale = static_cast<T>(-1.0 / (2.0 * s));
  auto kernel_mean = [&](const Tensor<T>& a, const Tensor<T>& b) {
    return ad::mean(ad::exp(ad::mul_scalar(detail::squared_distances(a, b), scale)));
  };
  std::vector<Tensor<T>> self;
  for (const auto& b : banks) self.push_back(kernel_mean(b, b));
  return detail::pair_sum<T>(banks.size(), pairs, [&](std::size_t i, std::size_t j) {
    return ad::sub(ad::add(self[i], self[j]), ad::mul_scalar(kernel_mean(banks[i], banks[j]), T(2)));
  });
}

/// epoch_second_order / (normalizer * d^2).
template <class T>
Tensor<T> coral_loss(const std::vector<Tensor<T>>& banks, Pairs pairs = Pairs::unordered,
                     double normalizer = kCoralNormalizer) {
  detail::require_domains(banks, "coral_loss");
  const double d = static_cast<double>(banks[0].dim(1));
  return ad::mul_scalar(epoch_second_order(banks, pairs), static_cast<T>(1.0 / (normalizer * d * d)));
}

}  // namespace sleepdg::loss
