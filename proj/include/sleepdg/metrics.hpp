#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sleepdg/errors.hpp"

namespace sleepdg::metrics {

/// counts[truth][predicted].
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t n = 5) : classes(n), counts(n * n, 0) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * classes + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }

  void add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
    if (truth.size() != pred.size()) {
      throw ContractError("confusion matrix: " + std::to_string(truth.size()) + " labels vs " +
                          std::to_string(pred.size()) + " predictions");
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] >= classes || pred[i] >= classes) {
        throw ContractError("confusion matrix: class index out of range");
      }
      ++at(truth[i], pred[i]);
    }
  }
};

inline double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw ContractError("accuracy: no evaluated epochs");
  std::uint64_t hit = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) hit += cm.at(c, c);
  return static_cast<double>(hit) / static_cast<double>(total);
}

/// F1 per class; 0 for a class absent from both truth and prediction.
inline std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  std::vector<double> f1(cm.classes, 0.0);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < cm.classes; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = 2 * tp + fp + fn;
    f1[c] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return f1;
}

/// Unweighted mean of per-class F1.
inline double macro_f1(const ConfusionMatrix& cm) {
  const auto f1 = per_class_f1(cm);
  double s = 0.0;
  for (double v : f1) s += v;
  return s / static_cast<double>(cm.classes);
}

}  // namespace sleepdg::metrics
