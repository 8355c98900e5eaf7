#pragma once

// Straight loop reference implementations. They share no code with the library.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;  // rows

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, std::vector<double>(cols));
  for (auto& r : m)
    for (auto& v : r) v = n(rng);
  return m;
}

inline std::vector<double> flatten(const Matrix& m) {
  std::vector<double> out;
  for (const auto& r : m) out.insert(out.end(), r.begin(), r.end());
  return out;
}

inline std::vector<double> mean(const Matrix& bank) {
  std::vector<double> mu(bank[0].size(), 0.0);
  for (const auto& r : bank)
    for (std::size_t k = 0; k < r.size(); ++k) mu[k] += r[k];
  for (auto& v : mu) v /= static_cast<double>(bank.size());
  return mu;
}

inline Matrix covariance(const Matrix& bank) {
  const auto mu = mean(bank);
  const std::size_t d = mu.size();
  Matrix c(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (const auto& r : bank) s += (r[i] - mu[i]) * (r[j] - mu[j]);
      c[i][j] = s / static_cast<double>(bank.size() - 1);
    }
  return c;
}

/// Correlation between rows k and t of an (L, d) block, computed across d.
inline Matrix pearson(const Matrix& seq, double eps) {
  const std::size_t len = seq.size(), d = seq[0].size();
  std::vector<double> mu(len, 0.0), var(len, 0.0);
  for (std::size_t k = 0; k < len; ++k) {
    for (double v : seq[k]) mu[k] += v;
    mu[k] /= static_cast<double>(d);
    for (double v : seq[k]) var[k] += (v - mu[k]) * (v - mu[k]);
    var[k] /= static_cast<double>(d);
  }
  Matrix r(len, std::vector<double>(len, 0.0));
  for (std::size_t k = 0; k < len; ++k)
    for (std::size_t t = 0; t < len; ++t) {
      if (k == t) {
        r[k][t] = 1.0;
        continue;
      }
      double c = 0.0;
      for (std::size_t j = 0; j < d; ++j) c += (seq[k][j] - mu[k]) * (seq[t][j] - mu[t]);
      c /= static_cast<double>(d);
      r[k][t] = c / std::sqrt((var[k] + eps) * (var[t] + eps));
    }
  return r;
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double frobenius_sq(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += squared_distance(a[i], b[i]);
  return s;
}

inline double first_order(const std::vector<Matrix>& banks) {
  double s = 0.0;
  for (std::size_t i = 0; i < banks.size(); ++i)
    for (std::size_t j = 0; j < banks.size(); ++j)
      if (i < j) s += squared_distance(mean(banks[i]), mean(banks[j]));
  return s;
}

inline double second_order(const std::vector<Matrix>& banks) {
  double s = 0.0;
  for (std::size_t i = 0; i < banks.size(); ++i)
    for (std::size_t j = 0; j < banks.size(); ++j)
      if (i < j) s += frobenius_sq(covariance(banks[i]), covariance(banks[j]));
  return s;
}

/// Mean correlation matrix of a domain's sequences, each an (L, d) block.
inline Matrix domain_correlation(const std::vector<Matrix>& sequences, double eps) {
  const std::size_t len = sequences[0].size();
  Matrix acc(len, std::vector<double>(len, 0.0));
  for (const auto& s : sequences) {
    const auto r = pearson(s, eps);
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t t = 0; t < len; ++t) acc[k][t] += r[k][t];
  }
  for (auto& row : acc)
    for (auto& v : row) v /= static_cast<double>(sequences.size());
  return acc;
}

inline double sequence_level(const std::vector<std::vector<Matrix>>& domains, double eps) {
  std::vector<Matrix> r;
  for (const auto& d : domains) r.push_back(domain_correlation(d, eps));
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = i + 1; j < r.size(); ++j) s += frobenius_sq(r[i], r[j]);
  return s;
}

/// probs laid out (B, L, N); labels (B, L).
inline double cross_entropy(const std::vector<double>& probs, const std::vector<std::uint8_t>& labels,
                            std::size_t batch, std::size_t len, std::size_t classes, double floor) {
  double s = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l) {
      const double p = probs[(b * len + l) * classes + labels[b * len + l]];
      s -= std::log(p > floor ? p : floor);
    }
  return s / static_cast<double>(batch);
}

struct Scores {
  std::vector<std::vector<std::uint64_t>> confusion;
  double acc = 0.0;
  double mf1 = 0.0;
};

/// Precision/recall formulation of per-class F1.
inline Scores score(const std::vector<std::uint8_t>& truth, const std::vector<std::uint8_t>& pred,
                    std::size_t classes) {
  Scores s;
  s.confusion.assign(classes, std::vector<std::uint64_t>(classes, 0));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++s.confusion[truth[i]][pred[i]];
    if (truth[i] == pred[i]) ++hits;
  }
  s.acc = static_cast<double>(hits) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    double tp = 0, predicted = 0, actual = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == c && pred[i] == c) ++tp;
      if (pred[i] == c) ++predicted;
      if (truth[i] == c) ++actual;
    }
    if (tp == 0) continue;
    const double precision = tp / predicted, recall = tp / actual;
    f1_sum += 2 * precision * recall / (precision + recall);
  }
  s.mf1 = f1_sum / static_cast<double>(classes);
  return s;
}

}  // namespace oracle
