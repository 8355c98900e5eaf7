#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sleepdg/metrics.hpp"

namespace metrics = sleepdg::metrics;

TEST(Metrics, MatchesOracleOnRandomLabels) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 60;
    std::vector<std::uint8_t> truth(n), pred(n);
    // Some trials leave classes out entirely.
    const std::size_t used = 1 + trial % 5;
    for (auto& t : truth) t = static_cast<std::uint8_t>(rng() % used);
    for (auto& p : pred) p = static_cast<std::uint8_t>(rng() % 5);
    metrics::ConfusionMatrix cm(5);
    cm.add(truth, pred);
    const auto expected = oracle::score(truth, pred, 5);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(cm.at(t, p), expected.confusion[t][p]);
    EXPECT_NEAR(metrics::accuracy(cm), expected.acc, 1e-10);
    EXPECT_NEAR(metrics::macro_f1(cm), expected.mf1, 1e-10);
  }
}

TEST(Metrics, AbsentClassCountsAsZero) {
  metrics::ConfusionMatrix cm(5);
  const std::vector<std::uint8_t> y{0, 1, 0, 1};
  cm.add(y, y);
  EXPECT_DOUBLE_EQ(metrics::accuracy(cm), 1.0);
  EXPECT_DOUBLE_EQ(metrics::macro_f1(cm), 2.0 / 5.0);
  EXPECT_EQ(metrics::per_class_f1(cm)[4], 0.0);
}

TEST(Metrics, HandWorkedExample) {
  metrics::ConfusionMatrix cm(2);
  cm.add(std::vector<std::uint8_t>{0, 0, 0, 1}, std::vector<std::uint8_t>{0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(metrics::accuracy(cm), 0.75);
  const auto f1 = metrics::per_class_f1(cm);
  EXPECT_DOUBLE_EQ(f1[0], 0.8);
  EXPECT_NEAR(f1[1], 2.0 / 3.0, 1e-15);
}

TEST(Metrics, Contracts) {
  metrics::ConfusionMatrix cm(5);
  EXPECT_THROW(metrics::accuracy(cm), sleepdg::ContractError);
  EXPECT_THROW(cm.add(std::vector<std::uint8_t>{1}, std::vector<std::uint8_t>{}), sleepdg::ContractError);
  EXPECT_THROW(cm.add(std::vector<std::uint8_t>{7}, std::vector<std::uint8_t>{0}), sleepdg::ContractError);
}
