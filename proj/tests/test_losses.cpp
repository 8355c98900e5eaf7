#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sleepdg/gradient_suite.hpp"
#include "sleepdg/losses.hpp"

namespace ad = sleepdg::ad;
namespace loss = sleepdg::loss;
using TD = ad::Tensor<double>;

namespace {

constexpr double kOracleTol = 1e-10;

TD to_tensor(const oracle::Matrix& m) { return TD::from({m.size(), m[0].size()}, oracle::flatten(m)); }

/// (k, L, d) tensor from k sequences of (L, d).
TD to_tensor(const std::vector<oracle::Matrix>& seqs) {
  std::vector<double> v;
  for (const auto& s : seqs) {
    const auto f = oracle::flatten(s);
    v.insert(v.end(), f.begin(), f.end());
  }
  return TD::from({seqs.size(), seqs[0].size(), seqs[0][0].size()}, std::move(v));
}

std::vector<oracle::Matrix> random_banks(std::mt19937_64& rng, std::size_t domains, std::size_t d) {
  std::uniform_int_distribution<std::size_t> rows(2, 7);
  std::vector<oracle::Matrix> banks;
  for (std::size_t i = 0; i < domains; ++i) banks.push_back(oracle::random_matrix(rows(rng), d, rng, 1.0 + i));
  return banks;
}

std::vector<TD> tensors(const std::vector<oracle::Matrix>& banks) {
  std::vector<TD> out;
  for (const auto& b : banks) out.push_back(to_tensor(b));
  return out;
}

}  // namespace

TEST(LossOracle, MeanAndCovariance) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto bank = oracle::random_matrix(2 + trial % 6, 1 + trial % 5, rng);
    const auto mu = loss::bank_mean(to_tensor(bank));
    const auto cov = loss::bank_covariance(to_tensor(bank));
    const auto emu = oracle::mean(bank);
    const auto ecov = oracle::flatten(oracle::covariance(bank));
    for (std::size_t i = 0; i < emu.size(); ++i) EXPECT_NEAR(mu[i], emu[i], kOracleTol);
    for (std::size_t i = 0; i < ecov.size(); ++i) EXPECT_NEAR(cov[i], ecov[i], kOracleTol);
  }
}

TEST(LossOracle, EpochDiscrepancies) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto banks = random_banks(rng, 2 + trial % 4, 1 + trial % 6);
    EXPECT_NEAR(loss::epoch_first_order(tensors(banks)).item(), oracle::first_order(banks), kOracleTol);
    EXPECT_NEAR(loss::epoch_second_order(tensors(banks)).item(), oracle::second_order(banks), kOracleTol);
  }
}

TEST(LossOracle, PearsonAndSequenceLevel) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = 2 + trial % 4, d = 2 + trial % 5, domains = 2 + trial % 3;
    std::vector<std::vector<oracle::Matrix>> doms(domains);
    std::vector<TD> corr;
    for (auto& dom : doms) {
      for (std::size_t k = 0; k < 1 + trial % 3; ++k) dom.push_back(oracle::random_matrix(len, d, rng));
      const auto seqs = to_tensor(dom);
      const auto r = loss::pearson_matrix(seqs);
      for (std::size_t k = 0; k < dom.size(); ++k) {
        const auto expected = oracle::flatten(oracle::pearson(dom[k], loss::kPearsonEps));
        for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(r[k * len * len + i], expected[i], kOracleTol);
      }
      corr.push_back(loss::domain_correlation(seqs));
    }
    EXPECT_NEAR(loss::sequence_level_loss(corr).item(), oracle::sequence_level(doms, loss::kPearsonEps),
                kOracleTol);
  }
}

TEST(LossOracle, CrossEntropy) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + trial % 4, len = 1 + trial % 5, n = 5;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(b * len * n);
    for (std::size_t r = 0; r < b * len; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += p[r * n + c] = (trial % 7 == 0 && c == 0) ? 0.0 : u(rng);
      for (std::size_t c = 0; c < n; ++c) p[r * n + c] /= s;
    }
    std::vector<std::uint8_t> y(b * len);
    for (auto& v : y) v = static_cast<std::uint8_t>(rng() % n);
    const auto got = loss::classification_loss(TD::from({b, len, n}, p), loss::one_hot<double>(y, {b, len}, n));
    EXPECT_NEAR(got.item(), oracle::cross_entropy(p, y, b, len, n, loss::kLogFloor), kOracleTol);
  }
}

TEST(LossOracle, Reconstruction) {
  auto x = TD::from({1, 2, 2, 1}, {1, 2, 3, 4});
  auto xh = TD::from({1, 2, 2, 1}, {0, 2, 3, 2});
  // (1 + 0) + (0 + 4) over B * L = 2 epochs.
  EXPECT_DOUBLE_EQ(loss::reconstruction_loss(x, xh).item(), 2.5);
}

TEST(LossProperties, PearsonIsSymmetricBoundedUnitDiagonal) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto seq = oracle::random_matrix(6, 9, rng);
    const auto r = loss::pearson_matrix(to_tensor(seq));
    for (std::size_t k = 0; k < 6; ++k) {
      EXPECT_EQ(r[k * 6 + k], 1.0);
      for (std::size_t t = 0; t < 6; ++t) {
        EXPECT_EQ(r[k * 6 + t], r[t * 6 + k]);
        EXPECT_LE(std::abs(r[k * 6 + t]), 1.0);
      }
    }
  }
}

TEST(LossProperties, ConstantEpochsHaveZeroOffDiagonal) {
  const auto r = loss::pearson_matrix(TD::from({2, 3}, {1, 1, 1, 4, 5, 6}));
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[0], 1.0);
}

TEST(LossProperties, DomainOrderDoesNotMatter) {
  std::mt19937_64 rng(6);
  auto banks = random_banks(rng, 4, 3);
  const double a = loss::epoch_level_loss(tensors(banks)).item();
  std::swap(banks[0], banks[3]);
  std::swap(banks[1], banks[2]);
  EXPECT_NEAR(loss::epoch_level_loss(tensors(banks)).item(), a, 1e-12);
}

TEST(LossProperties, OrderedPairsDouble) {
  std::mt19937_64 rng(7);
  const auto t = tensors(random_banks(rng, 3, 4));
  EXPECT_DOUBLE_EQ(loss::epoch_level_loss(t, loss::Pairs::ordered).item(), 2 * loss::epoch_level_loss(t).item());
}

TEST(LossProperties, IdenticalDomainsAlignPerfectly) {
  std::mt19937_64 rng(8);
  const auto bank = to_tensor(oracle::random_matrix(10, 4, rng));
  EXPECT_EQ(loss::epoch_level_loss<double>({bank, bank, bank}).item(), 0.0);
  EXPECT_NEAR(loss::mmd_loss<double>({bank, bank}).item(), 0.0, 1e-12);
  const auto r = loss::domain_correlation(ad::reshape(bank, {2, 5, 4}));
  EXPECT_EQ(loss::sequence_level_loss<double>({r, r}).item(), 0.0);
}

TEST(LossProperties, TranslationOnlyMovesFirstOrder) {
  std::mt19937_64 rng(9);
  auto a = oracle::random_matrix(8, 3, rng), b = a;
  for (auto& row : b) row[1] += 2.0;
  const auto t = tensors({a, b});
  EXPECT_NEAR(loss::epoch_first_order(t).item(), 4.0, 1e-12);
  EXPECT_NEAR(loss::epoch_second_order(t).item(), 0.0, 1e-12);
}

TEST(LossProperties, CoralIsScaledSecondOrder) {
  std::mt19937_64 rng(10);
  const auto t = tensors(random_banks(rng, 3, 5));
  EXPECT_NEAR(loss::coral_loss(t).item(), loss::epoch_second_order(t).item() / (4.0 * 25.0), 1e-14);
}

TEST(LossProperties, MmdGrowsWithShift) {
  std::mt19937_64 rng(11);
  auto a = oracle::random_matrix(30, 2, rng), b = oracle::random_matrix(30, 2, rng);
  const double base = loss::mmd_loss(tensors({a, b})).item();
  for (auto& row : b) row[0] += 3.0;
  EXPECT_GT(loss::mmd_loss(tensors({a, b})).item(), base);
}

TEST(LossContracts, Errors) {
  const auto one = TD::zeros({3, 2});
  EXPECT_THROW(loss::epoch_first_order<double>({one}), sleepdg::ContractError);
  EXPECT_THROW(loss::bank_covariance(TD::zeros({1, 2})), sleepdg::ContractError);
  EXPECT_THROW(loss::reconstruction_loss(TD::zeros({1, 2, 3, 1}), TD::zeros({1, 2, 3, 2})), sleepdg::ShapeError);
  auto bad = TD::from({1, 1, 3}, {0.5, 0.5, 0.0});
  EXPECT_THROW(loss::classification_loss(TD::full({1, 1, 3}, 1.0 / 3), bad), sleepdg::ContractError);
}

TEST(LossContracts, TotalLossNamesNonFiniteTerm) {
  loss::LossTerms<double> t;
  t.classify = TD::scalar(1.0);
  t.epoch = TD::scalar(std::nan(""));
  try {
    loss::total_loss(t, {});
    FAIL();
  } catch (const sleepdg::ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(LossContracts, NegativeWeightRejected) {
  loss::LossWeights w;
  w.sequence = -0.1;
  EXPECT_THROW(w.validate(), sleepdg::ContractError);
}

TEST(LossTotal, WeightsCombineTerms) {
  loss::LossTerms<double> t{TD::scalar(1.0), TD::scalar(2.0), TD::scalar(4.0), TD::scalar(8.0)};
  EXPECT_DOUBLE_EQ(loss::total_loss(t, {}).item(), 1.0 + 0.5 * 14.0);
  EXPECT_DOUBLE_EQ(loss::total_loss(t, {0.0, 1.0, 0.0}).item(), 5.0);
  loss::LossTerms<double> only{TD::scalar(1.5), {}, {}, {}};
  EXPECT_DOUBLE_EQ(loss::total_loss(only, {}).item(), 1.5);
}

TEST(SplitByDomain, GroupsInTagOrder) {
  auto x = TD::from({5, 1}, {0, 1, 2, 3, 4});
  const std::vector<std::size_t> tags{2, 0, 2, 0, 1};
  const auto g = loss::split_by_domain<double>(x, tags);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].values(), (std::vector<double>{1, 3}));
  EXPECT_EQ(g[1].values(), (std::vector<double>{4}));
  EXPECT_EQ(g[2].values(), (std::vector<double>{0, 2}));
  EXPECT_THROW(loss::split_by_domain<double>(x, std::vector<std::size_t>{0, 1}), sleepdg::ShapeError);
}

class TermGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(TermGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    EXPECT_LT(sleepdg::gradcheck::check_term(GetParam(), seed), 1e-6) << GetParam() << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Terms, TermGradient,
                         ::testing::Values("reconstruction", "epoch_first_order", "epoch_second_order",
                                           "epoch_level", "sequence_level", "classification", "total", "mmd",
                                           "coral"));
