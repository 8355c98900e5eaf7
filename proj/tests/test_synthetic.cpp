#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "sleepdg/data_io.hpp"
#include "sleepdg/synthetic.hpp"
#include "temp_dir.hpp"

namespace data = sleepdg::data;
namespace fs = std::filesystem;
using testing_support::TempDir;

namespace {

data::DomainSpec base_spec(std::uint64_t seed = 1) {
  auto s = data::DomainSpec::standard();
  s.seed = seed;
  return s;
}

/// Mean periodogram of one channel over all epochs of a stage; returns the peak bin.
std::size_t peak_bin(const data::DomainDataset& ds, std::uint8_t stage, std::size_t channel) {
  const std::size_t n = ds.spec.samples_per_epoch, ch = ds.spec.channels;
  std::vector<double> power(n / 2 + 1, 0.0);
  for (std::size_t e = 0; e < ds.epochs(); ++e) {
    if (ds.labels[e] != stage) continue;
    const float* x = ds.signals.data() + e * n * ch;
    for (std::size_t k = 1; k <= n / 2; ++k) {
      double re = 0.0, im = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = 2.0 * std::numbers::pi * static_cast<double>(k * j) / static_cast<double>(n);
        re += x[j * ch + channel] * std::cos(w);
        im -= x[j * ch + channel] * std::sin(w);
      }
      power[k] += re * re + im * im;
    }
  }
  return static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
}

}  // namespace

TEST(Generator, DeterministicPerSeed) {
  const auto a = data::generate_domain(base_spec(3), 10);
  const auto b = data::generate_domain(base_spec(3), 10);
  const auto c = data::generate_domain(base_spec(4), 10);
  EXPECT_EQ(a.signals, b.signals);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.signals, c.signals);
}

TEST(Generator, ShapesAndLabels) {
  const auto ds = data::generate_domain(base_spec(), 12);
  EXPECT_EQ(ds.signals.size(), 12u * 8 * 128 * 2);
  EXPECT_EQ(ds.labels.size(), 12u * 8);
  for (auto l : ds.labels) EXPECT_LT(l, data::kStages);
}

TEST(Generator, SequencesAreStandardizedPerChannel) {
  const auto ds = data::generate_domain(base_spec(), 6);
  const std::size_t per = ds.sequence_size() / 2;
  for (std::size_t q = 0; q < ds.count; ++q)
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0, v = 0.0;
      const float* x = ds.signals.data() + q * ds.sequence_size();
      for (std::size_t j = 0; j < per; ++j) m += x[j * 2 + c];
      m /= static_cast<double>(per);
      for (std::size_t j = 0; j < per; ++j) v += (x[j * 2 + c] - m) * (x[j * 2 + c] - m);
      EXPECT_NEAR(m, 0.0, 1e-5);
      EXPECT_NEAR(v / static_cast<double>(per), 1.0, 1e-4);
      EXPECT_GT(ds.norm_std[q * 2 + c], 0.0);
    }
}

TEST(Generator, StageFrequenciesMatchStationaryDistribution) {
  const auto spec = base_spec(5);
  const auto ds = data::generate_domain(spec, 600);
  const auto p = data::stationary_distribution(spec.transition);
  std::array<double, data::kStages> freq{};
  for (auto l : ds.labels) freq[l] += 1.0 / static_cast<double>(ds.labels.size());
  for (std::size_t s = 0; s < data::kStages; ++s) EXPECT_NEAR(freq[s], p[s], 0.04) << "stage " << s;
}

TEST(Generator, StationaryDistributionIsFixedPoint) {
  const auto t = data::DomainSpec::standard().transition;
  const auto p = data::stationary_distribution(t);
  double total = 0.0;
  for (std::size_t j = 0; j < data::kStages; ++j) {
    double q = 0.0;
    for (std::size_t i = 0; i < data::kStages; ++i) q += p[i] * t[i][j];
    EXPECT_NEAR(q, p[j], 1e-12);
    total += p[j];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

// At 32 Hz and 128 samples, bin k is k / 4 Hz. Frequencies jitter by 4%, so
// the alpha peak may land one bin off.
TEST(Generator, SlowWaveStagePeaksAtItsFrequency) {
  const auto ds = data::generate_domain(base_spec(6), 80);
  EXPECT_EQ(peak_bin(ds, 3, 0), 6u);   // N3, 1.5 Hz
  EXPECT_NEAR(static_cast<double>(peak_bin(ds, 0, 0)), 40.0, 1.0);  // W, 10 Hz
}

TEST(Generator, FrequencyOffsetMovesThePeak) {
  auto spec = base_spec(6);
  spec.frequency_offset = 1.0;
  const auto ds = data::generate_domain(spec, 80);
  EXPECT_EQ(peak_bin(ds, 3, 0), 10u);  // 2.5 Hz
}

TEST(Generator, ValidationRejectsBadSpecs) {
  auto s = base_spec();
  s.frequency_offset = 4.0;  // 13 Hz + 4 Hz passes Nyquist at 32 Hz
  EXPECT_THROW(s.validate(), sleepdg::ContractError);
  s = base_spec();
  s.transition[2][0] += 0.1;
  EXPECT_THROW(s.validate(), sleepdg::ContractError);
  EXPECT_THROW(data::generate_domain(base_spec(), 0), sleepdg::ContractError);
}

TEST(Benchmark, FiveDomainsWithScaledShifts) {
  const auto specs = data::benchmark_specs(0, 1.0);
  ASSERT_EQ(specs.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(specs[i].domain_id, i);
  EXPECT_EQ(specs[0].frequency_offset, 0.0);
  EXPECT_NE(specs[1].frequency_offset, 0.0);
  const auto zero = data::benchmark_specs(0, 0.0);
  for (const auto& s : zero) {
    EXPECT_EQ(s.frequency_offset, 0.0);
    EXPECT_EQ(s.mixing_angle, 0.0);
    EXPECT_EQ(s.noise_tilt, 1.0);
  }
  EXPECT_THROW(data::benchmark_specs(0, -1.0), sleepdg::ContractError);
}

TEST(Split, SizesAreDisjointAndSeeded) {
  auto ds = data::generate_domain(base_spec(), 20);
  // Tag each sequence with its index so the split can be traced.
  for (std::size_t q = 0; q < ds.count; ++q) ds.signals[q * ds.sequence_size()] = static_cast<float>(q);
  const auto [tr, va] = data::split_domain(ds, 0.8, 9);
  EXPECT_EQ(tr.count, 16u);
  EXPECT_EQ(va.count, 4u);
  std::set<float> seen;
  for (const auto* part : {&tr, &va})
    for (std::size_t q = 0; q < part->count; ++q) seen.insert(part->signals[q * ds.sequence_size()]);
  EXPECT_EQ(seen.size(), 20u);
  const auto again = data::split_domain(ds, 0.8, 9);
  EXPECT_EQ(again.first.signals, tr.signals);
  EXPECT_THROW(data::split_domain(ds, 0.99, 1), sleepdg::ContractError);
}

TEST(DatasetFile, RoundTrip) {
  TempDir dir;
  const auto ds = data::generate_domain(base_spec(), 5);
  data::write_dataset(dir.file("domain_0.bin"), ds);
  const auto back = data::read_dataset(dir.file("domain_0.bin"));
  EXPECT_EQ(back.signals, ds.signals);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.norm_mean, ds.norm_mean);
  EXPECT_EQ(nlohmann::json(back.spec), nlohmann::json(ds.spec));
}

TEST(DatasetFile, RegistryReadsHeadersOnly) {
  TempDir dir;
  for (std::size_t i = 0; i < 2; ++i) {
    auto spec = base_spec(i);
    spec.domain_id = i;
    data::write_dataset(dir.file(data::domain_file_name(i)), data::generate_domain(spec, 3));
  }
  const auto reg = data::DatasetRegistry::from_directory(dir.str());
  EXPECT_EQ(reg.ids(), (std::vector<std::size_t>{0, 1}));
  fs::resize_file(dir.file("domain_1.bin"), fs::file_size(dir.file("domain_1.bin")) - 10);
  EXPECT_NO_THROW(reg.load(0));
  EXPECT_THROW(reg.load(1), sleepdg::ContractError);
  EXPECT_THROW(reg.load(7), sleepdg::ContractError);
}

TEST(DatasetFile, DuplicateIdsRejected) {
  TempDir dir;
  const auto ds = data::generate_domain(base_spec(), 2);
  data::write_dataset(dir.file("a.bin"), ds);
  data::write_dataset(dir.file("b.bin"), ds);
  data::DatasetRegistry reg;
  reg.add(dir.file("a.bin"));
  EXPECT_THROW(reg.add(dir.file("b.bin")), sleepdg::ContractError);
  EXPECT_THROW(data::DatasetRegistry::from_directory(dir.file("missing")), sleepdg::ContractError);
}
