#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sleepdg/errors.hpp"

namespace sleepdg::data {

inline constexpr std::size_t kStages = 5;
inline const std::array<const char*, kStages> kStageNames{"W", "N1", "N2", "N3", "REM"};

/// One oscillatory ingredient of a stage's waveform.
struct Oscillation {
  double frequency = 1.0;  // Hz
  double amplitude = 1.0;
  std::size_t channel = 0;
  bool burst = false;  // Gaussian-windowed instead of sustained
};

struct DomainSpec {
  std::size_t domain_id = 0;
  double sample_rate = 32.0;
  std::size_t samples_per_epoch = 128;
  std::size_t channels = 2;
  std::size_t sequence_length = 8;
  std::array<std::vector<Oscillation>, kStages> stages;
  double frequency_offset = 0.0;  // Hz, added to every oscillation
  double noise_tilt = 1.0;        // noise power ~ 1 / f^tilt
  double noise_level = 0.5;
  double asymmetry = 0.0;   // second-harmonic coefficient (harmonics below Nyquist only)
  double mixing_angle = 0.0;  // radians, rotation of the two channels
  std::array<std::array<double, kStages>, kStages> transition{};
  std::uint64_t seed = 0;

  /// Stage semantics shared by every benchmark domain.
  static DomainSpec standard() {
    DomainSpec s;
    s.stages[0] = {{10.0, 1.0, 0, false}, {13.0, 0.5, 0, false}, {1.2, 0.8, 1, false}};
    s.stages[1] = {{6.0, 1.0, 0, false}, {1.0, 0.5, 1, false}};
    s.stages[2] = {{4.0, 0.8, 0, false}, {12.0, 1.0, 0, true}};
    s.stages[3] = {{1.5, 2.0, 0, false}, {3.0, 0.5, 0, false}};
    s.stages[4] = {{5.0, 0.8, 0, false}, {2.0, 1.0, 1, true}};
    s.transition = {{{0.60, 0.25, 0.05, 0.02, 0.08},
                     {0.15, 0.45, 0.30, 0.02, 0.08},
                     {0.04, 0.08, 0.55, 0.25, 0.08},
                     {0.02, 0.03, 0.30, 0.63, 0.02},
                     {0.10, 0.15, 0.10, 0.00, 0.65}}};
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ContractError("domain_spec." + field + ": " + why);
    };
    if (!(sample_rate > 0.0)) fail("sample_rate", "must be positive");
    if (samples_per_epoch < 4) fail("samples_per_epoch", "must be at least 4");
    if (channels != 2) fail("channels", "the generator mixes exactly 2 channels");
    if (sequence_length == 0) fail("sequence_length", "must be positive");
    if (!(noise_level >= 0.0)) fail("noise_level", "must be non-negative");
    if (!std::isfinite(noise_tilt)) fail("noise_tilt", "must be finite");
    const double nyquist = sample_rate / 2.0;
    for (std::size_t s = 0; s < kStages; ++s) {
      if (stages[s].empty()) fail("stages", "stage " + std::to_string(s) + " has no oscillation");
      for (const auto& o : stages[s]) {
        const double f = o.frequency + frequency_offset;
        if (!(f > 0.0 && f < nyquist)) {
          fail("stages", "shifted frequency " + std::to_string(f) + " Hz outside (0, " +
                             std::to_string(nyquist) + ")");
        }
        if (o.channel >= channels) fail("stages", "oscillation channel out of range");
        if (!(o.amplitude >= 0.0)) fail("stages", "amplitude must be non-negative");
      }
    }
    for (std::size_t i = 0; i < kStages; ++i) {
      double row = 0.0;
      for (double p : transition[i]) {
        if (!(p >= 0.0)) fail("transition", "probabilities must be non-negative");
        row += p;
      }
      if (std::abs(row - 1.0) > 1e-9) {
        fail("transition", "row " + std::to_string(i) + " sums to " + std::to_string(row));
      }
    }
  }
};

/// Stationary distribution of a transition matrix by power iteration.
inline std::array<double, kStages> stationary_distribution(
    const std::array<std::array<double, kStages>, kStages>& t) {
  std::array<double, kStages> p;
  p.fill(1.0 / kStages);
  for (int it = 0; it < 10000; ++it) {
    std::array<double, kStages> q{};
    for (std::size_t i = 0; i < kStages; ++i)
      for (std::size_t j = 0; j < kStages; ++j) q[j] += p[i] * t[i][j];
    double diff = 0.0;
    for (std::size_t j = 0; j < kStages; ++j) diff += std::abs(q[j] - p[j]);
    p = q;
    if (diff < 1e-15) break;
  }
  return p;
}

struct DomainDataset {
  DomainSpec spec;
  std::size_t count = 0;
  std::vector<float> signals;          // (count, L, n, C)
  std::vector<std::uint8_t> labels;    // (count, L)
  std::vector<double> norm_mean;       // (count, C), before z-scoring
  std::vector<double> norm_std;        // (count, C)

  std::size_t sequence_size() const {
    return spec.sequence_length * spec.samples_per_epoch * spec.channels;
  }
  std::size_t epochs() const { return count * spec.sequence_length; }
};

namespace detail {

/// Unit-variance noise with power spectrum ~ 1 / f^tilt, synthesised from
/// random Fourier coefficients on precomputed tables.
class ColoredNoise {
 public:
  ColoredNoise(std::size_t n, double sample_rate, double tilt) : n_(n), bins_(n / 2) {
    cos_.resize(n_ * bins_);
    sin_.resize(n_ * bins_);
    amp_.resize(bins_);
    double power = 0.0;
    for (std::size_t k = 1; k <= bins_; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_);
      amp_[k - 1] = std::pow(f, -tilt / 2.0);
      power += amp_[k - 1] * amp_[k - 1];
    }
    const double norm = 1.0 / std::sqrt(power);
    for (auto& a : amp_) a *= norm;
    for (std::size_t j = 0; j < n_; ++j)
      for (std::size_t k = 1; k <= bins_; ++k) {
        const double w = 2.0 * std::numbers::pi * static_cast<double>(k * j) / static_cast<double>(n_);
        cos_[j * bins_ + k - 1] = std::cos(w);
        sin_[j * bins_ + k - 1] = std::sin(w);
      }
  }

  template <class Rng>
  void sample(Rng& rng, double scale, double* out, std::size_t stride) {
    std::normal_distribution<double> g;
    coef_a_.resize(bins_);
    coef_b_.resize(bins_);
    for (std::size_t k = 0; k < bins_; ++k) {
      coef_a_[k] = g(rng) * amp_[k] * scale;
      coef_b_[k] = g(rng) * amp_[k] * scale;
    }
    for (std::size_t j = 0; j < n_; ++j) {
      double v = 0.0;
      const double* c = cos_.data() + j * bins_;
      const double* s = sin_.data() + j * bins_;
      for (std::size_t k = 0; k < bins_; ++k) v += coef_a_[k] * c[k] + coef_b_[k] * s[k];
      out[j * stride] += v;
    }
  }

 private:
  std::size_t n_, bins_;
  std::vector<double> cos_, sin_, amp_, coef_a_, coef_b_;
};

}  // namespace detail

/// Draws `sequences` labelled sequences from the spec's Markov chain and
/// waveform model, applies the domain shifts and z-scores each sequence per channel.
inline DomainDataset generate_domain(const DomainSpec& spec, std::size_t sequences) {
  spec.validate();
  if (sequences == 0) throw ContractError("generate_domain: need at least one sequence");
  const std::size_t len = spec.sequence_length, n = spec.samples_per_epoch, ch = spec.channels;
  DomainDataset ds;
  ds.spec = spec;
  ds.count = sequences;
  ds.signals.resize(sequences * len * n * ch);
  ds.labels.resize(sequences * len);
  ds.norm_mean.resize(sequences * ch);
  ds.norm_std.resize(sequences * ch);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  detail::ColoredNoise noise(n, spec.sample_rate, spec.noise_tilt);
  const auto stationary = stationary_distribution(spec.transition);
  auto draw = [&](const std::array<double, kStages>& p) {
    double u = unit(rng), acc = 0.0;
    for (std::size_t s = 0; s < kStages; ++s) {
      acc += p[s];
      if (u < acc) return s;
    }
    return kStages - 1;
  };
  const double two_pi = 2.0 * std::numbers::pi;
  const double ca = std::cos(spec.mixing_angle), sa = std::sin(spec.mixing_angle);
  const double epoch_seconds = static_cast<double>(n) / spec.sample_rate;

  std::vector<double> seq(len * n * ch);
  for (std::size_t q = 0; q < sequences; ++q) {
    std::fill(seq.begin(), seq.end(), 0.0);
    std::size_t stage = draw(stationary);
    for (std::size_t e = 0; e < len; ++e) {
      if (e > 0) stage = draw(spec.transition[stage]);
      ds.labels[q * len + e] = static_cast<std::uint8_t>(stage);
      double* ep = seq.data() + e * n * ch;
      for (const auto& osc : spec.stages[stage]) {
        const double f = (osc.frequency + spec.frequency_offset) * (1.0 + 0.04 * gauss(rng));
        const double amp = osc.amplitude * std::exp(0.2 * gauss(rng));
        const double phase = two_pi * unit(rng);
        const double center = epoch_seconds * (0.2 + 0.6 * unit(rng));
        const double width = epoch_seconds * 0.12;
        const bool harmonic = 2.0 * f < spec.sample_rate / 2.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double t = static_cast<double>(j) / spec.sample_rate;
          const double theta = two_pi * f * t + phase;
          double v = std::sin(theta);
          if (harmonic) v += spec.asymmetry * std::cos(2.0 * theta);
          if (osc.burst) {
            const double z = (t - center) / width;
            v *= 1.5 * std::exp(-0.5 * z * z);
          }
          ep[j * ch + osc.channel] += amp * v;
        }
      }
      for (std::size_t c = 0; c < ch; ++c) noise.sample(rng, spec.noise_level, ep + c, ch);
      for (std::size_t j = 0; j < n; ++j) {
        const double a = ep[j * ch], b = ep[j * ch + 1];
        ep[j * ch] = ca * a - sa * b;
        ep[j * ch + 1] = sa * a + ca * b;
      }
    }
    for (std::size_t c = 0; c < ch; ++c) {
      double mu = 0.0;
      for (std::size_t j = 0; j < len * n; ++j) mu += seq[j * ch + c];
      mu /= static_cast<double>(len * n);
      double var = 0.0;
      for (std::size_t j = 0; j < len * n; ++j) var += (seq[j * ch + c] - mu) * (seq[j * ch + c] - mu);
      const double sd = std::sqrt(var / static_cast<double>(len * n));
      ds.norm_mean[q * ch + c] = mu;
      ds.norm_std[q * ch + c] = sd;
      const double inv = sd > 0.0 ? 1.0 / sd : 0.0;
      float* dst = ds.signals.data() + q * len * n * ch;
      for (std::size_t j = 0; j < len * n; ++j) {
        dst[j * ch + c] = static_cast<float>((seq[j * ch + c] - mu) * inv);
      }
    }
  }
  return ds;
}

/// Five domain specs with shared stage semantics; shift parameters are a fixed
/// per-domain pattern scaled by `magnitude`. Seeds derive from `base_seed`.
/// `base` supplies the sampling geometry and stage semantics.
inline std::vector<DomainSpec> benchmark_specs(std::uint64_t base_seed, double magnitude,
                                               const DomainSpec& base = DomainSpec::standard()) {
  if (!(magnitude >= 0.0)) throw ContractError("make_benchmark: shift magnitude must be >= 0");
  // offset (Hz), tilt delta, asymmetry, mixing angle (degrees)
  static constexpr std::array<std::array<double, 4>, 5> pattern{{
      {0.0, 0.0, 0.0, 0.0},
      {0.6, 0.8, 0.25, -30.0},
      {-0.6, -0.6, -0.2, 45.0},
      {0.3, -0.9, 0.3, 20.0},
      {-0.3, 0.9, -0.3, -50.0},
  }};
  std::vector<DomainSpec> specs;
  std::seed_seq seq{base_seed, std::uint64_t{0x5eed}};
  std::vector<std::uint32_t> words(10);
  seq.generate(words.begin(), words.end());
  for (std::size_t i = 0; i < 5; ++i) {
    DomainSpec s = base;
    s.domain_id = i;
    s.frequency_offset = magnitude * pattern[i][0];
    s.noise_tilt = 1.0 + magnitude * pattern[i][1];
    s.asymmetry = magnitude * pattern[i][2];
    s.mixing_angle = magnitude * pattern[i][3] * std::numbers::pi / 180.0;
    s.seed = (std::uint64_t{words[2 * i]} << 32) | words[2 * i + 1];
    specs.push_back(s);
  }
  return specs;
}

inline std::vector<DomainDataset> make_benchmark(std::uint64_t base_seed, double magnitude,
                                                 std::size_t sequences = 200,
                                                 const DomainSpec& base = DomainSpec::standard()) {
  std::vector<DomainDataset> out;
  for (const auto& s : benchmark_specs(base_seed, magnitude, base)) {
    out.push_back(generate_domain(s, sequences));
  }
  return out;
}

/// Copies the selected sequences of a dataset.
inline DomainDataset subset(const DomainDataset& ds, const std::vector<std::size_t>& indices) {
  DomainDataset out;
  out.spec = ds.spec;
  out.count = indices.size();
  const std::size_t seq = ds.sequence_size(), len = ds.spec.sequence_length, ch = ds.spec.channels;
  out.signals.reserve(indices.size() * seq);
  for (auto i : indices) {
    if (i >= ds.count) throw ContractError("subset: sequence index out of range");
    out.signals.insert(out.signals.end(), ds.signals.begin() + static_cast<long>(i * seq),
                       ds.signals.begin() + static_cast<long>((i + 1) * seq));
    out.labels.insert(out.labels.end(), ds.labels.begin() + static_cast<long>(i * len),
                      ds.labels.begin() + static_cast<long>((i + 1) * len));
    if (!ds.norm_mean.empty()) {
      out.norm_mean.insert(out.norm_mean.end(), ds.norm_mean.begin() + static_cast<long>(i * ch),
                           ds.norm_mean.begin() + static_cast<long>((i + 1) * ch));
      out.norm_std.insert(out.norm_std.end(), ds.norm_std.begin() + static_cast<long>(i * ch),
                          ds.norm_std.begin() + static_cast<long>((i + 1) * ch));
    }
  }
  return out;
}

/// Seeded sequence-level split into (train, validation); train gets
/// round(fraction * count) sequences.
inline std::pair<DomainDataset, DomainDataset> split_domain(const DomainDataset& ds, double fraction,
                                                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ContractError("split_domain: fraction must lie in (0, 1)");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.count)));
  if (n_train == 0 || n_train >= ds.count) {
    throw ContractError("split_domain: fraction " + std::to_string(fraction) + " of " +
                        std::to_string(ds.count) + " sequences leaves an empty part");
  }
  std::vector<std::size_t> idx(ds.count);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<long>(n_train));
  std::vector<std::size_t> val(idx.begin() + static_cast<long>(n_train), idx.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {subset(ds, train), subset(ds, val)};
}

// JSON mapping of the spec, used in dataset headers and configs.

inline void to_json(nlohmann::json& j, const Oscillation& o) {
  j = {{"frequency", o.frequency}, {"amplitude", o.amplitude}, {"channel", o.channel}, {"burst", o.burst}};
}

inline void from_json(const nlohmann::json& j, Oscillation& o) {
  j.at("frequency").get_to(o.frequency);
  j.at("amplitude").get_to(o.amplitude);
  j.at("channel").get_to(o.channel);
  j.at("burst").get_to(o.burst);
}

inline void to_json(nlohmann::json& j, const DomainSpec& s) {
  j = {{"domain_id", s.domain_id},
       {"sample_rate", s.sample_rate},
       {"samples_per_epoch", s.samples_per_epoch},
       {"channels", s.channels},
       {"sequence_length", s.sequence_length},
       {"stages", s.stages},
       {"frequency_offset", s.frequency_offset},
       {"noise_tilt", s.noise_tilt},
       {"noise_level", s.noise_level},
       {"asymmetry", s.asymmetry},
       {"mixing_angle", s.mixing_angle},
       {"transition", s.transition},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& s) {
  j.at("domain_id").get_to(s.domain_id);
  j.at("sample_rate").get_to(s.sample_rate);
  j.at("samples_per_epoch").get_to(s.samples_per_epoch);
  j.at("channels").get_to(s.channels);
  j.at("sequence_length").get_to(s.sequence_length);
  j.at("stages").get_to(s.stages);
  j.at("frequency_offset").get_to(s.frequency_offset);
  j.at("noise_tilt").get_to(s.noise_tilt);
  j.at("noise_level").get_to(s.noise_level);
  j.at("asymmetry").get_to(s.asymmetry);
  j.at("mixing_angle").get_to(s.mixing_angle);
  j.at("transition").get_to(s.transition);
  j.at("seed").get_to(s.seed);
}

}  // namespace sleepdg::data
