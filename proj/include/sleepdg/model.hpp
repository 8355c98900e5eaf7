#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sleepdg/autodiff/checkpoint.hpp"
#include "sleepdg/autodiff/ops.hpp"
#include "sleepdg/autodiff/tensor.hpp"
#include "sleepdg/errors.hpp"

namespace sleepdg {

using ad::Shape;
using ad::Tensor;

struct ModelConfig {
  std::size_t samples_per_epoch = 128;  // n
  std::size_t channels = 2;             // C
  std::size_t sequence_length = 8;      // L
  std::size_t feature_dim = 32;         // d
  std::size_t num_stages = 5;           // N
  std::vector<std::size_t> conv_kernels{7, 5, 3};
  std::vector<std::size_t> conv_widths{4, 8, 8};
  std::size_t attention_layers = 2;
  std::size_t attention_heads = 4;
  std::size_t ff_multiplier = 2;
  double dropout = 0.1;

  /// Desk-scale defaults used by tests and the synthetic benchmark.
  static ModelConfig desk() { return {}; }

  /// Published-scale extents: L = 20, d = 512 over 30 s epochs at 100 Hz.
  static ModelConfig paper() {
    ModelConfig c;
    c.samples_per_epoch = 3000;
    c.sequence_length = 20;
    c.feature_dim = 512;
    c.conv_widths = {64, 128, 256};
    c.attention_heads = 8;
    return c;
  }

  std::size_t pooled_length() const { return samples_per_epoch >> conv_kernels.size(); }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ContractError("model." + field + ": " + why);
    };
    if (samples_per_epoch == 0) fail("samples_per_epoch", "must be positive");
    if (channels == 0) fail("channels", "must be positive");
    if (sequence_length < 2) fail("sequence_length", "must be at least 2");
    if (feature_dim == 0) fail("feature_dim", "must be positive");
    if (num_stages != 5) fail("num_stages", "the staging task has exactly 5 stages");
    if (conv_kernels.empty()) fail("conv_kernels", "need at least one convolution block");
    if (conv_kernels.size() != conv_widths.size()) {
      fail("conv_widths", "needs one width per convolution kernel");
    }
    for (auto k : conv_kernels) {
      if (k == 0 || k % 2 == 0) fail("conv_kernels", "kernel sizes must be odd");
    }
    for (auto w : conv_widths) {
      if (w == 0) fail("conv_widths", "widths must be positive");
    }
    if (samples_per_epoch % (std::size_t{1} << conv_kernels.size()) != 0) {
      fail("samples_per_epoch", "must be divisible by 2^(number of convolution blocks)");
    }
    if (attention_heads == 0 || feature_dim % attention_heads != 0) {
      fail("attention_heads", "must divide feature_dim");
    }
    if (ff_multiplier == 0) fail("ff_multiplier", "must be positive");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout", "must lie in [0, 1)");
  }
};

/// Dropout mode and randomness for one forward pass.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// Encoder g (per-epoch convolutions + self-attention over the sequence),
/// decoder d (transposed-convolution mirror) and classifier f.
template <class T>
class SleepModel {
 public:
  enum class Group { encoder, decoder, classifier };

  SleepModel(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  ad::NamedTensors<T>& named_parameters() { return params_; }
  const ad::NamedTensors<T>& named_parameters() const { return params_; }

  std::vector<Tensor<T>> parameters(std::initializer_list<Group> groups) const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : params_) {
      for (auto g : groups) {
        if (name.rfind(prefix(g), 0) == 0) {
          out.push_back(t);
          break;
        }
      }
    }
    return out;
  }

  /// Per-epoch features before sequence context: (B, L, n, C) -> (B, L, d).
  Tensor<T> encode_epochs(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t batch = x.dim(0), len = x.dim(1);
    auto h = ad::reshape(x, {batch * len, cfg_.samples_per_epoch, cfg_.channels});
    h = ad::permute(h, {0, 2, 1});
    for (std::size_t b = 0; b < cfg_.conv_kernels.size(); ++b) {
      const auto& blk = conv_blocks_[b];
      h = ad::conv1d(h, blk.weight, blk.bias, {1, cfg_.conv_kernels[b] / 2});
      h = ad::gelu(ad::layer_norm(h, blk.norm_gain, blk.norm_bias, T(1e-5), 1));
      const std::size_t n = h.dim(0), c = h.dim(1), l = h.dim(2);
      h = ad::mean(ad::reshape(h, {n, c, l / 2, 2}), 3);
    }
    h = ad::mean(h, 2);
    h = ad::add(ad::matmul(h, to_feature_w_), to_feature_b_);
    return ad::reshape(h, {batch, len, cfg_.feature_dim});
  }

  /// Full encoder g: (B, L, n, C) -> (B, L, d).
  Tensor<T> encode(const Tensor<T>& x, ForwardContext ctx = {}) const {
    auto h = ad::add(encode_epochs(x), positional_);
    const T rate = static_cast<T>(cfg_.dropout);
    for (const auto& layer : attention_) {
      auto a = ad::layer_norm(h, layer.norm1_gain, layer.norm1_bias);
      h = ad::add(h, apply_dropout(self_attention(a, layer), rate, ctx));
      auto f = ad::layer_norm(h, layer.norm2_gain, layer.norm2_bias);
      f = ad::gelu(ad::add(ad::matmul(f, layer.ff1_w), layer.ff1_b));
      f = ad::add(ad::matmul(f, layer.ff2_w), layer.ff2_b);
      h = ad::add(h, apply_dropout(f, rate, ctx));
    }
    return ad::layer_norm(h, final_gain_, final_bias_);
  }

  /// Decoder d: (B, L, d) -> (B, L, n, C).
  Tensor<T> decode(const Tensor<T>& features) const {
    check_features(features);
    const std::size_t batch = features.dim(0), len = features.dim(1);
    const std::size_t blocks = cfg_.conv_kernels.size();
    auto h = ad::reshape(features, {batch * len, cfg_.feature_dim});
    h = ad::gelu(ad::add(ad::matmul(h, from_feature_w_), from_feature_b_));
    h = ad::reshape(h, {batch * len, cfg_.conv_widths.back(), cfg_.pooled_length()});
    for (std::size_t i = 0; i < blocks; ++i) {
      const std::size_t b = blocks - 1 - i;
      const auto& blk = deconv_blocks_[i];
      h = ad::conv_transpose1d(h, blk.weight, blk.bias, {2, cfg_.conv_kernels[b] / 2}, 1);
      if (b > 0) h = ad::gelu(ad::layer_norm(h, blk.norm_gain, blk.norm_bias, T(1e-5), 1));
    }
    h = ad::permute(h, {0, 2, 1});
    return ad::reshape(h, {batch, len, cfg_.samples_per_epoch, cfg_.channels});
  }

  /// Classifier logits: (B, L, d) -> (B, L, N).
  Tensor<T> logits(const Tensor<T>& features) const {
    check_features(features);
    return ad::add(ad::matmul(features, classifier_w_), classifier_b_);
  }

  /// Classifier f with softmax: per-epoch stage probabilities (B, L, N).
  Tensor<T> classify(const Tensor<T>& features) const { return ad::softmax(logits(features), -1); }

 private:
  struct ConvBlock {
    Tensor<T> weight, bias, norm_gain, norm_bias;
  };
  struct AttentionLayer {
    Tensor<T> norm1_gain, norm1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> norm2_gain, norm2_bias, ff1_w, ff1_b, ff2_w, ff2_b;
  };

  static const char* prefix(Group g) {
    switch (g) {
      case Group::encoder: return "encoder.";
      case Group::decoder: return "decoder.";
      case Group::classifier: return "classifier.";
    }
    return "";
  }

  Tensor<T> add_param(const std::string& name, Shape shape, std::mt19937_64& rng, double bound) {
    std::vector<T> v(ad::numel(shape));
    if (bound > 0.0) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& x : v) x = static_cast<T>(dist(rng));
    }
    auto t = Tensor<T>::from(std::move(shape), std::move(v), true);
    params_.emplace_back(name, t);
    return t;
  }

  Tensor<T> add_constant_param(const std::string& name, Shape shape, T fill) {
    auto t = Tensor<T>::from(shape, std::vector<T>(ad::numel(shape), fill), true);
    params_.emplace_back(name, t);
    return t;
  }

  void build(std::mt19937_64& rng) {
    const std::size_t d = cfg_.feature_dim;
    std::size_t cin = cfg_.channels;
    for (std::size_t b = 0; b < cfg_.conv_kernels.size(); ++b) {
      const std::size_t k = cfg_.conv_kernels[b], w = cfg_.conv_widths[b];
      const std::string p = "encoder.conv" + std::to_string(b) + ".";
      ConvBlock blk;
      blk.weight = add_param(p + "weight", {w, cin, k}, rng, 1.0 / std::sqrt(double(k * cin)));
      blk.bias = add_constant_param(p + "bias", {w}, T(0));
      blk.norm_gain = add_constant_param(p + "norm_gain", {w}, T(1));
      blk.norm_bias = add_constant_param(p + "norm_bias", {w}, T(0));
      conv_blocks_.push_back(blk);
      cin = w;
    }
    to_feature_w_ = add_param("encoder.to_feature.weight", {cin, d}, rng, 1.0 / std::sqrt(double(cin)));
    to_feature_b_ = add_constant_param("encoder.to_feature.bias", {d}, T(0));
    positional_ = add_param("encoder.positional", {cfg_.sequence_length, d}, rng, 0.02);

    const double proj = 1.0 / std::sqrt(double(d));
    const std::size_t ff = cfg_.ff_multiplier * d;
    for (std::size_t l = 0; l < cfg_.attention_layers; ++l) {
      const std::string p = "encoder.attn" + std::to_string(l) + ".";
      AttentionLayer a;
      a.norm1_gain = add_constant_param(p + "norm1_gain", {d}, T(1));
      a.norm1_bias = add_constant_param(p + "norm1_bias", {d}, T(0));
      a.wq = add_param(p + "wq", {d, d}, rng, proj);
      a.bq = add_constant_param(p + "bq", {d}, T(0));
      a.wk = add_param(p + "wk", {d, d}, rng, proj);
      a.bk = add_constant_param(p + "bk", {d}, T(0));
      a.wv = add_param(p + "wv", {d, d}, rng, proj);
      a.bv = add_constant_param(p + "bv", {d}, T(0));
      a.wo = add_param(p + "wo", {d, d}, rng, proj);
      a.bo = add_constant_param(p + "bo", {d}, T(0));
      a.norm2_gain = add_constant_param(p + "norm2_gain", {d}, T(1));
      a.norm2_bias = add_constant_param(p + "norm2_bias", {d}, T(0));
      a.ff1_w = add_param(p + "ff1_w", {d, ff}, rng, proj);
      a.ff1_b = add_constant_param(p + "ff1_b", {ff}, T(0));
      a.ff2_w = add_param(p + "ff2_w", {ff, d}, rng, 1.0 / std::sqrt(double(ff)));
      a.ff2_b = add_constant_param(p + "ff2_b", {d}, T(0));
      attention_.push_back(a);
    }
    final_gain_ = add_constant_param("encoder.final_gain", {d}, T(1));
    final_bias_ = add_constant_param("encoder.final_bias", {d}, T(0));

    const std::size_t top = cfg_.conv_widths.back();
    from_feature_w_ = add_param("decoder.from_feature.weight", {d, cfg_.pooled_length() * top}, rng, proj);
    from_feature_b_ = add_constant_param("decoder.from_feature.bias", {cfg_.pooled_length() * top}, T(0));
    const std::size_t blocks = cfg_.conv_kernels.size();
    for (std::size_t i = 0; i < blocks; ++i) {
      const std::size_t b = blocks - 1 - i;
      const std::size_t in = cfg_.conv_widths[b];
      const std::size_t out = b > 0 ? cfg_.conv_widths[b - 1] : cfg_.channels;
      const std::size_t k = cfg_.conv_kernels[b];
      const std::string p = "decoder.deconv" + std::to_string(i) + ".";
      ConvBlock blk;
      blk.weight = add_param(p + "weight", {in, out, k}, rng, 1.0 / std::sqrt(double(in * k) / 2.0));
      blk.bias = add_constant_param(p + "bias", {out}, T(0));
      if (b > 0) {
        blk.norm_gain = add_constant_param(p + "norm_gain", {out}, T(1));
        blk.norm_bias = add_constant_param(p + "norm_bias", {out}, T(0));
      }
      deconv_blocks_.push_back(blk);
    }

    classifier_w_ = add_param("classifier.weight", {d, cfg_.num_stages}, rng, proj);
    classifier_b_ = add_constant_param("classifier.bias", {cfg_.num_stages}, T(0));
  }

  Tensor<T> self_attention(const Tensor<T>& x, const AttentionLayer& a) const {
    const std::size_t batch = x.dim(0), len = x.dim(1), d = cfg_.feature_dim;
    const std::size_t heads = cfg_.attention_heads, hd = d / heads;
    auto split = [&](const Tensor<T>& t) {
      auto r = ad::reshape(t, {batch, len, heads, hd});
      return ad::reshape(ad::permute(r, {0, 2, 1, 3}), {batch * heads, len, hd});
    };
    auto q = split(ad::add(ad::matmul(x, a.wq), a.bq));
    auto k = split(ad::add(ad::matmul(x, a.wk), a.bk));
    auto v = split(ad::add(ad::matmul(x, a.wv), a.bv));
    auto scores = ad::mul_scalar(ad::matmul(q, ad::transpose(k, 1, 2)),
                                 static_cast<T>(1.0 / std::sqrt(double(hd))));
    auto ctx = ad::matmul(ad::softmax(scores, -1), v);
    ctx = ad::reshape(ad::permute(ad::reshape(ctx, {batch, heads, len, hd}), {0, 2, 1, 3}),
                      {batch, len, d});
    return ad::add(ad::matmul(ctx, a.wo), a.bo);
  }

  static Tensor<T> apply_dropout(const Tensor<T>& t, T rate, ForwardContext ctx) {
    if (!ctx.training || rate == T(0)) return t;
    if (!ctx.rng) throw ContractError("training forward pass needs an RNG for dropout");
    return ad::dropout(t, rate, *ctx.rng, true);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.sequence_length || x.dim(2) != cfg_.samples_per_epoch ||
        x.dim(3) != cfg_.channels) {
      throw ShapeError("encode: expected (B, " + std::to_string(cfg_.sequence_length) + ", " +
                          std::to_string(cfg_.samples_per_epoch) + ", " +
                          std::to_string(cfg_.channels) + "), got " + ad::to_string(x.shape()));
    }
  }

  void check_features(const Tensor<T>& h) const {
    if (h.rank() != 3 || h.dim(1) != cfg_.sequence_length || h.dim(2) != cfg_.feature_dim) {
      throw ShapeError("expected features (B, " + std::to_string(cfg_.sequence_length) + ", " +
                          std::to_string(cfg_.feature_dim) + "), got " + ad::to_string(h.shape()));
    }
  }

  ModelConfig cfg_;
  ad::NamedTensors<T> params_;
  std::vector<ConvBlock> conv_blocks_;
  Tensor<T> to_feature_w_, to_feature_b_, positional_;
  std::vector<AttentionLayer> attention_;
  Tensor<T> final_gain_, final_bias_;
  Tensor<T> from_feature_w_, from_feature_b_;
  std::vector<ConvBlock> deconv_blocks_;
  Tensor<T> classifier_w_, classifier_b_;
};

}  // namespace sleepdg
