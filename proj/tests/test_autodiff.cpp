#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "sleepdg/autodiff/adam.hpp"
#include "sleepdg/autodiff/checkpoint.hpp"
#include "sleepdg/autodiff/grad_check.hpp"
#include "sleepdg/autodiff/ops.hpp"

namespace ad = sleepdg::ad;
using TD = ad::Tensor<double>;
using TF = ad::Tensor<float>;

namespace {

constexpr double kGradTol = 1e-6;

TD random(ad::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(s));
  for (auto& x : v) x = u(rng);
  return TD::from(std::move(s), std::move(v));
}

double check(const ad::ScalarFn& f, std::vector<TD> inputs) { return ad::grad_check(f, inputs); }

}  // namespace

TEST(Tensor, FromRejectsWrongCount) {
  EXPECT_THROW(TD::from({2, 3}, std::vector<double>(5)), sleepdg::ShapeError);
}

TEST(Tensor, ItemNeedsOneElement) {
  EXPECT_DOUBLE_EQ(TD::scalar(2.5).item(), 2.5);
  EXPECT_THROW(TD::zeros({2}).item(), sleepdg::ShapeError);
}

TEST(Backward, NeedsScalarLoss) {
  auto x = TD::zeros({3}, true);
  EXPECT_THROW(ad::backward(ad::mul_scalar(x, 2.0)), sleepdg::ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto x = TD::from({2}, {1.5, -2.0}, true);
  auto y = ad::mul(x, x);
  auto loss = ad::sum(ad::add(y, y));
  const auto g = ad::backward(loss).of(x);
  EXPECT_DOUBLE_EQ(g[0], 6.0);
  EXPECT_DOUBLE_EQ(g[1], -8.0);
}

TEST(Backward, UnreachableLeafGetsZeros) {
  auto x = TD::from({2}, {1.0, 2.0}, true);
  auto unused = TD::from({3}, {1.0, 2.0, 3.0}, true);
  const auto grads = ad::backward(ad::sum(x));
  EXPECT_FALSE(grads.contains(unused));
  const auto g = grads.of(unused);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = TD::from({2}, {1.0, 2.0}, true);
  TD y;
  {
    ad::NoGradGuard guard;
    y = ad::sum(ad::mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(ad::grad_enabled());
}

TEST(Ops, BroadcastShapes) {
  auto a = TD::zeros({2, 3, 4});
  EXPECT_EQ(ad::add(a, TD::zeros({4})).shape(), (ad::Shape{2, 3, 4}));
  EXPECT_EQ(ad::mul(a, TD::zeros({3, 1})).shape(), (ad::Shape{2, 3, 4}));
  EXPECT_THROW(ad::add(a, TD::zeros({3})), sleepdg::ShapeError);
}

TEST(Ops, LogAndSqrtRejectOutOfDomain) {
  EXPECT_THROW(ad::log(TD::from({2}, {1.0, 0.0})), sleepdg::DomainError);
  EXPECT_THROW(ad::sqrt(TD::from({1}, {-1.0})), sleepdg::DomainError);
  EXPECT_DOUBLE_EQ(ad::log_guarded(TD::from({1}, {0.0}), 1e-12).item(), std::log(1e-12));
}

TEST(Ops, MatmulMatchesLoops) {
  auto a = random({2, 3, 4}, 1), b = random({2, 4, 5}, 2);
  auto c = ad::matmul(a, b);
  ASSERT_EQ(c.shape(), (ad::Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a[n * 12 + i * 4 + k] * b[n * 20 + k * 5 + j];
        EXPECT_NEAR(c[n * 15 + i * 5 + j], s, 1e-12);
      }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  auto p = ad::softmax(random({3, 7}, 3, -30.0, 30.0), -1);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += p[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, ConcatInvertsSlice) {
  auto x = random({4, 3}, 4);
  auto y = ad::concat(std::vector<TD>{ad::slice(x, 0, 0, 1), ad::slice(x, 0, 1, 4)}, 0);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Ops, VarianceMatchesLoop) {
  auto x = random({5, 6}, 5);
  auto v = ad::variance(x, 1, 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0, s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) m += x[r * 6 + c] / 6.0;
    for (std::size_t c = 0; c < 6; ++c) s += (x[r * 6 + c] - m) * (x[r * 6 + c] - m);
    EXPECT_NEAR(v[r], s / 5.0, 1e-12);
  }
}

TEST(Ops, Conv1dMatchesDirectSum) {
  const std::size_t n = 2, cin = 3, cout = 4, len = 9, k = 3, stride = 2, pad = 1;
  auto x = random({n, cin, len}, 6), w = random({cout, cin, k}, 7), b = random({cout}, 8);
  auto y = ad::conv1d(x, w, b, {stride, pad});
  const std::size_t lout = (len + 2 * pad - k) / stride + 1;
  ASSERT_EQ(y.shape(), (ad::Shape{n, cout, lout}));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < lout; ++t) {
        double acc = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j) {
            const long pos = static_cast<long>(t * stride + j) - static_cast<long>(pad);
            if (pos < 0 || pos >= static_cast<long>(len)) continue;
            acc += w[(o * cin + c) * k + j] * x[(s * cin + c) * len + static_cast<std::size_t>(pos)];
          }
        EXPECT_NEAR(y[(s * cout + o) * lout + t], acc, 1e-12);
      }
}

// <conv(x), y> == <x, conv_transpose(y)> with the same kernel.
TEST(Ops, ConvTransposeIsAdjointOfConv) {
  const std::size_t cin = 3, cout = 2, k = 5, stride = 2, pad = 2, len = 8;
  auto w = random({cout, cin, k}, 9);
  auto x = random({1, cin, len}, 10);
  auto cx = ad::conv1d(x, w, TD{}, {stride, pad});
  auto y = random({1, cout, cx.dim(2)}, 11);
  const std::size_t op = len - ((cx.dim(2) - 1) * stride - 2 * pad + k);
  auto ty = ad::conv_transpose1d(y, w, TD{}, {stride, pad}, op);
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Ops, ConvTransposeRejectsLargeOutputPadding) {
  EXPECT_THROW(ad::conv_transpose1d(TD::zeros({1, 2, 4}), TD::zeros({2, 2, 3}), TD{}, {2, 1}, 2),
               sleepdg::ShapeError);
}

TEST(Ops, LayerNormNormalizesChosenAxis) {
  auto x = random({2, 4, 6}, 12, -3.0, 5.0);
  auto y = ad::layer_norm(x, TD::full({4}, 1.0), TD::zeros({4}), 1e-12, 1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 6; ++t) {
      double m = 0.0, v = 0.0;
      for (std::size_t c = 0; c < 4; ++c) m += y[(n * 4 + c) * 6 + t] / 4.0;
      for (std::size_t c = 0; c < 4; ++c) v += std::pow(y[(n * 4 + c) * 6 + t] - m, 2) / 4.0;
      EXPECT_NEAR(m, 0.0, 1e-9);
      EXPECT_NEAR(v, 1.0, 1e-6);
    }
}

TEST(Ops, FloatGeluTracksDouble) {
  std::vector<double> xs;
  for (int i = -400; i <= 400; ++i) xs.push_back(i * 0.025);
  std::vector<float> xf(xs.begin(), xs.end());
  auto gd = ad::gelu(TD::from({xs.size()}, xs));
  auto gf = ad::gelu(TF::from({xf.size()}, xf));
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(gf[i], gd[i], 2e-6 * (1.0 + std::abs(gd[i])));
}

TEST(Ops, DropoutScalesKeptUnits) {
  std::mt19937_64 rng(3);
  auto x = TD::full({20000}, 1.0);
  auto y = ad::dropout(x, 0.25, rng, true);
  std::size_t kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 20000.0, 0.75, 0.02);
  EXPECT_EQ(ad::dropout(x, 0.25, rng, false).values(), x.values());
}

struct OpCase {
  const char* name;
  std::vector<ad::Shape> shapes;
  ad::ScalarFn fn;
};

void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto& c = GetParam();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::vector<TD> in;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) in.push_back(random(c.shapes[i], seed * 17 + i));
    EXPECT_LT(check(c.fn, in), kGradTol) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"add_broadcast", {{3, 4}, {4}}, [](auto& v) { return ad::sum(ad::square(ad::add(v[0], v[1]))); }},
        OpCase{"sub_mul", {{2, 3}, {2, 3}}, [](auto& v) { return ad::sum(ad::mul(ad::sub(v[0], v[1]), v[0])); }},
        OpCase{"div", {{5}, {5}},
               [](auto& v) { return ad::sum(ad::div(v[0], ad::add_scalar(ad::square(v[1]), 1.0))); }},
        OpCase{"exp_log", {{6}},
               [](auto& v) { return ad::sum(ad::log(ad::add_scalar(ad::exp(v[0]), 0.5))); }},
        OpCase{"sqrt", {{6}}, [](auto& v) { return ad::sum(ad::sqrt(ad::add_scalar(ad::square(v[0]), 0.3))); }},
        OpCase{"matmul_batched", {{2, 3, 4}, {4, 2}}, [](auto& v) { return ad::sum(ad::square(ad::matmul(v[0], v[1]))); }},
        OpCase{"permute_reshape", {{2, 3, 4}},
               [](auto& v) {
                 auto p = ad::reshape(ad::permute(v[0], {2, 0, 1}), {4, 6});
                 return ad::sum(ad::mul(p, ad::square(p)));
               }},
        OpCase{"slice_concat", {{4, 3}},
               [](auto& v) {
                 auto a = ad::slice(v[0], 0, 1, 3);
                 return ad::sum(ad::square(ad::concat(std::vector<TD>{a, v[0]}, 0)));
               }},
        OpCase{"sum_mean_axes", {{3, 4, 2}},
               [](auto& v) {
                 return ad::add(ad::sum(ad::square(ad::sum(v[0], 1))), ad::sum(ad::exp(ad::mean(v[0], -1, true))));
               }},
        OpCase{"variance", {{3, 5}}, [](auto& v) { return ad::sum(ad::variance(v[0], 1, 1)); }},
        OpCase{"softmax", {{2, 5}, {2, 5}},
               [](auto& v) { return ad::sum(ad::mul(ad::softmax(v[0], -1), v[1])); }},
        OpCase{"softmax_axis0", {{4, 3}, {4, 3}},
               [](auto& v) { return ad::sum(ad::mul(ad::softmax(v[0], 0), v[1])); }},
        OpCase{"gelu", {{7}}, [](auto& v) { return ad::sum(ad::mul(ad::gelu(ad::mul_scalar(v[0], 3.0)), v[0])); }},
        OpCase{"layer_norm_last", {{2, 3, 5}, {5}, {5}, {2, 3, 5}},
               [](auto& v) { return ad::sum(ad::mul(ad::layer_norm(v[0], v[1], v[2]), v[3])); }},
        OpCase{"layer_norm_axis1", {{2, 4, 3}, {4}, {4}, {2, 4, 3}},
               [](auto& v) { return ad::sum(ad::mul(ad::layer_norm(v[0], v[1], v[2], 1e-5, 1), v[3])); }},
        OpCase{"conv1d", {{2, 3, 9}, {4, 3, 3}, {4}},
               [](auto& v) { return ad::sum(ad::square(ad::conv1d(v[0], v[1], v[2], {2, 1}))); }},
        OpCase{"conv_transpose1d", {{2, 3, 4}, {3, 2, 5}, {2}},
               [](auto& v) { return ad::sum(ad::square(ad::conv_transpose1d(v[0], v[1], v[2], {2, 2}, 1))); }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Adam, FirstStepMovesByLearningRate) {
  auto w = TF::from({2}, {1.0f, -1.0f}, true);
  std::vector<TF> params{w};
  ad::AdamOptions o;
  o.weight_decay = 0.0;
  ad::AdamState<float> state(o, params);
  ad::adam_step(state, std::span<TF>(params), ad::backward(ad::sum(ad::mul(w, TF::from({2}, {3.0f, -0.5f})))));
  EXPECT_NEAR(w[0], 1.0f - 1e-3f, 1e-6f);
  EXPECT_NEAR(w[1], -1.0f + 1e-3f, 1e-6f);
}

TEST(Adam, CoupledDecayEntersGradient) {
  auto run = [](bool decoupled) {
    auto w = TD::from({1}, {2.0}, true);
    std::vector<TD> params{w};
    ad::AdamOptions o;
    o.weight_decay = 0.1;
    o.decoupled_weight_decay = decoupled;
    ad::AdamState<double> state(o, params);
    for (int i = 0; i < 2; ++i) {
      ad::adam_step(state, std::span<TD>(params), ad::backward(ad::mul_scalar(ad::sum(w), 0.0)));
    }
    return w[0];
  };
  // Zero loss gradient: the coupled form sees g = wd * w and takes ~lr steps;
  // the decoupled form shrinks by lr * wd * w per step.
  EXPECT_NEAR(run(false), 2.0 - 2e-3, 1e-6);
  EXPECT_NEAR(run(true), 2.0 * (1 - 1e-4) * (1 - 1e-4), 1e-9);
}

TEST(Adam, MissingGradientIsAnError) {
  auto w = TD::from({1}, {1.0}, true), other = TD::from({1}, {1.0}, true);
  std::vector<TD> params{w};
  ad::AdamState<double> state({}, params);
  EXPECT_THROW(ad::adam_step(state, std::span<TD>(params), ad::backward(ad::sum(other))), sleepdg::ContractError);
}

TEST(Checkpoint, RoundTripsAndChecksNames) {
  ad::NamedTensors<float> a{{"w", TF::from({2, 2}, {1, 2, 3, 4}, true)}, {"b", TF::from({1}, {5}, true)}};
  std::stringstream ss;
  ad::save_checkpoint(ss, a);
  ad::NamedTensors<double> b{{"w", TD::zeros({2, 2}, true)}, {"b", TD::zeros({1}, true)}};
  ad::load_checkpoint(ss, b);
  EXPECT_EQ(b[0].second.values(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(b[1].second[0], 5.0);

  std::stringstream again;
  ad::save_checkpoint(again, a);
  ad::NamedTensors<float> wrong{{"w", TF::zeros({2, 2}, true)}, {"c", TF::zeros({1}, true)}};
  EXPECT_THROW(ad::load_checkpoint(again, wrong), sleepdg::ContractError);
}
