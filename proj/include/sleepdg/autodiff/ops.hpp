#pragma once

// Differentiable primitives. Every function validates shapes up front, computes
// the forward value with fixed sequential loop orders, and registers a closure
// that accumulates into its parents' gradient buffers.

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sleepdg/autodiff/tensor.hpp"
#include "sleepdg/errors.hpp"

namespace sleepdg::ad {

namespace detail {

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// Splits a shape around one axis into (outer, extent, inner) loop bounds.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct Broadcast {
  enum class Kind { same, scalar_a, scalar_b, suffix_a, suffix_b, general };
  Kind kind = Kind::same;
  Shape out;
  std::size_t inner = 1;
  std::vector<std::size_t> a_strides, b_strides;
};

inline Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<long>(i), s.end());
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  const Shape s = strip_leading_ones(small);
  if (s.size() > big.size()) return false;
  return std::equal(s.begin(), s.end(), big.end() - static_cast<long>(s.size()));
}

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    }
    p.out[i] = std::max(da, db);
  }
  const std::size_t na = numel(a), nb = numel(b), no = numel(p.out);
  if (nb == 1) {
    p.kind = Broadcast::Kind::scalar_b;
  } else if (na == 1) {
    p.kind = Broadcast::Kind::scalar_a;
  } else if (na == no && is_suffix(b, p.out)) {
    p.kind = Broadcast::Kind::suffix_b;
    p.inner = nb;
  } else if (nb == no && is_suffix(a, p.out)) {
    p.kind = Broadcast::Kind::suffix_a;
    p.inner = na;
  } else {
    p.kind = Broadcast::Kind::general;
    p.a_strides.assign(rank, 0);
    p.b_strides.assign(rank, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
      const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
      if (da != 1) p.a_strides[i] = sa;
      if (db != 1) p.b_strides[i] = sb;
      sa *= da;
      sb *= db;
    }
  }
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each_pair(const Broadcast& p, F&& f) {
  const std::size_t n = numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::same:
      for (std::size_t o = 0; o < n; ++o) f(o, o, o);
      break;
    case Broadcast::Kind::scalar_b:
      for (std::size_t o = 0; o < n; ++o) f(o, o, std::size_t{0});
      break;
    case Broadcast::Kind::scalar_a:
      for (std::size_t o = 0; o < n; ++o) f(o, std::size_t{0}, o);
      break;
    case Broadcast::Kind::suffix_b:
      for (std::size_t o = 0; o < n; o += p.inner)
        for (std::size_t j = 0; j < p.inner; ++j) f(o + j, o + j, j);
      break;
    case Broadcast::Kind::suffix_a:
      for (std::size_t o = 0; o < n; o += p.inner)
        for (std::size_t j = 0; j < p.inner; ++j) f(o + j, j, o + j);
      break;
    case Broadcast::Kind::general: {
      const std::size_t rank = p.out.size();
      std::vector<std::size_t> idx(rank, 0);
      std::size_t ia = 0, ib = 0;
      for (std::size_t o = 0; o < n; ++o) {
        f(o, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
          ++idx[d];
          ia += p.a_strides[d];
          ib += p.b_strides[d];
          if (idx[d] < p.out[d]) break;
          ia -= p.a_strides[d] * idx[d];
          ib -= p.b_strides[d] * idx[d];
          idx[d] = 0;
        }
      }
      break;
    }
  }
}

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m,n) += A(k,m)^T * B(k,n)
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transpose_2d(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

// C(m,n) += A(m,k) * B(n,k)^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto bt = transpose_2d(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(
      x.shape(), std::move(out), op, {x},
      [df](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        const auto& in = self.parents[0]->value;
        auto& gx = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], self.value[i]);
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape(), "add");
  std::vector<T> out(numel(plan.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] + bv[ib];
  });
  Shape shape = plan.out;
  return make_result<T>(
      std::move(shape), std::move(out), "add", {a, b},
      [plan](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (pg[0]) (*pg[0])[ia] += g[o];
          if (pg[1]) (*pg[1])[ib] += g[o];
        });
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape(), "sub");
  std::vector<T> out(numel(plan.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] - bv[ib];
  });
  Shape shape = plan.out;
  return make_result<T>(
      std::move(shape), std::move(out), "sub", {a, b},
      [plan](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (pg[0]) (*pg[0])[ia] += g[o];
          if (pg[1]) (*pg[1])[ib] -= g[o];
        });
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape(), "mul");
  std::vector<T> out(numel(plan.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] * bv[ib];
  });
  Shape shape = plan.out;
  return make_result<T>(
      std::move(shape), std::move(out), "mul", {a, b},
      [plan](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (pg[0]) (*pg[0])[ia] += g[o] * bv[ib];
          if (pg[1]) (*pg[1])[ib] += g[o] * av[ia];
        });
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape(), "div");
  std::vector<T> out(numel(plan.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] / bv[ib];
  });
  Shape shape = plan.out;
  return make_result<T>(
      std::move(shape), std::move(out), "div", {a, b},
      [plan](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
        const auto& bv = self.parents[1]->value;
        detail::for_each_pair(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (pg[0]) (*pg[0])[ia] += g[o] / bv[ib];
          if (pg[1]) (*pg[1])[ib] -= g[o] * self.value[o] / bv[ib];
        });
      });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "mul_scalar", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// Square root; every element must be strictly positive.
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) {
      throw DomainError("sqrt of non-positive value " + std::to_string(static_cast<double>(v)));
    }
  }
  return detail::unary(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

/// sqrt(x + eps) for inputs known to be non-negative.
template <class T>
Tensor<T> sqrt_guarded(const Tensor<T>& x, T eps) {
  return sqrt(add_scalar(x, eps));
}

/// Natural log; every element must be strictly positive.
template <class T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) {
      throw DomainError("log of non-positive value " + std::to_string(static_cast<double>(v)));
    }
  }
  return detail::unary(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

/// log(max(x, floor)); the gradient is zero where the floor is active.
template <class T>
Tensor<T> log_guarded(const Tensor<T>& x, T floor) {
  return detail::unary(
      x, "log_guarded", [floor](T v) { return std::log(v > floor ? v : floor); },
      [floor](T v, T) { return v > floor ? T(1) / v : T(0); });
}

namespace detail {

/// exp for float that the compiler can vectorise: 2^round(y) * p(y - round(y))
/// with a degree-6 Taylor polynomial of 2^f on |f| <= 0.5 (relative error ~1e-7).
inline float exp_fast(float x) {
  x = std::min(std::max(x, -87.0f), 87.0f);
  const float y = x * 1.44269504088896341f;
  const float r = (y + 12582912.0f) - 12582912.0f;
  const float f = y - r;
  float p = 1.5403530393381609e-4f;
  p = p * f + 1.3333558146428443e-3f;
  p = p * f + 9.6181291076284772e-3f;
  p = p * f + 5.5504108664821580e-2f;
  p = p * f + 2.4022650695910071e-1f;
  p = p * f + 6.9314718055994531e-1f;
  p = p * f + 1.0f;
  const std::int32_t e = static_cast<std::int32_t>(r) + 127;
  return p * std::bit_cast<float>(e << 23);
}

template <class T>
T exp_kernel(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return exp_fast(x);
  } else {
    return std::exp(x);
  }
}

}  // namespace detail

/// GELU in its tanh form, x * sigmoid(2 * sqrt(2/pi) * (x + 0.044715 x^3)).
/// The derivative is stored during the forward pass.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(2) * T(0.7978845608028654);
  constexpr T a = T(0.044715);
  const auto& xv = x.values();
  const std::size_t n = xv.size();
  std::vector<T> out(n);
  const bool track = grad_enabled() && x.requires_grad();
  std::vector<T> deriv(track ? n : 0);
  const T* in = xv.data();
  T* o = out.data();
  if (track) {
    T* dv = deriv.data();
    for (std::size_t i = 0; i < n; ++i) {
      const T v = in[i];
      const T s = T(1) / (T(1) + detail::exp_kernel(-c * (v + a * v * v * v)));
      o[i] = v * s;
      dv[i] = s + v * s * (T(1) - s) * c * (T(1) + T(3) * a * v * v);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const T v = in[i];
      o[i] = v / (T(1) + detail::exp_kernel(-c * (v + a * v * v * v)));
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), "gelu", {x},
      [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * self.saved[i];
      },
      std::move(deriv));
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }
template <class T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return make_result<T>(
      std::move(shape), x.values(), "reshape", {x},
      [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
}

/// General axis permutation: output axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    if (p >= rank || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  // Flat source index for every output element, reused by backward.
  const std::size_t n = x.size();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      (*index)[o] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        src += src_strides[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_strides[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[(*index)[o]];
  return make_result<T>(
      std::move(out_shape), std::move(out), "permute", {x},
      [index](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (std::size_t o = 0; o < g.size(); ++o) gx[(*index)[o]] += g[o];
      });
}

/// Swaps two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x, long axis0, long axis1) {
  const auto a = detail::normalize_axis(axis0, x.rank(), "transpose");
  const auto b = detail::normalize_axis(axis1, x.rank(), "transpose");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a], perm[b]);
  return permute(x, perm);
}

/// Half-open range [begin, end) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
  const auto ax = detail::normalize_axis(axis, x.rank(), "slice");
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(x.shape()[ax]));
  }
  const auto s = detail::split_at(x.shape(), ax);
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  std::vector<T> out(s.outer * len * s.inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* src = xv.data() + (o * s.extent + begin) * s.inner;
    std::copy(src, src + len * s.inner, out.data() + o * len * s.inner);
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), "slice", {x},
      [s, begin, len](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (std::size_t o = 0; o < s.outer; ++o) {
          T* dst = gx.data() + (o * s.extent + begin) * s.inner;
          const T* src = g.data() + o * len * s.inner;
          for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
        }
      });
}

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, long axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) {
        throw ShapeError("concat: " + to_string(p.shape()) + " vs " +
                         to_string(parts[0].shape()));
      }
    }
    extents.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  const auto s = detail::split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].values();
    const std::size_t len = extents[k];
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(pv.data() + o * len * s.inner, pv.data() + (o + 1) * len * s.inner,
                out.data() + (o * s.extent + offset) * s.inner);
    }
    offset += len;
  }
  return make_result_n<T>(
      std::move(out_shape), std::move(out), "concat", parts,
      [s, extents](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          const std::size_t len = extents[k];
          if (pg[k]) {
            auto& gk = *pg[k];
            for (std::size_t o = 0; o < s.outer; ++o) {
              const T* src = g.data() + (o * s.extent + off) * s.inner;
              T* dst = gk.data() + o * len * s.inner;
              for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
            }
          }
          off += len;
        }
      });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis) {
  return concat(std::span<const Tensor<T>>(parts), axis);
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_result<T>(
      {}, {acc}, "sum", {x},
      [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        for (auto& v : *pg[0]) v += g[0];
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.size()));
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, long axis, bool keepdim = false) {
  const auto ax = detail::normalize_axis(axis, x.rank(), "sum");
  const auto s = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  }
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto& xv = x.values();
  if (s.inner == 1) {
    for (std::size_t o = 0; o < s.outer; ++o) {
      const T* src = xv.data() + o * s.extent;
      T acc = T(0);
      for (std::size_t e = 0; e < s.extent; ++e) acc += src[e];
      out[o] = acc;
    }
  } else {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T* src = xv.data() + (o * s.extent + e) * s.inner;
        T* dst = out.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), "sum_axis", {x},
      [s](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        if (s.inner == 1) {
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e) gx[o * s.extent + e] += g[o];
          return;
        }
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t e = 0; e < s.extent; ++e) {
            T* dst = gx.data() + (o * s.extent + e) * s.inner;
            const T* src = g.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
          }
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, long axis, bool keepdim = false) {
  const auto ax = detail::normalize_axis(axis, x.rank(), "mean");
  if (x.shape()[ax] == 0) throw ShapeError("mean over empty axis");
  return mul_scalar(sum(x, axis, keepdim), T(1) / static_cast<T>(x.shape()[ax]));
}

/// Variance along an axis with divisor (extent - ddof).
template <class T>
Tensor<T> variance(const Tensor<T>& x, long axis, std::size_t ddof = 0, bool keepdim = false) {
  const auto ax = detail::normalize_axis(axis, x.rank(), "variance");
  const std::size_t n = x.shape()[ax];
  if (n <= ddof) {
    throw ShapeError("variance: extent " + std::to_string(n) + " too small for ddof " +
                     std::to_string(ddof));
  }
  auto centered = sub(x, mean(x, axis, true));
  return mul_scalar(sum(square(centered), axis, keepdim), T(1) / static_cast<T>(n - ddof));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (..., m, k) x (k, n) -> (..., m, n), or batched (b, m, k) x (b, k, n) -> (b, m, n).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2) throw ShapeError("matmul: lhs must have rank >= 2, got " + to_string(a.shape()));
  if (b.rank() == 2) {
    const std::size_t k = a.shape().back();
    if (b.shape()[0] != k) {
      throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::size_t n = b.shape()[1];
    const std::size_t m = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return make_result<T>(
        std::move(out_shape), std::move(out), "matmul", {a, b},
        [m, k, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
          const auto& av = self.parents[0]->value;
          const auto& bv = self.parents[1]->value;
          if (pg[0]) detail::gemm_nt(g.data(), bv.data(), pg[0]->data(), m, n, k);
          if (pg[1]) detail::gemm_tn(av.data(), g.data(), pg[1]->data(), k, m, n);
        });
  }
  if (a.rank() == 3 && b.rank() == 3) {
    const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    if (b.shape()[0] != batch || b.shape()[1] != k) {
      throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::size_t n = b.shape()[2];
    std::vector<T> out(batch * m * n, T(0));
    for (std::size_t i = 0; i < batch; ++i) {
      detail::gemm_nn(a.values().data() + i * m * k, b.values().data() + i * k * n,
                      out.data() + i * m * n, m, k, n);
    }
    return make_result<T>(
        {batch, m, n}, std::move(out), "bmm", {a, b},
        [batch, m, k, n](const Node<T>& self, std::span<const T> g,
                         std::span<std::vector<T>*> pg) {
          const auto& av = self.parents[0]->value;
          const auto& bv = self.parents[1]->value;
          for (std::size_t i = 0; i < batch; ++i) {
            const T* gi = g.data() + i * m * n;
            if (pg[0]) detail::gemm_nt(gi, bv.data() + i * k * n, pg[0]->data() + i * m * k, m, n, k);
            if (pg[1]) detail::gemm_tn(av.data() + i * m * k, gi, pg[1]->data() + i * k * n, k, m, n);
          }
        });
  }
  throw ShapeError("matmul: unsupported operands " + to_string(a.shape()) + " x " +
                   to_string(b.shape()));
}

// ---------------------------------------------------------------------------
// Convolutions. Layout is channels-first: signals are (batch, channels, length).

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

/// Sum of a[i] * b[i * b_stride] with eight fixed partial sums (deterministic).
template <class T>
T dot_strided(const T* a, const T* b, std::size_t len, std::size_t b_stride) {
  T acc[8] = {};
  std::size_t i = 0;
  if (b_stride == 1) {
    for (; i + 8 <= len; i += 8)
      for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  } else {
    for (; i + 8 <= len; i += 8)
      for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[(i + j) * b_stride];
  }
  for (; i < len; ++i) acc[0] += a[i] * b[i * b_stride];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// Output positions o with 0 <= o * stride + tap - padding < extent, as [lo, hi).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t tap, std::size_t padding,
                                                       std::size_t stride, std::size_t extent,
                                                       std::size_t out_len) {
  const long off = static_cast<long>(tap) - static_cast<long>(padding);
  const long s = static_cast<long>(stride);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(extent) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<long>(hi, static_cast<long>(out_len));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// x (N, Cin, Lin), weight (Cout, Cin, K), bias (Cout) or undefined.
/// out[n, co, o] = bias[co] + sum_{ci, k} w[co, ci, k] * x[n, ci, o*stride - padding + k]
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 ConvGeometry geo = {}) {
  if (x.rank() != 3 || weight.rank() != 3) {
    throw ShapeError("conv1d: expected x (N, Cin, L) and weight (Cout, Cin, K), got " +
                     to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), lin = x.dim(2);
  const std::size_t cout = weight.dim(0), ksz = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv1d: input channels " + std::to_string(cin) + " vs weight " +
                     to_string(weight.shape()));
  }
  if (geo.stride == 0) throw ShapeError("conv1d: stride must be positive");
  if (lin + 2 * geo.padding < ksz) throw ShapeError("conv1d: kernel longer than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv1d: bias shape " + to_string(bias.shape()));
  }
  const std::size_t lout = (lin + 2 * geo.padding - ksz) / geo.stride + 1;
  const std::size_t st = geo.stride, pad = geo.padding;

  std::vector<T> out(batch * cout * lout, T(0));
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t co = 0; co < cout; ++co) {
      T* y = out.data() + (n * cout + co) * lout;
      if (has_bias) std::fill(y, y + lout, bias.values()[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* xr = xv + (n * cin + ci) * lin;
        for (std::size_t k = 0; k < ksz; ++k) {
          const T w = wv[(co * cin + ci) * ksz + k];
          const auto [lo, hi] = detail::valid_range(k, pad, st, lin, lout);
          const T* src = xr + (lo * st + k - pad);
          if (st == 1) {
            for (std::size_t o = 0; o < hi - lo; ++o) y[lo + o] += w * src[o];
          } else {
            for (std::size_t o = 0; o < hi - lo; ++o) y[lo + o] += w * src[o * st];
          }
        }
      }
    }

  auto backward = [=](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const T* xv = self.parents[0]->value.data();
    const T* wv = self.parents[1]->value.data();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t co = 0; co < cout; ++co) {
        const T* gy = g.data() + (n * cout + co) * lout;
        if (has_bias && pg[2]) {
          T acc = T(0);
          for (std::size_t o = 0; o < lout; ++o) acc += gy[o];
          (*pg[2])[co] += acc;
        }
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const std::size_t xoff = (n * cin + ci) * lin;
          for (std::size_t k = 0; k < ksz; ++k) {
            const std::size_t widx = (co * cin + ci) * ksz + k;
            const auto [lo, hi] = detail::valid_range(k, pad, st, lin, lout);
            if (hi == lo) continue;
            const std::size_t start = xoff + lo * st + k - pad;
            if (pg[1]) (*pg[1])[widx] += detail::dot_strided(gy + lo, xv + start, hi - lo, st);
            if (pg[0]) {
              T* dst = pg[0]->data() + start;
              const T w = wv[widx];
              if (st == 1) {
                for (std::size_t o = 0; o < hi - lo; ++o) dst[o] += w * gy[lo + o];
              } else {
                for (std::size_t o = 0; o < hi - lo; ++o) dst[o * st] += w * gy[lo + o];
              }
            }
          }
        }
      }
  };
  if (has_bias) {
    return make_result<T>({batch, cout, lout}, std::move(out), "conv1d", {x, weight, bias},
                          backward);
  }
  return make_result<T>({batch, cout, lout}, std::move(out), "conv1d", {x, weight},
                        [backward](const Node<T>& self, std::span<const T> g,
                                   std::span<std::vector<T>*> pg) {
                          std::vector<T>* ptrs[3] = {pg[0], pg[1], nullptr};
                          backward(self, g, ptrs);
                        });
}

/// Transposed convolution, the adjoint of conv1d with respect to its input.
/// x (N, Cin, Lin), weight (Cin, Cout, K), bias (Cout) or undefined.
/// Lout = (Lin - 1) * stride - 2 * padding + K + output_padding.
template <class T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           ConvGeometry geo = {}, std::size_t output_padding = 0) {
  if (x.rank() != 3 || weight.rank() != 3) {
    throw ShapeError("conv_transpose1d: expected x (N, Cin, L) and weight (Cin, Cout, K), got " +
                     to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), lin = x.dim(2);
  const std::size_t cout = weight.dim(1), ksz = weight.dim(2);
  if (weight.dim(0) != cin) {
    throw ShapeError("conv_transpose1d: input channels " + std::to_string(cin) + " vs weight " +
                     to_string(weight.shape()));
  }
  if (geo.stride == 0) throw ShapeError("conv_transpose1d: stride must be positive");
  if (output_padding >= geo.stride) {
    throw ShapeError("conv_transpose1d: output_padding must be smaller than stride");
  }
  const long lout_signed = static_cast<long>((lin - 1) * geo.stride + ksz + output_padding) -
                           2 * static_cast<long>(geo.padding);
  if (lin == 0 || lout_signed <= 0) throw ShapeError("conv_transpose1d: empty output");
  const std::size_t lout = static_cast<std::size_t>(lout_signed);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv_transpose1d: bias shape " + to_string(bias.shape()));
  }
  const std::size_t st = geo.stride, pad = geo.padding;

  // Input position i feeds output position i*stride - padding + k; valid_range
  // with extent lout gives the admissible i for each tap.
  std::vector<T> out(batch * cout * lout, T(0));
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      T* y = out.data() + (n * cout + co) * lout;
      if (has_bias) std::fill(y, y + lout, bias.values()[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* xr = xv + (n * cin + ci) * lin;
        for (std::size_t k = 0; k < ksz; ++k) {
          const T w = wv[(ci * cout + co) * ksz + k];
          const auto [lo, hi] = detail::valid_range(k, pad, st, lout, lin);
          T* dst = y + (lo * st + k - pad);
          for (std::size_t i = 0; i < hi - lo; ++i) dst[i * st] += w * xr[lo + i];
        }
      }
    }
  }

  auto backward = [=](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
    const T* xv = self.parents[0]->value.data();
    const T* wv = self.parents[1]->value.data();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t co = 0; co < cout; ++co) {
        const T* gy = g.data() + (n * cout + co) * lout;
        if (has_bias && pg[2]) {
          T acc = T(0);
          for (std::size_t o = 0; o < lout; ++o) acc += gy[o];
          (*pg[2])[co] += acc;
        }
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const std::size_t xoff = (n * cin + ci) * lin;
          for (std::size_t k = 0; k < ksz; ++k) {
            const std::size_t widx = (ci * cout + co) * ksz + k;
            const auto [lo, hi] = detail::valid_range(k, pad, st, lout, lin);
            if (hi == lo) continue;
            const T* src = gy + (lo * st + k - pad);
            if (pg[1]) (*pg[1])[widx] += detail::dot_strided(xv + xoff + lo, src, hi - lo, st);
            if (pg[0]) {
              T* dst = pg[0]->data() + xoff + lo;
              const T w = wv[widx];
              for (std::size_t i = 0; i < hi - lo; ++i) dst[i] += w * src[i * st];
            }
          }
        }
      }
  };
  if (has_bias) {
    return make_result<T>({batch, cout, lout}, std::move(out), "conv_transpose1d",
                          {x, weight, bias}, backward);
  }
  return make_result<T>({batch, cout, lout}, std::move(out), "conv_transpose1d", {x, weight},
                        [backward](const Node<T>& self, std::span<const T> g,
                                   std::span<std::vector<T>*> pg) {
                          std::vector<T>* ptrs[3] = {pg[0], pg[1], nullptr};
                          backward(self, g, ptrs);
                        });
}

// ---------------------------------------------------------------------------
// Normalisation and activations

template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  const auto ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto s = detail::split_at(x.shape(), ax);
  std::vector<T> out(x.size());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      T total = T(0);
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(xv[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  return make_result<T>(
      x.shape(), std::move(out), "softmax", {x},
      [s](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        const auto& y = self.value;
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T dot = T(0);
            for (std::size_t e = 0; e < s.extent; ++e)
              dot += g[base + e * s.inner] * y[base + e * s.inner];
            for (std::size_t e = 0; e < s.extent; ++e) {
              const std::size_t j = base + e * s.inner;
              gx[j] += y[j] * (g[j] - dot);
            }
          }
      });
}

/// Normalises over one axis (the last by default), then applies the affine
/// (gamma, beta) whose extent matches that axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5), int axis = -1) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "layer_norm");
  const std::size_t width = x.dim(ax);
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    throw ShapeError("layer_norm: affine shape mismatch for width " + std::to_string(width));
  }
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (width * inner);
  const std::size_t groups = outer * inner;
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  const T inv_w = T(1) / static_cast<T>(width);
  std::vector<T> out(x.size());
  // saved: normalised values followed by one reciprocal std per group
  std::vector<T> saved(x.size() + groups);
  std::vector<T> mu(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * width * inner;
    T* rstd = saved.data() + x.size() + o * inner;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(rstd, rstd + inner, T(0));
    for (std::size_t j = 0; j < width; ++j) {
      const T* row = xv + base + j * inner;
      for (std::size_t i = 0; i < inner; ++i) mu[i] += row[i];
    }
    for (std::size_t i = 0; i < inner; ++i) mu[i] *= inv_w;
    for (std::size_t j = 0; j < width; ++j) {
      const T* row = xv + base + j * inner;
      for (std::size_t i = 0; i < inner; ++i) rstd[i] += (row[i] - mu[i]) * (row[i] - mu[i]);
    }
    for (std::size_t i = 0; i < inner; ++i) rstd[i] = T(1) / std::sqrt(rstd[i] * inv_w + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const T* row = xv + base + j * inner;
      T* xh = saved.data() + base + j * inner;
      T* y = out.data() + base + j * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xh[i] = (row[i] - mu[i]) * rstd[i];
        y[i] = xh[i] * gv[j] + bv[j];
      }
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [outer, width, inner, inv_w](const Node<T>& self, std::span<const T> g,
                                   std::span<std::vector<T>*> pg) {
        const T* gv = self.parents[1]->value.data();
        const std::size_t total = outer * width * inner;
        std::vector<T> mean_d(inner), mean_dx(inner);
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = o * width * inner;
          const T* rstd = self.saved.data() + total + o * inner;
          std::fill(mean_d.begin(), mean_d.end(), T(0));
          std::fill(mean_dx.begin(), mean_dx.end(), T(0));
          for (std::size_t j = 0; j < width; ++j) {
            const T* gr = g.data() + base + j * inner;
            const T* xh = self.saved.data() + base + j * inner;
            if (pg[1]) {
              T acc = T(0);
              for (std::size_t i = 0; i < inner; ++i) acc += gr[i] * xh[i];
              (*pg[1])[j] += acc;
            }
            if (pg[2]) {
              T acc = T(0);
              for (std::size_t i = 0; i < inner; ++i) acc += gr[i];
              (*pg[2])[j] += acc;
            }
            for (std::size_t i = 0; i < inner; ++i) {
              const T d = gr[i] * gv[j];
              mean_d[i] += d;
              mean_dx[i] += d * xh[i];
            }
          }
          if (!pg[0]) continue;
          for (std::size_t j = 0; j < width; ++j) {
            const T* gr = g.data() + base + j * inner;
            const T* xh = self.saved.data() + base + j * inner;
            T* gx = pg[0]->data() + base + j * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              gx[i] += rstd[i] * (gr[i] * gv[j] - mean_d[i] * inv_w - xh[i] * mean_dx[i] * inv_w);
            }
          }
        }
      },
      std::move(saved));
}

/// Inverted dropout. Identity when not training or rate == 0.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, T rate, Rng& rng, bool training) {
  if (rate < T(0) || rate >= T(1)) throw ContractError("dropout: rate must lie in [0, 1)");
  if (!training || rate == T(0)) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T scale = T(1) / (T(1) - rate);
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? scale : T(0);
  std::vector<T> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_result<T>(
      x.shape(), std::move(out), "dropout", {x},
      [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
        if (!pg[0]) return;
        auto& gx = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * self.saved[i];
      },
      std::move(mask));
}

}  // namespace sleepdg::ad
