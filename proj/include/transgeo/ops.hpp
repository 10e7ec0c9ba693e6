#pragma once

// Differentiable tensor ops. Every op checks its output for NaN/Inf and, when any input
// requires grad, records a backward closure on the thread's active tape.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "transgeo/tensor.hpp"

namespace transgeo {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRM = Eigen::Map<const RowMat<T>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw TensorError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// How an input of shape `in` maps onto a broadcast output of shape `out`.
struct BroadcastPlan {
  enum class Kind { Same, Suffix, General } kind = Kind::Same;
  std::size_t in_numel = 0;
  std::vector<std::size_t> offsets;  // General only: input offset per output element
};

inline BroadcastPlan plan_broadcast(const Shape& out, const Shape& in) {
  BroadcastPlan p;
  p.in_numel = shape_numel(in);
  const std::size_t out_numel = shape_numel(out);
  if (p.in_numel == out_numel) {
    p.kind = BroadcastPlan::Kind::Same;
    return p;
  }
  // Strip leading 1s; if the rest equals the trailing dims of `out`, it tiles contiguously.
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  Shape core(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end());
  if (core.size() <= out.size() &&
      std::equal(core.begin(), core.end(), out.end() - static_cast<std::ptrdiff_t>(core.size()))) {
    p.kind = BroadcastPlan::Kind::Suffix;
    return p;
  }
  p.kind = BroadcastPlan::Kind::General;
  const std::size_t r = out.size();
  std::vector<std::size_t> in_stride(r, 0);
  {
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
      const std::size_t k = r - i;  // position from the back
      if (k <= in.size()) {
        const std::size_t d = in[in.size() - k];
        in_stride[i] = d == 1 ? 0 : s;
        s *= d;
      }
    }
  }
  p.offsets.resize(out_numel);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t n = 0; n < out_numel; ++n) {
    p.offsets[n] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      off += in_stride[i];
      if (idx[i] < out[i]) break;
      off -= in_stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return p;
}

inline std::size_t plan_index(const BroadcastPlan& p, std::size_t n) {
  switch (p.kind) {
    case BroadcastPlan::Kind::Same:
      return n;
    case BroadcastPlan::Kind::Suffix:
      return n % p.in_numel;
    default:
      return p.offsets[n];
  }
}

// Calls f(out_index, a_index, b_index) for every output element; same-shape and suffix
// broadcasts run as plain nested loops.
template <class F>
void broadcast_loop(const BroadcastPlan& pa, const BroadcastPlan& pb, std::size_t n, F&& f) {
  using K = BroadcastPlan::Kind;
  if (pa.kind == K::Same && pb.kind == K::Same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (pa.kind == K::Same && pb.kind == K::Suffix) {
    const std::size_t m = pb.in_numel;
    for (std::size_t o = 0; o < n; o += m)
      for (std::size_t j = 0; j < m; ++j) f(o + j, o + j, j);
  } else if (pa.kind == K::Suffix && pb.kind == K::Same) {
    const std::size_t m = pa.in_numel;
    for (std::size_t o = 0; o < n; o += m)
      for (std::size_t j = 0; j < m; ++j) f(o + j, j, o + j);
  } else {
    for (std::size_t i = 0; i < n; ++i) f(i, plan_index(pa, i), plan_index(pb, i));
  }
}

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto pa = std::make_shared<BroadcastPlan>(plan_broadcast(out_shape, a.shape()));
  auto pb = std::make_shared<BroadcastPlan>(plan_broadcast(out_shape, b.shape()));
  const std::size_t n = shape_numel(out_shape);
  std::vector<T> data(n);
  {
    const T* ad = a.storage().data();
    const T* bd = b.storage().data();
    T* od = data.data();
    broadcast_loop(*pa, *pb, n, [&](std::size_t i, std::size_t ia, std::size_t ib) { od[i] = fwd(ad[ia], bd[ib]); });
  }
  auto out = make_output<T>(std::move(out_shape), std::move(data), a, b);
  check_finite(out, name);
  record(out, [a, b, out, pa, pb, da, db]() {
    const auto& gv = out.node().grad;
    if (gv.empty()) return;
    const T* g = gv.data();
    const T* ad = a.storage().data();
    const T* bd = b.storage().data();
    const T* od = out.storage().data();
    if (a.requires_grad()) {
      T* ga = a.node().ensure_grad().data();
      broadcast_loop(*pa, *pb, gv.size(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += da(g[i], ad[ia], bd[ib], od[i]); });
    }
    if (b.requires_grad()) {
      T* gb = b.node().ensure_grad().data();
      broadcast_loop(*pa, *pb, gv.size(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += db(g[i], ad[ia], bd[ib], od[i]); });
    }
  });
  return out;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<T> data(x.numel());
  const auto& xd = x.storage();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = fwd(xd[i]);
  auto out = make_output<T>(x.shape(), std::move(data), x);
  check_finite(out, name);
  record(out, [x, out, deriv]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    const auto& xd = x.storage();
    const auto& od = out.storage();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], od[i]);
  });
  return out;
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw TensorError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape into (outer, axis extent, inner) around `axis`.
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T, T) { return g; },
      [](T g, T, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T, T) { return g; },
      [](T g, T, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y, T) { return g * y; },
      [](T g, T x, T, T) { return g * x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  const std::size_t n = x.numel();
  const auto& v = x.storage();
  auto th = std::make_shared<std::vector<T>>(n);
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    (*th)[i] = std::tanh(c * (v[i] + k * v[i] * v[i] * v[i]));
    data[i] = T(0.5) * v[i] * (T(1) + (*th)[i]);
  }
  auto out = detail::make_output<T>(x.shape(), std::move(data), x);
  detail::check_finite(out, "gelu");
  detail::record(out, [x, out, th]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    const auto& v = x.storage();
    auto& gx = x.node().ensure_grad();
    const auto& t = *th;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = T(0.5) * (T(1) + t[i]) + T(0.5) * v[i] * (T(1) - t[i] * t[i]) * (c * (T(1) + T(3) * k * v[i] * v[i]));
      gx[i] += g[i] * d;
    }
  });
  return out;
}

/// log(1 + e^x), evaluated without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary<T>(
      x, "softplus",
      [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      });
}

/// Matrix product. Supports [m,k]x[k,n], batched [B,m,k]x[B,k,n] and [B,m,k]x[k,n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::CMapRM;
  using detail::MapRM;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0], k = as[1], n = bs[1];
    if (bs[0] != k) throw TensorError("matmul shape mismatch " + shape_str(as) + " x " + shape_str(bs));
    out_shape = {m, n};
  } else if (as.size() == 3 && bs.size() == 3) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
    if (bs[0] != batch || bs[1] != k) {
      throw TensorError("matmul shape mismatch " + shape_str(as) + " x " + shape_str(bs));
    }
    out_shape = {batch, m, n};
  } else if (as.size() == 3 && bs.size() == 2) {
    // Flatten the batch into rows.
    m = as[0] * as[1], k = as[2], n = bs[1];
    if (bs[0] != k) throw TensorError("matmul shape mismatch " + shape_str(as) + " x " + shape_str(bs));
    out_shape = {as[0], as[1], n};
  } else {
    throw TensorError("matmul unsupported ranks " + shape_str(as) + " x " + shape_str(bs));
  }
  std::vector<T> data(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    CMapRM<T> A(a.storage().data() + bi * m * k, Eigen::Index(m), Eigen::Index(k));
    CMapRM<T> B(b.storage().data() + bi * k * n, Eigen::Index(k), Eigen::Index(n));
    MapRM<T> C(data.data() + bi * m * n, Eigen::Index(m), Eigen::Index(n));
    C.noalias() = A * B;
  }
  auto out = detail::make_output<T>(std::move(out_shape), std::move(data), a, b);
  detail::check_finite(out, "matmul");
  detail::record(out, [a, b, out, batch, m, k, n]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    for (std::size_t bi = 0; bi < batch; ++bi) {
      CMapRM<T> G(g.data() + bi * m * n, Eigen::Index(m), Eigen::Index(n));
      if (a.requires_grad()) {
        MapRM<T> GA(a.node().ensure_grad().data() + bi * m * k, Eigen::Index(m), Eigen::Index(k));
        CMapRM<T> B(b.storage().data() + bi * k * n, Eigen::Index(k), Eigen::Index(n));
        GA.noalias() += G * B.transpose();
      }
      if (b.requires_grad()) {
        MapRM<T> GB(b.node().ensure_grad().data() + bi * k * n, Eigen::Index(k), Eigen::Index(n));
        CMapRM<T> A(a.storage().data() + bi * m * k, Eigen::Index(m), Eigen::Index(k));
        GB.noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

/// Reorders axes: output axis i is input axis `axes[i]`.
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (axes.size() != r) throw TensorError("permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw TensorError("permute: invalid axes");
    seen[ax] = true;
  }
  std::vector<std::size_t> in_stride(r);
  {
    std::size_t st = 1;
    for (std::size_t i = r; i-- > 0;) {
      in_stride[i] = st;
      st *= s[i];
    }
  }
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[axes[i]];
    step[i] = in_stride[axes[i]];
  }
  // map[o] = input offset of output element o
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < map->size(); ++o) {
      (*map)[o] = off;
      for (std::size_t i = r; i-- > 0;) {
        ++idx[i];
        off += step[i];
        if (idx[i] < out_shape[i]) break;
        off -= step[i] * idx[i];
        idx[i] = 0;
      }
    }
  }
  std::vector<T> data(x.numel());
  const auto& xd = x.storage();
  for (std::size_t o = 0; o < data.size(); ++o) data[o] = xd[(*map)[o]];
  auto out = detail::make_output<T>(std::move(out_shape), std::move(data), x);
  detail::record(out, [x, out, map]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*map)[o]] += g[o];
  });
  return out;
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw TensorError("transpose needs rank >= 2");
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw TensorError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto out = detail::make_output<T>(std::move(shape), x.storage(), x);
  detail::record(out, [x, out]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

/// Numerically stable softmax along `axis` (max subtraction).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto [outer, len, inner] = detail::split_axis(x.shape(), ax);
  std::vector<T> data(x.numel());
  const auto& xd = x.storage();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        data[base + j * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < len; ++j) data[base + j * inner] *= inv;
    }
  }
  auto out = detail::make_output<T>(x.shape(), std::move(data), x);
  detail::check_finite(out, "softmax");
  detail::record(out, [x, out, outer = outer, len = len, inner = inner]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    const auto& y = out.storage();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t i = base + j * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
  return out;
}

/// Normalizes each trailing vector to zero mean / unit variance, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw TensorError("layer_norm: gain/bias size does not match last dim " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> data(x.numel());
  const auto& xd = x.storage();
  const auto& gd = gain.storage();
  const auto& bd = bias.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      data[r * d + j] = h * gd[j] + bd[j];
    }
  }
  auto out = detail::make_output<T>(x.shape(), std::move(data), x, gain, bias);
  detail::check_finite(out, "layer_norm");
  detail::record(out, [x, gain, bias, out, xhat, rstd, d, rows]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    const auto& gd = gain.storage();
    if (gain.requires_grad()) {
      auto& gg = gain.node().ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
    }
    if (bias.requires_grad()) {
      auto& gb = bias.node().ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    }
    if (x.requires_grad()) {
      auto& gx = x.node().ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T sum_dh = 0, sum_dh_h = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g[r * d + j] * gd[j];
          sum_dh += dh;
          sum_dh_h += dh * (*xhat)[r * d + j];
        }
        const T rs = (*rstd)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g[r * d + j] * gd[j];
          gx[r * d + j] += rs * (dh - sum_dh / T(d) - (*xhat)[r * d + j] * sum_dh_h / T(d));
        }
      }
    }
  });
  return out;
}

/// Concatenates tensors along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis = 0) {
  if (parts.empty()) throw TensorError("concat of zero tensors");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw TensorError("concat rank mismatch");
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
        throw TensorError("concat extent mismatch " + shape_str(p.shape()));
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  const auto [outer, total_len, inner] = detail::split_axis(out_shape, ax);
  std::vector<T> data(shape_numel(out_shape));
  bool any_grad = false;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    any_grad = any_grad || p.requires_grad();
    const std::size_t len = p.shape()[ax];
    const auto& pd = p.storage();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.data() + o * len * inner, len * inner,
                  data.data() + (o * total_len + offset) * inner);
    }
    offset += len;
  }
  auto out = Tensor<T>::from(std::move(out_shape), std::move(data), false);
  if (detail::grad_mode() && any_grad) {
    out.set_requires_grad(true);
    out.node().generation = active_tape<T>().generation();
  }
  detail::record(out, [parts, out, ax, outer = outer, total_len = total_len, inner = inner]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.shape()[ax];
      if (p.requires_grad()) {
        auto& gp = p.node().ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + (o * total_len + offset) * inner;
          T* dst = gp.data() + o * len * inner;
          for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      }
      offset += len;
    }
  });
  return out;
}

/// Selects rows (axis 0) in the order given by `idx`; backward scatter-adds.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw TensorError("gather_rows with empty index list");
  const std::size_t rows = x.dim(0);
  const std::size_t row_len = x.numel() / rows;
  for (auto i : idx) {
    if (i >= rows) throw TensorError("gather_rows index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  std::vector<T> data(idx.size() * row_len);
  const auto& xd = x.storage();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(xd.data() + idx[r] * row_len, row_len, data.data() + r * row_len);
  }
  auto out = detail::make_output<T>(std::move(out_shape), std::move(data), x);
  detail::record(out, [x, out, idx, row_len]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < row_len; ++j) gx[idx[r] * row_len + j] += g[r * row_len + j];
    }
  });
  return out;
}

/// Scales each trailing vector to unit Euclidean norm. A zero vector is an error.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto norms = std::make_shared<std::vector<T>>(rows);
  std::vector<T> data(x.numel());
  const auto& xd = x.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xd[r * d + j] * xd[r * d + j];
    const T nrm = std::sqrt(s);
    if (!(nrm > T(0))) throw TensorError("l2_normalize of a zero-norm vector");
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) data[r * d + j] = xd[r * d + j] / nrm;
  }
  auto out = detail::make_output<T>(x.shape(), std::move(data), x);
  detail::check_finite(out, "l2_normalize");
  detail::record(out, [x, out, norms, d, rows]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    const auto& y = out.storage();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      const T inv = T(1) / (*norms)[r];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) * inv;
    }
  });
  return out;
}

/// Sum of all elements as a [1] tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto out = detail::make_output<T>(Shape{1}, std::vector<T>{s}, x);
  detail::check_finite(out, "sum");
  detail::record(out, [x, out]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    for (auto& v : gx) v += g[0];
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Sum along one axis. With keepdim the axis stays with extent 1.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, long axis, bool keepdim = true) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto [outer, len, inner] = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim || out_shape.size() == 1) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<T> data(outer * inner, T(0));
  const auto& xd = x.storage();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t in = 0; in < inner; ++in) data[o * inner + in] += xd[(o * len + j) * inner + in];
  auto out = detail::make_output<T>(std::move(out_shape), std::move(data), x);
  detail::check_finite(out, "sum_axis");
  detail::record(out, [x, out, outer = outer, len = len, inner = inner]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t in = 0; in < inner; ++in) gx[(o * len + j) * inner + in] += g[o * inner + in];
  });
  return out;
}

/// Main diagonal of a square matrix as a vector.
template <class T>
Tensor<T> diag(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(0) != x.dim(1)) throw TensorError("diag needs a square matrix");
  const std::size_t n = x.dim(0);
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = x.storage()[i * n + i];
  auto out = detail::make_output<T>(Shape{n}, std::move(data), x);
  detail::record(out, [x, out, n]() {
    const auto& g = out.node().grad;
    if (g.empty()) return;
    auto& gx = x.node().ensure_grad();
    for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += g[i];
  });
  return out;
}

}  // namespace transgeo
