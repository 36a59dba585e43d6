#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffseg/tensor.hpp"

namespace diffseg {

/// Floor applied inside log(); values at or below it get a zero derivative.
inline constexpr double kLogFloor = 1e-12;

namespace detail {

/// Right-aligned broadcast result shape. Dims must match or be 1.
inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                        const char* op) {
  size_t r = std::max(a.size(), b.size());
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int ad = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int bd = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ad != bd && ad != 1 && bd != 1) {
      throw std::invalid_argument(std::string(op) + ": shapes " + Tensor<float>::shape_string(a) +
                                  " and " + Tensor<float>::shape_string(b) +
                                  " are not broadcast-compatible");
    }
    out[i] = std::max(ad, bd);
  }
  return out;
}

/// Strides of `shape` right-aligned against `out_shape`, 0 on broadcast dims.
inline std::vector<int64_t> broadcast_strides(const std::vector<int>& shape,
                                              const std::vector<int>& out_shape) {
  std::vector<int64_t> own = strides_of(shape);
  size_t pad = out_shape.size() - shape.size();
  std::vector<int64_t> st(out_shape.size(), 0);
  for (size_t i = 0; i < shape.size(); ++i) {
    st[pad + i] = (shape[i] == 1 && out_shape[pad + i] != 1) ? 0 : own[i];
  }
  return st;
}

template <typename T, typename F>
Tensor<T> map2(const Tensor<T>& a, const Tensor<T>& b, F&& f, const char* op) {
  if (a.shape == b.shape) {
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.is_scalar() && b.rank() == 0) {
    Tensor<T> out(a.shape);
    T bv = b[0];
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  if (a.is_scalar() && a.rank() == 0) {
    Tensor<T> out(b.shape);
    T av = a[0];
    for (int64_t i = 0; i < b.numel(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  std::vector<int> os = broadcast_shape(a.shape, b.shape, op);
  Tensor<T> out(os);
  std::vector<int64_t> ast = broadcast_strides(a.shape, os);
  std::vector<int64_t> bst = broadcast_strides(b.shape, os);
  std::vector<int> idx(os.size(), 0);
  int64_t ao = 0, bo = 0;
  for (int64_t i = 0;; ++i) {
    out[i] = f(a[ao], b[bo]);
    int ax = static_cast<int>(os.size()) - 1;
    for (; ax >= 0; --ax) {
      ++idx[ax];
      ao += ast[ax];
      bo += bst[ax];
      if (idx[ax] < os[ax]) break;
      ao -= ast[ax] * os[ax];
      bo -= bst[ax] * os[ax];
      idx[ax] = 0;
    }
    if (ax < 0) break;
  }
  return out;
}

/// Sum `g` down to `target` shape (inverse of broadcasting to g.shape).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const std::vector<int>& target) {
  if (g.shape == target) return g;
  Tensor<T> out(target, T(0));
  if (target.empty()) {
    T acc = 0;
    for (int64_t i = 0; i < g.numel(); ++i) acc += g[i];
    out[0] = acc;
    return out;
  }
  std::vector<int64_t> tst = broadcast_strides(target, g.shape);
  std::vector<int> idx(g.shape.size(), 0);
  int64_t to = 0;
  for (int64_t i = 0;; ++i) {
    out[to] += g[i];
    int ax = static_cast<int>(g.shape.size()) - 1;
    for (; ax >= 0; --ax) {
      ++idx[ax];
      to += tst[ax];
      if (idx[ax] < g.shape[ax]) break;
      to -= tst[ax] * g.shape[ax];
      idx[ax] = 0;
    }
    if (ax < 0) break;
  }
  return out;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

/// Max-subtracted softmax over axis 0. Shared by the Graph primitive and the
/// inference path so both produce bitwise-identical probabilities.
template <typename T>
Tensor<T> softmax_axis0(const Tensor<T>& in) {
  if (in.rank() < 1 || in.shape[0] < 2) {
    throw std::invalid_argument("softmax_channel: need rank >= 1 with C >= 2, got " +
                                Tensor<T>::shape_string(in.shape));
  }
  int C = in.shape[0];
  int64_t S = in.numel() / C;
  Tensor<T> out(in.shape);
  for (int64_t j = 0; j < S; ++j) {
    T m = in[j];
    for (int c = 1; c < C; ++c) m = std::max(m, in[c * S + j]);
    T sum = 0;
    for (int c = 0; c < C; ++c) {
      T e = std::exp(in[c * S + j] - m);
      out[c * S + j] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) out[c * S + j] /= sum;
  }
  return out;
}

}  // namespace detail

/// Reverse-mode tape. Records primitives on forward, replays them backward.
/// One Graph serves one forward+backward pass on one thread; independent
/// graphs may run concurrently.
template <typename T>
class Graph {
 public:
  using Var = int;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ------------------------------------------------------------

  /// Leaf with no gradient tracking (targets, fixed inputs).
  Var constant(Tensor<T> v) { return record(std::move(v), "constant", nullptr, false); }

  /// Leaf tracked for gradients but not part of the parameter set.
  Var input(Tensor<T> v) { return record(std::move(v), "input", nullptr, true); }

  /// Named trainable leaf.
  Var param(const std::string& name, Tensor<T> v) {
    if (name.empty()) throw std::invalid_argument("param: empty name");
    for (const auto& [n, id] : params_) {
      if (n == name) throw std::invalid_argument("param: duplicate name '" + name + "'");
    }
    Var id = record(std::move(v), "param", nullptr, true);
    nodes_[static_cast<size_t>(id)].name = name;
    params_.emplace_back(name, id);
    return id;
  }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    return binary(a, b, "add", [](T x, T y) { return x + y; },
                  [](T, T, T g) { return std::pair<T, T>{g, g}; });
  }
  Var sub(Var a, Var b) {
    return binary(a, b, "sub", [](T x, T y) { return x - y; },
                  [](T, T, T g) { return std::pair<T, T>{g, -g}; });
  }
  Var mul(Var a, Var b) {
    return binary(a, b, "mul", [](T x, T y) { return x * y; },
                  [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; });
  }
  Var div(Var a, Var b) {
    return binary(a, b, "div", [](T x, T y) { return x / y; },
                  [](T x, T y, T g) { return std::pair<T, T>{g / y, -g * x / (y * y)}; });
  }

  Var neg(Var a) {
    return unary(a, "neg", [](T x) { return -x; }, [](T, T, T g) { return -g; });
  }
  Var scalar_mul(Var a, T s) {
    return unary(a, "scalar_mul", [s](T x) { return s * x; }, [s](T, T, T g) { return s * g; });
  }
  Var scalar_add(Var a, T s) {
    return unary(a, "scalar_add", [s](T x) { return x + s; }, [](T, T, T g) { return g; });
  }
  Var exp(Var a) {
    return unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
  }
  /// log with the kLogFloor clamp; clamped region has zero derivative.
  Var log(Var a) {
    const T floor_v = static_cast<T>(kLogFloor);
    return unary(a, "log", [floor_v](T x) { return std::log(x < floor_v ? floor_v : x); },
                 [floor_v](T x, T, T g) { return x < floor_v ? T(0) : g / x; });
  }
  Var square(Var a) {
    return unary(a, "square", [](T x) { return x * x; }, [](T x, T, T g) { return T(2) * x * g; });
  }
  Var relu(Var a) {
    return unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
                 [](T x, T, T g) { return x > T(0) ? g : T(0); });
  }
  Var silu(Var a) {
    return unary(a, "silu", [](T x) { return x * detail::stable_sigmoid(x); },
                 [](T x, T, T g) {
                   T s = detail::stable_sigmoid(x);
                   return g * s * (T(1) + x * (T(1) - s));
                 });
  }
  /// Gradient passes through where lo <= x <= hi, zero outside.
  Var clamp(Var a, T lo, T hi) {
    return unary(a, "clamp", [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
                 [lo, hi](T x, T, T g) { return (x >= lo && x <= hi) ? g : T(0); });
  }

  // ---- structure ---------------------------------------------------------

  Var reshape(Var a, std::vector<int> new_shape) {
    const Tensor<T>& av = val(a);
    if (Tensor<T>::numel_of(new_shape) != av.numel()) {
      throw std::invalid_argument("reshape: numel mismatch " + Tensor<T>::shape_string(av.shape) +
                                  " -> " + Tensor<T>::shape_string(new_shape));
    }
    Tensor<T> out(new_shape, av.data);
    std::vector<int> old_shape = av.shape;
    Var id = next_id();
    return record(std::move(out), "reshape",
                  [this, a, id, old_shape]() {
                    Tensor<T> g = nodes_[static_cast<size_t>(id)].grad;
                    g.shape = old_shape;
                    accum(a, std::move(g));
                  },
                  requires_grad(a));
  }

  Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const Tensor<T>& first = val(xs[0]);
    int r = first.rank();
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
    std::vector<int> os = first.shape;
    for (size_t i = 1; i < xs.size(); ++i) {
      const Tensor<T>& v = val(xs[i]);
      if (v.rank() != r) throw std::invalid_argument("concat: rank mismatch");
      for (int d = 0; d < r; ++d) {
        if (d != axis && v.shape[static_cast<size_t>(d)] != os[static_cast<size_t>(d)]) {
          throw std::invalid_argument("concat: shapes " + Tensor<T>::shape_string(os) + " and " +
                                      Tensor<T>::shape_string(v.shape) + " differ off-axis");
        }
      }
      os[static_cast<size_t>(axis)] += v.shape[static_cast<size_t>(axis)];
    }
    // outer: product of dims before axis; inner: product after
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];
    Tensor<T> out(os);
    int64_t off = 0;
    for (Var x : xs) {
      const Tensor<T>& v = val(x);
      int64_t ax = v.shape[static_cast<size_t>(axis)];
      for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(v.data.begin() + o * ax * inner, ax * inner,
                    out.data.begin() + o * static_cast<int64_t>(os[static_cast<size_t>(axis)]) * inner +
                        off * inner);
      }
      off += ax;
    }
    bool rg = false;
    std::vector<std::pair<Var, int>> parts;  // (var, axis size)
    for (Var x : xs) {
      rg = rg || requires_grad(x);
      parts.emplace_back(x, val(x).shape[static_cast<size_t>(axis)]);
    }
    int axis_total = os[static_cast<size_t>(axis)];
    Var id = next_id();
    return record(std::move(out), "concat",
                  [this, id, parts, outer, inner, axis_total]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    int64_t off2 = 0;
                    for (auto& [x, ax] : parts) {
                      if (requires_grad(x)) {
                        Tensor<T> gx(val(x).shape, T(0));
                        for (int64_t o = 0; o < outer; ++o) {
                          std::copy_n(g.data.begin() + o * static_cast<int64_t>(axis_total) * inner +
                                          off2 * inner,
                                      static_cast<int64_t>(ax) * inner,
                                      gx.data.begin() + o * static_cast<int64_t>(ax) * inner);
                        }
                        accum(x, std::move(gx));
                      }
                      off2 += ax;
                    }
                  },
                  rg);
  }

  Var slice(Var a, int axis, int start, int len) {
    const Tensor<T>& av = val(a);
    int r = av.rank();
    if (axis < 0 || axis >= r) throw std::invalid_argument("slice: axis out of range");
    int dim = av.shape[static_cast<size_t>(axis)];
    if (start < 0 || len <= 0 || start + len > dim) {
      throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                  std::to_string(start + len) + ") outside dim " + std::to_string(dim));
    }
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= av.shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= av.shape[static_cast<size_t>(d)];
    std::vector<int> os = av.shape;
    os[static_cast<size_t>(axis)] = len;
    Tensor<T> out(os);
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(av.data.begin() + (o * dim + start) * inner, static_cast<int64_t>(len) * inner,
                  out.data.begin() + o * len * inner);
    }
    Var id = next_id();
    return record(std::move(out), "slice",
                  [this, id, a, axis, start, len, outer, inner]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    const Tensor<T>& av2 = val(a);
                    int dim2 = av2.shape[static_cast<size_t>(axis)];
                    Tensor<T> gx(av2.shape, T(0));
                    for (int64_t o = 0; o < outer; ++o) {
                      std::copy_n(g.data.begin() + o * len * inner, static_cast<int64_t>(len) * inner,
                                  gx.data.begin() + (o * dim2 + start) * inner);
                    }
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  /// Softmax over axis 0 (channels), max-subtracted for stability.
  Var softmax_channel(Var a) {
    const Tensor<T>& av = val(a);
    Tensor<T> out = detail::softmax_axis0(av);
    int C = av.shape[0];
    int64_t S = av.numel() / C;
    Var id = next_id();
    return record(std::move(out), "softmax_channel",
                  [this, id, a, C, S]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    const Tensor<T>& p = nodes_[static_cast<size_t>(id)].value;
                    Tensor<T> gx(p.shape);
                    for (int64_t j = 0; j < S; ++j) {
                      T dot = 0;
                      for (int c = 0; c < C; ++c) dot += g[c * S + j] * p[c * S + j];
                      for (int c = 0; c < C; ++c) {
                        gx[c * S + j] = p[c * S + j] * (g[c * S + j] - dot);
                      }
                    }
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  /// y[o] = sum_i w[o,i] x[i] + b[o]
  Var linear(Var x, Var w, Var b) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    const Tensor<T>& bv = val(b);
    if (xv.rank() != 1 || wv.rank() != 2 || bv.rank() != 1 || wv.shape[1] != xv.shape[0] ||
        wv.shape[0] != bv.shape[0]) {
      throw std::invalid_argument("linear: incompatible shapes x" + Tensor<T>::shape_string(xv.shape) +
                                  " w" + Tensor<T>::shape_string(wv.shape) + " b" +
                                  Tensor<T>::shape_string(bv.shape));
    }
    int O = wv.shape[0], I = wv.shape[1];
    Tensor<T> out({O});
    for (int o = 0; o < O; ++o) {
      T acc = bv[o];
      for (int i = 0; i < I; ++i) acc += wv[o * I + i] * xv[i];
      out[o] = acc;
    }
    Var id = next_id();
    return record(std::move(out), "linear",
                  [this, id, x, w, b, O, I]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    const Tensor<T>& xv2 = val(x);
                    const Tensor<T>& wv2 = val(w);
                    if (requires_grad(x)) {
                      Tensor<T> gx({I}, T(0));
                      for (int o = 0; o < O; ++o)
                        for (int i = 0; i < I; ++i) gx[i] += g[o] * wv2[o * I + i];
                      accum(x, std::move(gx));
                    }
                    if (requires_grad(w)) {
                      Tensor<T> gw({O, I});
                      for (int o = 0; o < O; ++o)
                        for (int i = 0; i < I; ++i) gw[o * I + i] = g[o] * xv2[i];
                      accum(w, std::move(gw));
                    }
                    if (requires_grad(b)) {
                      Tensor<T> gb = g;
                      accum(b, std::move(gb));
                    }
                  },
                  requires_grad(x) || requires_grad(w) || requires_grad(b));
  }

  /// 3D convolution: input [Cin,D,H,W], kernels [Cout,Cin,k,k,k], bias [Cout].
  /// Output spatial dims: floor((N + 2*padding - k)/stride) + 1.
  Var conv3(Var in, Var ker, Var bias, int stride, int padding) {
    const Tensor<T>& iv = val(in);
    const Tensor<T>& kv = val(ker);
    const Tensor<T>& bv = val(bias);
    if (iv.rank() != 4) throw std::invalid_argument("conv3: input must be [Cin,D,H,W]");
    if (kv.rank() != 5) throw std::invalid_argument("conv3: kernels must be [Cout,Cin,k,k,k]");
    int ci_n = iv.shape[0], D = iv.shape[1], H = iv.shape[2], W = iv.shape[3];
    int co_n = kv.shape[0], k = kv.shape[2];
    if (kv.shape[1] != ci_n) {
      throw std::invalid_argument("conv3: input has " + std::to_string(ci_n) +
                                  " channels but kernels expect " + std::to_string(kv.shape[1]));
    }
    if (kv.shape[3] != k || kv.shape[4] != k || k % 2 == 0) {
      throw std::invalid_argument("conv3: kernel must be cubic with odd size");
    }
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv3: stride must be 1 or 2");
    if (stride == 1 && padding != (k - 1) / 2) {
      throw std::invalid_argument("conv3: stride-1 convolutions require padding (k-1)/2");
    }
    if (bv.rank() != 1 || bv.shape[0] != co_n) {
      throw std::invalid_argument("conv3: bias must be [Cout]");
    }
    auto out_dim = [&](int n) { return (n + 2 * padding - k) / stride + 1; };
    int Do = out_dim(D), Ho = out_dim(H), Wo = out_dim(W);
    if (Do <= 0 || Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv3: empty output");

    Tensor<T> out({co_n, Do, Ho, Wo});
    conv3_forward(iv, kv, bv, out, stride, padding);
    Var id = next_id();
    bool in_rg = requires_grad(in);
    bool ker_rg = requires_grad(ker);
    bool bias_rg = requires_grad(bias);
    return record(std::move(out), "conv3",
                  [this, id, in, ker, bias, stride, padding, in_rg, ker_rg, bias_rg]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    const Tensor<T>& iv2 = val(in);
                    const Tensor<T>& kv2 = val(ker);
                    if (in_rg) {
                      Tensor<T> gi(iv2.shape, T(0));
                      conv3_backward_input(g, kv2, gi, stride, padding);
                      accum(in, std::move(gi));
                    }
                    if (ker_rg) {
                      Tensor<T> gk(kv2.shape, T(0));
                      conv3_backward_kernel(g, iv2, gk, stride, padding);
                      accum(ker, std::move(gk));
                    }
                    if (bias_rg) {
                      int co_n2 = g.shape[0];
                      int64_t spatial = g.numel() / co_n2;
                      Tensor<T> gb({co_n2});
                      for (int co = 0; co < co_n2; ++co) {
                        T acc = 0;
                        for (int64_t j = 0; j < spatial; ++j) acc += g[co * spatial + j];
                        gb[co] = acc;
                      }
                      accum(bias, std::move(gb));
                    }
                  },
                  in_rg || ker_rg || bias_rg);
  }

  /// Nearest-neighbour 2x upsampling of [C,D,H,W].
  Var upsample_nearest2(Var a) {
    const Tensor<T>& av = val(a);
    if (av.rank() != 4) throw std::invalid_argument("upsample_nearest2: input must be [C,D,H,W]");
    int C = av.shape[0], D = av.shape[1], H = av.shape[2], W = av.shape[3];
    Tensor<T> out({C, 2 * D, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < 2 * D; ++d)
        for (int h = 0; h < 2 * H; ++h) {
          const T* src = &av.data[static_cast<size_t>(((c * D + d / 2) * H + h / 2)) * W];
          T* dst = &out.data[static_cast<size_t>(((c * 2 * D + d) * 2 * H + h)) * 2 * W];
          for (int w = 0; w < W; ++w) {
            dst[2 * w] = src[w];
            dst[2 * w + 1] = src[w];
          }
        }
    Var id = next_id();
    return record(std::move(out), "upsample_nearest2",
                  [this, id, a, C, D, H, W]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    Tensor<T> gx({C, D, H, W}, T(0));
                    for (int c = 0; c < C; ++c)
                      for (int d = 0; d < 2 * D; ++d)
                        for (int h = 0; h < 2 * H; ++h) {
                          const T* grow = &g.data[static_cast<size_t>(((c * 2 * D + d) * 2 * H + h)) * 2 * W];
                          T* dst = &gx.data[static_cast<size_t>(((c * D + d / 2) * H + h / 2)) * W];
                          for (int w = 0; w < W; ++w) dst[w] += grow[2 * w] + grow[2 * w + 1];
                        }
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  // ---- reductions ----------------------------------------------------------

  Var sum_all(Var a) {
    const Tensor<T>& av = val(a);
    T acc = 0;
    for (int64_t i = 0; i < av.numel(); ++i) acc += av[i];
    Var id = next_id();
    return record(Tensor<T>::scalar(acc), "sum_all",
                  [this, id, a]() {
                    T g = nodes_[static_cast<size_t>(id)].grad[0];
                    Tensor<T> gx(val(a).shape, g);
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  Var mean_all(Var a) {
    const Tensor<T>& av = val(a);
    T inv = T(1) / static_cast<T>(av.numel());
    return scalar_mul(sum_all(a), inv);
  }

  /// [C, ...] -> [C], summing over all trailing axes.
  Var sum_spatial(Var a) {
    const Tensor<T>& av = val(a);
    if (av.rank() < 2) throw std::invalid_argument("sum_spatial: need rank >= 2");
    int C = av.shape[0];
    int64_t S = av.numel() / C;
    Tensor<T> out({C});
    for (int c = 0; c < C; ++c) {
      T acc = 0;
      for (int64_t j = 0; j < S; ++j) acc += av[c * S + j];
      out[c] = acc;
    }
    Var id = next_id();
    return record(std::move(out), "sum_spatial",
                  [this, id, a, C, S]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    Tensor<T> gx(val(a).shape);
                    for (int c = 0; c < C; ++c)
                      for (int64_t j = 0; j < S; ++j) gx[c * S + j] = g[c];
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  /// [C, rest...] -> [1, rest...], summing over the channel axis.
  Var channel_sum_keepdim(Var a) {
    const Tensor<T>& av = val(a);
    if (av.rank() < 1) throw std::invalid_argument("channel_sum_keepdim: need rank >= 1");
    int C = av.shape[0];
    int64_t S = av.numel() / C;
    std::vector<int> os = av.shape;
    os[0] = 1;
    Tensor<T> out(os, T(0));
    for (int c = 0; c < C; ++c)
      for (int64_t j = 0; j < S; ++j) out[j] += av[c * S + j];
    Var id = next_id();
    return record(std::move(out), "channel_sum_keepdim",
                  [this, id, a, C, S]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    Tensor<T> gx(val(a).shape);
                    for (int c = 0; c < C; ++c)
                      for (int64_t j = 0; j < S; ++j) gx[c * S + j] = g[j];
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  /// Identity forward; blocks all gradient flow into its input.
  Var stop_gradient(Var a) { return record(Tensor<T>(val(a)), "stop_gradient", nullptr, false); }

  // ---- access / backward ---------------------------------------------------

  const Tensor<T>& val(Var v) const { return nodes_.at(static_cast<size_t>(v)).value; }

  bool requires_grad(Var v) const { return nodes_.at(static_cast<size_t>(v)).requires_grad; }

  bool has_grad(Var v) const { return nodes_.at(static_cast<size_t>(v)).has_grad; }

  /// Gradient of the last backward() w.r.t. v; zeros if no gradient reached it.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(static_cast<size_t>(v));
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape, T(0));
  }

  size_t node_count() const { return nodes_.size(); }

  /// Reverse sweep from `loss`. Returns gradients for every named parameter;
  /// parameters that do not reach the loss get zeros.
  std::map<std::string, Tensor<T>> backward(Var loss) {
    Node& ln = nodes_.at(static_cast<size_t>(loss));
    if (!ln.value.is_scalar()) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  Tensor<T>::shape_string(ln.value.shape));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    ln.grad = Tensor<T>(ln.value.shape, T(1));
    ln.has_grad = true;
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.has_grad && n.backward) n.backward();
    }
    std::map<std::string, Tensor<T>> grads;
    for (const auto& [name, id] : params_) grads.emplace(name, grad(id));
    return grads;
  }

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
    std::string name;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var next_id() const { return static_cast<Var>(nodes_.size()); }

  Var record(Tensor<T> value, const char* op, std::function<void()> bwd, bool rg) {
    for (T x : value.data) {
      if (!std::isfinite(x)) {
        throw std::runtime_error(std::string(op) + " produced non-finite values");
      }
    }
    Node n;
    n.value = std::move(value);
    n.backward = std::move(bwd);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  void accum(Var v, Tensor<T>&& g) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
    } else {
      for (int64_t i = 0; i < n.grad.numel(); ++i) n.grad[i] += g[i];
    }
  }

  template <typename FwdF, typename BwdF>
  Var unary(Var a, const char* op, FwdF fwd, BwdF bwd) {
    const Tensor<T>& av = val(a);
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i]);
    Var id = next_id();
    return record(std::move(out), op,
                  [this, id, a, bwd]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    const Tensor<T>& x = val(a);
                    const Tensor<T>& y = nodes_[static_cast<size_t>(id)].value;
                    Tensor<T> gx(x.shape);
                    for (int64_t i = 0; i < x.numel(); ++i) gx[i] = bwd(x[i], y[i], g[i]);
                    accum(a, std::move(gx));
                  },
                  requires_grad(a));
  }

  template <typename FwdF, typename BwdF>
  Var binary(Var a, Var b, const char* op, FwdF fwd, BwdF bwd) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    Tensor<T> out = detail::map2(av, bv, fwd, op);
    Var id = next_id();
    bool rg = requires_grad(a) || requires_grad(b);
    return record(std::move(out), op,
                  [this, id, a, b, bwd]() {
                    const Tensor<T>& g = nodes_[static_cast<size_t>(id)].grad;
                    const Tensor<T>& av2 = val(a);
                    const Tensor<T>& bv2 = val(b);
                    // Elementwise partials on the broadcast shape, then reduce.
                    if (requires_grad(a)) {
                      Tensor<T> full = broadcast_grad(av2, bv2, g, bwd, /*wrt_a=*/true);
                      accum(a, detail::reduce_to(full, av2.shape));
                    }
                    if (requires_grad(b)) {
                      Tensor<T> full = broadcast_grad(av2, bv2, g, bwd, /*wrt_a=*/false);
                      accum(b, detail::reduce_to(full, bv2.shape));
                    }
                  },
                  rg);
  }

  template <typename BwdF>
  static Tensor<T> broadcast_grad(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& g,
                                  BwdF bwd, bool wrt_a) {
    // g has the broadcast output shape; evaluate partials elementwise.
    Tensor<T> out(g.shape);
    if (a.shape == b.shape) {
      for (int64_t i = 0; i < g.numel(); ++i) {
        auto [ga, gb] = bwd(a[i], b[i], g[i]);
        out[i] = wrt_a ? ga : gb;
      }
      return out;
    }
    Tensor<T> av_full = detail::map2(a, b, [](T x, T) { return x; }, "grad");
    Tensor<T> bv_full = detail::map2(a, b, [](T, T y) { return y; }, "grad");
    for (int64_t i = 0; i < g.numel(); ++i) {
      auto [ga, gb] = bwd(av_full[i], bv_full[i], g[i]);
      out[i] = wrt_a ? ga : gb;
    }
    return out;
  }

  // ---- conv kernels (single-threaded, fixed summation order) -------------

  static void conv3_forward(const Tensor<T>& in, const Tensor<T>& ker, const Tensor<T>& bias,
                            Tensor<T>& out, int s, int p) {
    int ci_n = in.shape[0], D = in.shape[1], H = in.shape[2], W = in.shape[3];
    int co_n = out.shape[0], Do = out.shape[1], Ho = out.shape[2], Wo = out.shape[3];
    int k = ker.shape[2];
    const bool fast3 = (s == 1 && k == 3 && W >= 2);
    for (int co = 0; co < co_n; ++co) {
      for (int od = 0; od < Do; ++od) {
        for (int oh = 0; oh < Ho; ++oh) {
          T* orow = &out.data[static_cast<size_t>(((co * Do + od) * Ho + oh)) * Wo];
          for (int ow = 0; ow < Wo; ++ow) orow[ow] = bias[co];
          for (int ci = 0; ci < ci_n; ++ci) {
            for (int kd = 0; kd < k; ++kd) {
              int id = od * s - p + kd;
              if (id < 0 || id >= D) continue;
              for (int kh = 0; kh < k; ++kh) {
                int ih = oh * s - p + kh;
                if (ih < 0 || ih >= H) continue;
                const T* irow = &in.data[static_cast<size_t>(((ci * D + id) * H + ih)) * W];
                const T* krow = &ker.data[static_cast<size_t>((((co * ci_n + ci) * k + kd) * k + kh)) * k];
                if (fast3) {
                  // one fused pass; edge columns peeled off
                  T w0 = krow[0], w1 = krow[1], w2 = krow[2];
                  orow[0] += w1 * irow[0] + w2 * irow[1];
                  for (int ow = 1; ow < W - 1; ++ow) {
                    orow[ow] += w0 * irow[ow - 1] + w1 * irow[ow] + w2 * irow[ow + 1];
                  }
                  orow[W - 1] += w0 * irow[W - 2] + w1 * irow[W - 1];
                  continue;
                }
                for (int kw = 0; kw < k; ++kw) {
                  T wv = krow[kw];
                  int off = kw - p;
                  int lo = std::max(0, ceil_div(-off, s));
                  int hi = std::min(Wo - 1, (W - 1 - off) / s);
                  if (s == 1) {
                    const T* ir = irow + off;
                    for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * ir[ow];
                  } else {
                    for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * irow[ow * s + off];
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  static void conv3_backward_input(const Tensor<T>& gout, const Tensor<T>& ker, Tensor<T>& gin,
                                   int s, int p) {
    int ci_n = gin.shape[0], D = gin.shape[1], H = gin.shape[2], W = gin.shape[3];
    int co_n = gout.shape[0], Do = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3];
    int k = ker.shape[2];
    const bool fast3 = (s == 1 && k == 3 && W >= 2);
    for (int co = 0; co < co_n; ++co) {
      for (int od = 0; od < Do; ++od) {
        for (int oh = 0; oh < Ho; ++oh) {
          const T* grow = &gout.data[static_cast<size_t>(((co * Do + od) * Ho + oh)) * Wo];
          for (int ci = 0; ci < ci_n; ++ci) {
            for (int kd = 0; kd < k; ++kd) {
              int id = od * s - p + kd;
              if (id < 0 || id >= D) continue;
              for (int kh = 0; kh < k; ++kh) {
                int ih = oh * s - p + kh;
                if (ih < 0 || ih >= H) continue;
                T* gi_row = &gin.data[static_cast<size_t>(((ci * D + id) * H + ih)) * W];
                const T* krow = &ker.data[static_cast<size_t>((((co * ci_n + ci) * k + kd) * k + kh)) * k];
                if (fast3) {
                  // gather form: gi[iw] += w0*g[iw+1] + w1*g[iw] + w2*g[iw-1]
                  T w0 = krow[0], w1 = krow[1], w2 = krow[2];
                  gi_row[0] += w1 * grow[0] + w0 * grow[1];
                  for (int iw = 1; iw < W - 1; ++iw) {
                    gi_row[iw] += w2 * grow[iw - 1] + w1 * grow[iw] + w0 * grow[iw + 1];
                  }
                  gi_row[W - 1] += w2 * grow[W - 2] + w1 * grow[W - 1];
                  continue;
                }
                for (int kw = 0; kw < k; ++kw) {
                  T wv = krow[kw];
                  int off = kw - p;
                  int lo = std::max(0, ceil_div(-off, s));
                  int hi = std::min(Wo - 1, (W - 1 - off) / s);
                  if (s == 1) {
                    T* gr = gi_row + off;
                    for (int ow = lo; ow <= hi; ++ow) gr[ow] += wv * grow[ow];
                  } else {
                    for (int ow = lo; ow <= hi; ++ow) gi_row[ow * s + off] += wv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  static void conv3_backward_kernel(const Tensor<T>& gout, const Tensor<T>& in, Tensor<T>& gker,
                                    int s, int p) {
    int ci_n = in.shape[0], D = in.shape[1], H = in.shape[2], W = in.shape[3];
    int co_n = gout.shape[0], Do = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3];
    int k = gker.shape[2];
    for (int co = 0; co < co_n; ++co) {
      for (int od = 0; od < Do; ++od) {
        for (int oh = 0; oh < Ho; ++oh) {
          const T* grow = &gout.data[static_cast<size_t>(((co * Do + od) * Ho + oh)) * Wo];
          for (int ci = 0; ci < ci_n; ++ci) {
            for (int kd = 0; kd < k; ++kd) {
              int id = od * s - p + kd;
              if (id < 0 || id >= D) continue;
              for (int kh = 0; kh < k; ++kh) {
                int ih = oh * s - p + kh;
                if (ih < 0 || ih >= H) continue;
                const T* irow = &in.data[static_cast<size_t>(((ci * D + id) * H + ih)) * W];
                T* gk_row = &gker.data[static_cast<size_t>((((co * ci_n + ci) * k + kd) * k + kh)) * k];
                if (s == 1 && k == 3 && W >= 2) {
                  // gk[kw] = sum_ow g[ow] * in[ow + kw - 1], three taps fused
                  T tap0 = 0;
                  T tap1 = grow[0] * irow[0];
                  T tap2 = grow[0] * irow[1];
                  for (int ow = 1; ow < W - 1; ++ow) {
                    tap0 += grow[ow] * irow[ow - 1];
                    tap1 += grow[ow] * irow[ow];
                    tap2 += grow[ow] * irow[ow + 1];
                  }
                  tap0 += grow[W - 1] * irow[W - 2];
                  tap1 += grow[W - 1] * irow[W - 1];
                  gk_row[0] += tap0;
                  gk_row[1] += tap1;
                  gk_row[2] += tap2;
                  continue;
                }
                for (int kw = 0; kw < k; ++kw) {
                  int off = kw - p;
                  int lo = std::max(0, ceil_div(-off, s));
                  int hi = std::min(Wo - 1, (W - 1 - off) / s);
                  T acc = 0;
                  if (s == 1) {
                    const T* ir = irow + off;
                    for (int ow = lo; ow <= hi; ++ow) acc += grow[ow] * ir[ow];
                  } else {
                    for (int ow = lo; ow <= hi; ++ow) acc += grow[ow] * irow[ow * s + off];
                  }
                  gk_row[kw] += acc;
                }
              }
            }
          }
        }
      }
    }
  }

  static int ceil_div(int a, int b) { return a > 0 ? (a + b - 1) / b : 0; }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Var>> params_;
};

/// Max over coordinates of |central-difference - analytic| / max(1, |analytic|).
/// `f` must be deterministic; non-finite evaluations are an error.
template <typename T>
double finite_difference_check(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                               const Tensor<T>& analytic_grad, double h) {
  if (h <= 0) throw std::invalid_argument("finite_difference_check: h must be positive");
  if (!analytic_grad.same_shape(x)) {
    throw std::invalid_argument("finite_difference_check: gradient shape mismatch");
  }
  double worst = 0.0;
  Tensor<T> xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    T orig = xp[i];
    xp[i] = orig + static_cast<T>(h);
    double fp = f(xp);
    xp[i] = orig - static_cast<T>(h);
    double fm = f(xp);
    xp[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_difference_check: non-finite function evaluation");
    }
    double fd = (fp - fm) / (2.0 * h);
    double g = static_cast<double>(analytic_grad[i]);
    double err = std::abs(fd - g) / std::max(1.0, std::abs(g));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace diffseg
