#pragma once

// Elementwise arithmetic (numpy-style broadcasting), pointwise nonlinearities,
// reductions, and shape manipulation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>
#include <vector>

#include "dspm/tensor.hpp"

namespace dspm {

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;  // per output dim, 0 where broadcast
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size() >= r ? i + a.size() - r : SIZE_MAX;
    const std::size_t ib = i + b.size() >= r ? i + b.size() - r : SIZE_MAX;
    const std::size_t da = ia == SIZE_MAX ? 1 : a[ia];
    const std::size_t db = ib == SIZE_MAX ? 1 : b[ib];
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(da, db);
    if (da != 1) bc.stride_a[i] = sa[ia];
    if (db != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

// Calls f(o, ia, ib) for every output element in row-major order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::size_t total = numel(bc.out);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = bc.out[r - 1];
  const std::size_t sa_in = bc.stride_a[r - 1];
  const std::size_t sb_in = bc.stride_b[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, ia + k * sa_in, ib + k * sb_in);
    // advance the odometer over the outer dims
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  auto bc = broadcast(a.shape(), b.shape(), op);
  std::vector<T> out(numel(bc.out));
  const auto av = a.data();
  const auto bv = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(av[ia], bv[ib]); });
  }
  Shape shape = bc.out;
  return make_result<T>(op, std::move(shape), std::move(out), {a, b}, [bc = std::move(bc), da, db](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    auto* ga = sink(self, 0);
    auto* gb = sink(self, 1);
    const auto& g = self.grad;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[o] * da(av[ia], bv[ib], self.value[o]);
      if (gb) (*gb)[ib] += g[o] * db(av[ia], bv[ib], self.value[o]);
    });
  });
}

// dfn(x, y) is the derivative given input x and output y.
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto* gx = sink(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

// Splits a shape around `axis` into (outer, n, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner,
                       const char* op) {
  if (axis >= s.size()) throw DimensionError(std::string(op) + ": axis out of range for " + to_string(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, std::type_identity_t<T> c) {
  return detail::unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> operator+(std::type_identity_t<T> c, const Tensor<T>& a) {
  return a + c;
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, std::type_identity_t<T> c) {
  return a + (-c);
}
template <typename T>
Tensor<T> operator-(std::type_identity_t<T> c, const Tensor<T>& a) {
  return detail::unary<T>("rsub_scalar", a, [c](T x) { return c - x; }, [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, std::type_identity_t<T> c) {
  return detail::unary<T>("mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}
template <typename T>
Tensor<T> operator*(std::type_identity_t<T> c, const Tensor<T>& a) {
  return a * c;
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, std::type_identity_t<T> c) {
  return a * (T(1) / c);
}
template <typename T>
Tensor<T> operator/(std::type_identity_t<T> c, const Tensor<T>& a) {
  return detail::unary<T>("rdiv_scalar", a, [c](T x) { return c / x; }, [](T x, T out) { return -out / x; });
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) {
  return a * T(-1);
}

// ---------------------------------------------------------------------------
// Pointwise functions

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>(
      "log", x,
      [](T v) {
        if (!(v > T(0))) throw DomainError("log: non-positive argument");
        return std::log(v);
      },
      [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>("abs", x, [](T v) { return std::abs(v); },
                          [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary<T>(
      "sqrt", x,
      [](T v) {
        if (v < T(0)) throw DomainError("sqrt: negative argument");
        return std::sqrt(v);
      },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
T softplus_scalar(T v) {
  return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary<T>("softplus", x, [](T v) { return softplus_scalar(v); },
                          [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, std::type_identity_t<T> slope = T(0.1)) {
  return detail::unary<T>("leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
                          [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

// Hard clamp; gradient is zero where the bound is active.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, std::type_identity_t<T> lo, std::type_identity_t<T> hi) {
  return detail::unary<T>("clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
                          [lo, hi](T v, T) { return (v < lo || v > hi) ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return detail::make_result<T>("sum", {}, {static_cast<T>(acc)}, {x}, [](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (auto& g : *gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return sum(x) * (T(1) / static_cast<T>(std::max<std::size_t>(1, x.size())));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner, "sum_axis");
  std::vector<T> out(outer * inner, T(0));
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + j) * inner + i];
  return detail::make_result<T>("sum_axis", detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                                [outer, n, inner](Node<T>& self) {
                                  auto* gx = detail::sink(self, 0);
                                  if (!gx) return;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < n; ++j)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        (*gx)[(o * n + j) * inner + i] += self.grad[o * inner + i];
                                });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  const T n = static_cast<T>(x.shape().at(axis));
  return sum(x, axis, keepdim) * (T(1) / n);
}

// Max along an axis; the gradient goes to the first maximal element.
template <typename T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner, "max_axis");
  std::vector<T> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      T bv = xv[o * n * inner + i];
      for (std::size_t j = 1; j < n; ++j) {
        const T v = xv[(o * n + j) * inner + i];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[o * inner + i] = bv;
      arg[o * inner + i] = (o * n + best) * inner + i;
    }
  return detail::make_result<T>("max_axis", detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                                [arg = std::move(arg)](Node<T>& self) {
                                  auto* gx = detail::sink(self, 0);
                                  if (!gx) return;
                                  for (std::size_t k = 0; k < arg.size(); ++k) (*gx)[arg[k]] += self.grad[k];
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner, "softmax");
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::max(m, xv[(o * n + j) * inner + i]);
      T z = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = (o * n + j) * inner + i;
        out[k] = std::exp(xv[k] - m);
        z += out[k];
      }
      for (std::size_t j = 0; j < n; ++j) out[(o * n + j) * inner + i] /= z;
    }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x}, [outer, n, inner](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = (o * n + j) * inner + i;
          dot += g[k] * y[k];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = (o * n + j) * inner + i;
          (*gx)[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x, std::size_t axis, bool keepdim = false) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner, "logsumexp");
  std::vector<T> out(outer * inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::max(m, xv[(o * n + j) * inner + i]);
      T z = T(0);
      for (std::size_t j = 0; j < n; ++j) z += std::exp(xv[(o * n + j) * inner + i] - m);
      out[o * inner + i] = m + std::log(z);
    }
  return detail::make_result<T>("logsumexp", detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
                                [outer, n, inner](Node<T>& self) {
                                  auto* gx = detail::sink(self, 0);
                                  if (!gx) return;
                                  const auto& xv = self.parents[0]->value;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < inner; ++i) {
                                      const T lse = self.value[o * inner + i];
                                      const T g = self.grad[o * inner + i];
                                      for (std::size_t j = 0; j < n; ++j) {
                                        const std::size_t k = (o * n + j) * inner + i;
                                        (*gx)[k] += g * std::exp(xv[k] - lse);
                                      }
                                    }
                                });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  return x - logsumexp(x, axis, true);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  std::vector<T> v(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(v), {x}, [](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch");
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw DimensionError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];
  const auto in_strides = detail::contiguous_strides(x.shape());
  // source offset for each output element
  std::vector<std::size_t> src(x.size());
  {
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_strides[perm[d]];
      src[o] = off;
      for (std::size_t d = r; d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
  std::vector<T> v(x.size());
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.size(); ++o) v[o] = xv[src[o]];
  return detail::make_result<T>("permute", std::move(out_shape), std::move(v), {x}, [src = std::move(src)](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < src.size(); ++o) (*gx)[src[o]] += self.grad[o];
  });
}

// Elements [start, start+len) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner, "slice");
  if (start + len > n) throw DimensionError("slice: range out of bounds for " + to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> v(outer * len * inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * n + start) * inner), len * inner,
                v.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return detail::make_result<T>("slice", std::move(shape), std::move(v), {x}, [outer, n, inner, start, len](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len * inner; ++k) (*gx)[(o * n + start) * inner + k] += self.grad[o * len * inner + k];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  Shape shape = xs[0].shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (d != axis && x.shape()[d] != shape[d])
        throw DimensionError("concat: " + to_string(x.shape()) + " vs " + to_string(shape));
    total += x.shape()[axis];
  }
  shape[axis] = total;
  std::size_t outer, n, inner;
  detail::split_axis(shape, axis, outer, n, inner, "concat");
  std::vector<T> v(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t len = x.shape()[axis];
    const auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  v.begin() + static_cast<std::ptrdiff_t>((o * n + off) * inner));
    off += len;
  }
  return detail::make_result<T>("concat", std::move(shape), std::move(v), xs,
                                [outer, n, inner, axis, offsets = std::move(offsets)](Node<T>& self) {
                                  for (std::size_t p = 0; p < self.parents.size(); ++p) {
                                    auto* gx = detail::sink(self, p);
                                    if (!gx) continue;
                                    const std::size_t len = self.parents[p]->shape[axis];
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t k = 0; k < len * inner; ++k)
                                        (*gx)[o * len * inner + k] += self.grad[(o * n + offsets[p]) * inner + k];
                                  }
                                });
}

// Masked mean of x over elements where mask != 0 (mask is a constant with
// the same shape). Returns zero when the mask is empty.
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, const Tensor<T>& mask) {
  if (x.shape() != mask.shape()) throw DimensionError("masked_mean: shape mismatch");
  T count = T(0);
  for (T m : mask.data()) count += m != T(0) ? T(1) : T(0);
  if (count == T(0)) return sum(x * mask.detach());
  return sum(x * mask.detach()) * (T(1) / count);
}

}  // namespace dspm
