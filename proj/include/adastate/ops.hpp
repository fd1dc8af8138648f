// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "adastate/tensor.hpp"

// Differentiable primitives over `Tensor`.
//
// Broadcasting: shapes are aligned at their trailing dimensions; a dimension
// broadcasts only when its size is 1 (a missing leading dimension counts as
// 1). Any other mismatch is a ShapeError naming the primitive.

namespace adastate {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ops_detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

inline std::vector<double>* parent_grad(detail::Node& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

inline const std::vector<double>& parent_value(const detail::Node& self, std::size_t i) {
  return self.parents[i]->value;
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b) + " (dimension " + std::to_string(i) +
                       ": " + std::to_string(da) + " vs " + std::to_string(db) + ")");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat source index of every output element for an operand of shape `in`
// broadcast to `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const std::size_t d = in[i - offset];
    stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t cur = 0;
  for (std::size_t o = 0; o < n; ++o) {
    idx[o] = cur;
    for (std::size_t i = rank; i-- > 0;) {
      if (++counter[i] < out[i]) {
        cur += stride[i];
        break;
      }
      cur -= stride[i] * (out[i] - 1);
      counter[i] = 0;
    }
  }
  return idx;
}

enum class Layout { kSame, kScalarB, kScalarA, kSuffixB, kGeneric };

struct Broadcast {
  Shape out;
  Layout layout = Layout::kGeneric;
  std::size_t nb = 1;
  std::shared_ptr<std::vector<std::size_t>> ia, ib;

  Broadcast(const char* op, const Shape& a, const Shape& b) {
    out = broadcast_shape(op, a, b);
    const std::size_t na = shape_numel(a);
    nb = shape_numel(b);
    const std::size_t no = shape_numel(out);
    if (a == b) {
      layout = Layout::kSame;
    } else if (nb == 1 && na == no) {
      layout = Layout::kScalarB;
    } else if (na == 1 && nb == no) {
      layout = Layout::kScalarA;
    } else if (na == no && b.size() <= a.size() &&
               std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size()))) {
      layout = Layout::kSuffixB;
    } else {
      layout = Layout::kGeneric;
      ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a, out));
      ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b, out));
    }
  }

  template <class F>
  void for_each(F&& f) const {
    const std::size_t n = shape_numel(out);
    switch (layout) {
      case Layout::kSame:
        for (std::size_t o = 0; o < n; ++o) f(o, o, o);
        break;
      case Layout::kScalarB:
        for (std::size_t o = 0; o < n; ++o) f(o, o, std::size_t{0});
        break;
      case Layout::kScalarA:
        for (std::size_t o = 0; o < n; ++o) f(o, std::size_t{0}, o);
        break;
      case Layout::kSuffixB:
        for (std::size_t o = 0; o < n; ++o) f(o, o, o % nb);
        break;
      case Layout::kGeneric:
        for (std::size_t o = 0; o < n; ++o) f(o, (*ia)[o], (*ib)[o]);
        break;
    }
  }
};

template <class Fwd, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Broadcast bc(op, a.shape(), b.shape());
  std::vector<double> out(shape_numel(bc.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  return detail::make_result(op, bc.out, std::move(out), {a, b},
                             [bc, da, db](detail::Node& self) {
                               const auto& g = self.grad;
                               const auto& av = parent_value(self, 0);
                               const auto& bv = parent_value(self, 1);
                               auto* ga = parent_grad(self, 0);
                               auto* gb = parent_grad(self, 1);
                               bc.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                                 if (ga) (*ga)[i] += g[o] * da(av[i], bv[j]);
                                 if (gb) (*gb)[j] += g[o] * db(av[i], bv[j]);
                               });
                             });
}

template <class Fwd, class D>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, D deriv) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return detail::make_result(op, x.shape(), std::move(out), {x}, [deriv](detail::Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = parent_value(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * deriv(xv[i], self.value[i]);
  });
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

}  // namespace ops_detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return ops_detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return ops_detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return ops_detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double s) {
  return ops_detail::unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return ops_detail::unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor square(const Tensor& x) {
  return ops_detail::unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor exp(const Tensor& x) {
  return ops_detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return ops_detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sin(const Tensor& x) {
  return ops_detail::unary(
      "sin", x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

inline Tensor silu(const Tensor& x) {
  return ops_detail::unary(
      "silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

/// Identity in the forward pass; blocks every gradient flowing through it.
inline Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result("sum", Shape{}, {s}, {x}, [](detail::Node& self) {
    auto* gx = ops_detail::parent_grad(self, 0);
    if (!gx) return;
    for (auto& g : *gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Sum over the last dimension: [..., n] -> [...].
inline Tensor sum_last(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("sum_last: scalar input");
  const std::size_t n = x.shape().back();
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += x.values()[r * n + c];
  return detail::make_result("sum_last", out_shape, std::move(out), {x}, [n](detail::Node& self) {
    auto* gx = ops_detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < self.value.size(); ++r)
      for (std::size_t c = 0; c < n; ++c) (*gx)[r * n + c] += self.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M,K] x [K,N] -> [M,N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using namespace ops_detail;
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, lhs " + shape_str(a.shape()) + " rhs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  return detail::make_result("matmul", Shape{m, n}, std::move(out), {a, b},
                             [m, k, n](detail::Node& self) {
                               ConstMap g(self.grad.data(), m, n);
                               if (auto* ga = parent_grad(self, 0)) {
                                 MutMap(ga->data(), m, k).noalias() +=
                                     g * ConstMap(parent_value(self, 1).data(), k, n).transpose();
                               }
                               if (auto* gb = parent_grad(self, 1)) {
                                 MutMap(gb->data(), k, n).noalias() +=
                                     ConstMap(parent_value(self, 0).data(), m, k).transpose() * g;
                               }
                             });
}

/// x[M,K] * w[K,N] + b[N].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

/// Row-wise softmax over the last dimension.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, xv[r * n + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (out[r * n + c] = std::exp(xv[r * n + c] - mx));
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x},
                             [n, rows](detail::Node& self) {
                               auto* gx = ops_detail::parent_grad(self, 0);
                               if (!gx) return;
                               const auto& y = self.value;
                               const auto& g = self.grad;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
                                 for (std::size_t c = 0; c < n; ++c)
                                   (*gx)[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
                               }
                             });
}

/// RMS normalisation of each row of x[M,D], scaled by gain[D].
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
  using namespace ops_detail;
  require_rank("rms_norm", x, 2, "input");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (gain.numel() != d) {
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match width " +
                     std::to_string(d));
  }
  auto inv = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(m * d);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += xv[r * d + c] * xv[r * d + c];
    const double iv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv)[r] = iv;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] * iv * gv[c];
  }
  return detail::make_result("rms_norm", x.shape(), std::move(out), {x, gain},
                             [m, d, inv](detail::Node& self) {
                               const auto& xv = parent_value(self, 0);
                               const auto& gv = parent_value(self, 1);
                               const auto& g = self.grad;
                               auto* gx = parent_grad(self, 0);
                               auto* gg = parent_grad(self, 1);
                               for (std::size_t r = 0; r < m; ++r) {
                                 const double iv = (*inv)[r];
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < d; ++c) {
                                   const double u = g[r * d + c] * gv[c];
                                   dot += u * xv[r * d + c];
                                   if (gg) (*gg)[c] += g[r * d + c] * xv[r * d + c] * iv;
                                 }
                                 if (!gx) continue;
                                 const double k = dot * iv * iv * iv / static_cast<double>(d);
                                 for (std::size_t c = 0; c < d; ++c)
                                   (*gx)[r * d + c] += g[r * d + c] * gv[c] * iv - xv[r * d + c] * k;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  return detail::make_result("reshape", std::move(shape), x.values(), {x}, [](detail::Node& self) {
    auto* gx = ops_detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
  });
}

/// Concatenate along dimension 0; trailing dimensions must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() == 0) throw ShapeError("concat_rows: scalar input");
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) {
      throw ShapeError("concat_rows: trailing shape " + shape_str(t) + " differs from " +
                       shape_str(tail));
    }
    offsets.push_back(rows);
    rows += p.dim(0);
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  const std::size_t row_size = shape_numel(tail);
  return detail::make_result("concat_rows", out_shape, std::move(out), parts,
                             [offsets, row_size](detail::Node& self) {
                               for (std::size_t i = 0; i < self.parents.size(); ++i) {
                                 auto* gp = ops_detail::parent_grad(self, i);
                                 if (!gp) continue;
                                 const std::size_t base = offsets[i] * row_size;
                                 for (std::size_t j = 0; j < gp->size(); ++j)
                                   (*gp)[j] += self.grad[base + j];
                               }
                             });
}

/// Rows [begin, end) along dimension 0.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[0] = end - begin;
  const std::size_t row_size = x.dim(0) ? x.numel() / x.dim(0) : 0;
  std::vector<double> out(x.values().begin() + static_cast<long>(begin * row_size),
                          x.values().begin() + static_cast<long>(end * row_size));
  return detail::make_result("slice_rows", out_shape, std::move(out), {x},
                             [begin, row_size](detail::Node& self) {
                               auto* gx = ops_detail::parent_grad(self, 0);
                               if (!gx) return;
                               const std::size_t base = begin * row_size;
                               for (std::size_t j = 0; j < self.grad.size(); ++j)
                                 (*gx)[base + j] += self.grad[j];
                             });
}

// ---------------------------------------------------------------------------
// Rotary phases and attention

/// Per-pair rotation frequencies base^(-2j/head_dim).
inline std::vector<double> rope_frequencies(std::size_t head_dim, double base) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ShapeError("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  std::vector<double> f(head_dim / 2);
  for (std::size_t j = 0; j < f.size(); ++j)
    f[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
  return f;
}

/// Rotates consecutive channel pairs of every head in x[T, heads*head_dim]
/// by position[t] * frequency. Position 0 is the identity.
inline Tensor rope(const Tensor& x, const std::vector<int>& position, std::size_t head_dim,
                   double base = 10000.0) {
  ops_detail::require_rank("rope", x, 2, "input");
  const std::size_t t = x.dim(0), width = x.dim(1);
  if (position.size() != t) {
    throw ShapeError("rope: " + std::to_string(position.size()) + " positions for " +
                     std::to_string(t) + " rows");
  }
  const auto freq = rope_frequencies(head_dim, base);
  if (width % head_dim != 0) {
    throw ShapeError("rope: width " + std::to_string(width) + " not a multiple of head_dim " +
                     std::to_string(head_dim));
  }
  const std::size_t half = head_dim / 2;
  auto table = std::make_shared<std::vector<double>>(t * half * 2);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t j = 0; j < half; ++j) {
      const double a = static_cast<double>(position[r]) * freq[j];
      (*table)[(r * half + j) * 2] = position[r] == 0 ? 1.0 : std::cos(a);
      (*table)[(r * half + j) * 2 + 1] = position[r] == 0 ? 0.0 : std::sin(a);
    }
  }
  auto apply = [t, width, head_dim, half](const std::vector<double>& tab, const double* in,
                                          double* out, double sign) {
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t h = 0; h < width; h += head_dim) {
        for (std::size_t j = 0; j < half; ++j) {
          const double c = tab[(r * half + j) * 2];
          const double s = sign * tab[(r * half + j) * 2 + 1];
          const std::size_t i0 = r * width + h + 2 * j;
          const double x0 = in[i0], x1 = in[i0 + 1];
          out[i0] += c * x0 - s * x1;
          out[i0 + 1] += s * x0 + c * x1;
        }
      }
    }
  };
  std::vector<double> out(x.numel(), 0.0);
  apply(*table, x.values().data(), out.data(), 1.0);
  return detail::make_result("rope", x.shape(), std::move(out), {x},
                             [table, apply](detail::Node& self) {
                               auto* gx = ops_detail::parent_grad(self, 0);
                               if (!gx) return;
                               apply(*table, self.grad.data(), gx->data(), -1.0);
                             });
}

/// Post-softmax weights of one attention call, head-major [heads][Tq][Tk].
struct AttentionWeights {
  std::size_t heads = 0, queries = 0, keys = 0;
  std::vector<double> data;

  double at(std::size_t h, std::size_t q, std::size_t k) const {
    return data[(h * queries + q) * keys + k];
  }
};

/// Multi-head scaled dot-product attention. q[Tq, H*hd], k/v[Tk, H*hd].
/// `mask`, when non-empty, is a [Tq*Tk] visibility table (nonzero = visible).
/// Phases must already be applied to q and k.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const std::vector<std::uint8_t>& mask = {},
                        AttentionWeights* weights_out = nullptr) {
  using namespace ops_detail;
  require_rank("attention", q, 2, "queries");
  require_rank("attention", k, 2, "keys");
  require_rank("attention", v, 2, "values");
  const std::size_t tq = q.dim(0), tk = k.dim(0), width = q.dim(1);
  if (tk == 0) throw ShapeError("attention: empty key window");
  if (k.dim(1) != width || v.dim(1) != width || v.dim(0) != tk) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()) + " are incompatible");
  }
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  if (!mask.empty() && mask.size() != tq * tk) {
    throw ShapeError("attention: mask has " + std::to_string(mask.size()) + " entries, expected " +
                     std::to_string(tq * tk));
  }
  const std::size_t hd = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  auto probs = std::make_shared<std::vector<double>>(heads * tq * tk);
  std::vector<double> out(tq * width, 0.0);
  const auto& qv = q.values();
  const auto& kv = k.values();
  const auto& vv = v.values();
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
  for (std::size_t h = 0; h < heads; ++h) {
    StridedConst qh(qv.data() + h * hd, tq, hd, stride);
    StridedConst kh(kv.data() + h * hd, tk, hd, stride);
    StridedConst vh(vv.data() + h * hd, tk, hd, stride);
    MutMap p(probs->data() + h * tq * tk, tq, tk);
    p.noalias() = (qh * kh.transpose()) * sc;
    for (std::size_t r = 0; r < tq; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < tk; ++c) {
        const double z = p(r, c);
        if (std::isnan(z)) throw NumericError("attention: NaN in logits");
        if (!mask.empty() && !mask[r * tk + c]) continue;
        mx = std::max(mx, z);
      }
      if (mx == -std::numeric_limits<double>::infinity()) {
        throw ShapeError("attention: query " + std::to_string(r) + " sees no key");
      }
      double zsum = 0.0;
      for (std::size_t c = 0; c < tk; ++c) {
        const double e = (!mask.empty() && !mask[r * tk + c]) ? 0.0 : std::exp(p(r, c) - mx);
        p(r, c) = e;
        zsum += e;
      }
      p.row(static_cast<Eigen::Index>(r)) /= zsum;
    }
    StridedMut oh(out.data() + h * hd, tq, hd, stride);
    oh.noalias() = p * vh;
  }
  if (weights_out) {
    weights_out->heads = heads;
    weights_out->queries = tq;
    weights_out->keys = tk;
    weights_out->data = *probs;
  }
  return detail::make_result(
      "attention", Shape{tq, width}, std::move(out), {q, k, v},
      [probs, heads, tq, tk, width, hd, sc](detail::Node& self) {
        const auto& qv = parent_value(self, 0);
        const auto& kv = parent_value(self, 1);
        const auto& vv = parent_value(self, 2);
        auto* gq = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        auto* gv = parent_grad(self, 2);
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(width));
        RowMat dp(tq, tk);
        for (std::size_t h = 0; h < heads; ++h) {
          ConstMap p(probs->data() + h * tq * tk, tq, tk);
          StridedConst go(self.grad.data() + h * hd, tq, hd, stride);
          StridedConst qh(qv.data() + h * hd, tq, hd, stride);
          StridedConst kh(kv.data() + h * hd, tk, hd, stride);
          StridedConst vh(vv.data() + h * hd, tk, hd, stride);
          if (gv) StridedMut(gv->data() + h * hd, tk, hd, stride).noalias() += p.transpose() * go;
          if (!gq && !gk) continue;
          dp.noalias() = go * vh.transpose();
          for (std::size_t r = 0; r < tq; ++r) {
            const double dot = dp.row(static_cast<Eigen::Index>(r)).dot(p.row(static_cast<Eigen::Index>(r)));
            for (std::size_t c = 0; c < tk; ++c) dp(r, c) = p(r, c) * (dp(r, c) - dot) * sc;
          }
          if (gq) StridedMut(gq->data() + h * hd, tq, hd, stride).noalias() += dp * kh;
          if (gk) StridedMut(gk->data() + h * hd, tk, hd, stride).noalias() += dp.transpose() * qh;
        }
      });
}

}  // namespace adastate
