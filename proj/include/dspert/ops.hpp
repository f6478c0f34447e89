#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dspert/errors.hpp"
#include "dspert/rng.hpp"
#include "dspert/tensor.hpp"

// Differentiable primitives. Every op computes its value eagerly and, when a
// parent tracks gradients, records a closure that accumulates the
// vector-Jacobian product into the parents.

namespace dspert {

namespace detail {

inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got shape " +
                         shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline const std::vector<double>& parent_data(Node& self, std::size_t i) {
  return self.parents[i]->data;
}

// (outer, axis length, inner) decomposition used by the axis reductions.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &bd[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto& g = self.grad;
    const auto& ad = detail::parent_data(self, 0);
    const auto& bd = detail::parent_data(self, 1);
    if (auto* ga = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bd[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (auto* gb = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ad[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return detail::make_result({c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return detail::make_result(std::move(shape), x.data(), {x}, [](detail::Node& self) {
    if (auto* gx = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = detail::parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& ad = detail::parent_data(self, 0);
    const auto& bd = detail::parent_data(self, 1);
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bd[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * ad[i];
  });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return detail::make_result(x.shape(), std::move(out), {x}, [s](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

/// x[r, :] + bias for every row r; bias has x.cols() elements.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.cols();
  if (bias.size() != c) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % c];
  return detail::make_result(x.shape(), std::move(out), {x, bias}, [c](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % c] += self.grad[i];
  });
}

namespace detail {

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx_from_y_x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(x.shape(), std::move(out), {x}, [dfdx_from_y_x](Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      const auto& xd = parent_data(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        (*g)[i] += self.grad[i] * dfdx_from_y_x(self.data[i], xd[i]);
    }
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double, double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double y, double) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double y, double) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Normalization

/// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  const auto v = detail::axis_view(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto& xd = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < v.len; ++a) mx = std::max(mx, xd[base + a * v.inner]);
      double total = 0.0;
      for (std::size_t a = 0; a < v.len; ++a) {
        const double e = std::exp(xd[base + a * v.inner] - mx);
        out[base + a * v.inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < v.len; ++a) out[base + a * v.inner] /= total;
    }
  return detail::make_result(x.shape(), std::move(out), {x}, [v](detail::Node& self) {
    auto* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < v.len; ++a) {
          const std::size_t idx = base + a * v.inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t a = 0; a < v.len; ++a) {
          const std::size_t idx = base + a * v.inner;
          (*gx)[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) { return softmax(x, x.ndim() - 1); }

/// log(softmax(x)) over the last axis, computed stably.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &x.data()[i * c];
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [r, c](detail::Node& self) {
    auto* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*gx)[i * c + j] += self.grad[i * c + j] - std::exp(self.data[i * c + j]) * gsum;
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row standardization over the last axis followed by gain * x + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  const std::size_t d = x.cols(), r = x.rows();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &x.data()[i * d];
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.grad;
        const auto& gain_d = detail::parent_data(self, 1);
        if (auto* gx = detail::parent_grad(self, 0)) {
          const double dd = static_cast<double>(d);
          for (std::size_t i = 0; i < r; ++i) {
            double sum_gh = 0.0, sum_gh_xh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gain_d[j];
              sum_gh += gh;
              sum_gh_xh += gh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gain_d[j];
              (*gx)[i * d + j] +=
                  inv_std[i] / dd * (dd * gh - sum_gh - xhat[i * d + j] * sum_gh_xh);
            }
          }
        }
        if (auto* gg = detail::parent_grad(self, 1))
          for (std::size_t i = 0; i < r * d; ++i) (*gg)[i % d] += g[i] * xhat[i];
        if (auto* gb = detail::parent_grad(self, 2))
          for (std::size_t i = 0; i < r * d; ++i) (*gb)[i % d] += g[i];
      });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenation along the last axis; leading axes must agree.
inline Tensor concat(const Tensor& a, const Tensor& b) {
  const std::size_t ca = a.cols(), cb = b.cols();
  Shape sa(a.shape().begin(), a.shape().end() - 1);
  Shape sb(b.shape().begin(), b.shape().end() - 1);
  if (sa != sb) {
    throw DimensionError("concat: leading axes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t r = a.rows(), c = ca + cb;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(&a.data()[i * ca], ca, &out[i * c]);
    std::copy_n(&b.data()[i * cb], cb, &out[i * c + ca]);
  }
  Shape shape = sa;
  shape.push_back(c);
  return detail::make_result(std::move(shape), std::move(out), {a, b},
                             [r, ca, cb, c](detail::Node& self) {
                               if (auto* g = detail::parent_grad(self, 0))
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < ca; ++j)
                                     (*g)[i * ca + j] += self.grad[i * c + j];
                               if (auto* g = detail::parent_grad(self, 1))
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < cb; ++j)
                                     (*g)[i * cb + j] += self.grad[i * c + ca + j];
                             });
}

/// Stacks row blocks vertically. Each piece is viewed as rows() x cols().
inline Tensor concat_rows(const std::vector<Tensor>& pieces) {
  if (pieces.empty()) throw ContractError("concat_rows: no pieces");
  const std::size_t c = pieces.front().cols();
  std::size_t total = 0;
  for (const auto& p : pieces) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column count " + std::to_string(p.cols()) +
                           " vs " + std::to_string(c));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : pieces) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result({total, c}, std::move(out), pieces,
                             [offsets = std::move(offsets)](detail::Node& self) {
                               for (std::size_t p = 0; p < offsets.size(); ++p)
                                 if (auto* g = detail::parent_grad(self, p))
                                   for (std::size_t i = 0; i < g->size(); ++i)
                                     (*g)[i] += self.grad[offsets[p] + i];
                             });
}

/// Half-open row range [begin, end) of a 2-D tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw BoundsError("slice_rows: range [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return detail::make_result({end - begin, c}, std::move(out), {x},
                             [begin, c](detail::Node& self) {
                               if (auto* g = detail::parent_grad(self, 0))
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   (*g)[begin * c + i] += self.grad[i];
                             });
}

/// Half-open column range [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_cols");
  if (begin >= end || end > x.dim(1)) {
    throw BoundsError("slice_cols: range [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1), w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(&x.data()[i * c + begin], w, &out[i * w]);
  return detail::make_result({r, w}, std::move(out), {x}, [r, c, w, begin](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) (*g)[i * c + begin + j] += self.grad[i * w + j];
  });
}

/// Sum over `axis`; the axis is removed (a scalar result has shape (1)).
inline Tensor sum(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw DimensionError("sum: axis out of range for " + shape_str(x.shape()));
  const auto v = detail::axis_view(x.shape(), axis);
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t a = 0; a < v.len; ++a)
      for (std::size_t in = 0; in < v.inner; ++in)
        out[o * v.inner + in] += x.data()[(o * v.len + a) * v.inner + in];
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return detail::make_result(std::move(shape), std::move(out), {x}, [v](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t a = 0; a < v.len; ++a)
          for (std::size_t in = 0; in < v.inner; ++in)
            (*g)[(o * v.len + a) * v.inner + in] += self.grad[o * v.inner + in];
  });
}

inline Tensor mean(const Tensor& x, std::size_t axis) {
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

inline Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result({1}, {total}, {x}, [](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (double& v : *g) v += self.grad[0];
  });
}

/// Rows of `table` selected by `indices`; gradient scatters back into the rows.
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  detail::require_2d(table, "embedding_lookup");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v) {
      throw BoundsError("embedding_lookup: index " + std::to_string(indices[i]) +
                        " out of range for table with " + std::to_string(v) + " rows");
    }
    std::copy_n(&table.data()[indices[i] * d], d, &out[i * d]);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return detail::make_result({idx.size(), d}, std::move(out), {table},
                             [idx, d](detail::Node& self) {
                               if (auto* g = detail::parent_grad(self, 0))
                                 for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                     (*g)[idx[i] * d + j] += self.grad[i * d + j];
                             });
}

/// n copies of a d-element vector as an n x d matrix.
inline Tensor repeat_rows(const Tensor& v, std::size_t n) {
  const std::size_t d = v.size();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(v.data().begin(), d, &out[i * d]);
  return detail::make_result({n, d}, std::move(out), {v}, [n, d](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n * d; ++i) (*g)[i % d] += self.grad[i];
  });
}

/// Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is identity.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
    out[i] = x[i] * mask[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [mask = std::move(mask)](detail::Node& self) {
                               if (auto* g = detail::parent_grad(self, 0))
                                 for (std::size_t i = 0; i < mask.size(); ++i)
                                   (*g)[i] += self.grad[i] * mask[i];
                             });
}

// ---------------------------------------------------------------------------
// Sliding-window primitives. For a T-row input and width k they produce
// T-k+1 rows; row i covers input rows i..i+k-1.

namespace detail {

inline std::size_t window_count(std::size_t t, std::size_t k, const char* op) {
  if (k == 0 || k > t) {
    throw BoundsError(std::string(op) + ": window " + std::to_string(k) +
                      " invalid for " + std::to_string(t) + " rows");
  }
  return t - k + 1;
}

}  // namespace detail

/// Row i of the result is rows i..i+k-1 of x laid side by side.
inline Tensor unfold_rows(const Tensor& x, std::size_t k) {
  detail::require_2d(x, "unfold_rows");
  const std::size_t t = x.dim(0), d = x.dim(1);
  const std::size_t m = detail::window_count(t, k, "unfold_rows");
  std::vector<double> out(m * k * d);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(&x.data()[i * d], k * d, &out[i * k * d]);
  return detail::make_result({m, k * d}, std::move(out), {x}, [m, k, d](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t q = 0; q < k * d; ++q) (*g)[i * d + q] += self.grad[i * k * d + q];
  });
}

enum class PoolKind { Max, Mean };

/// Coordinate-wise max or mean over each window of k rows.
inline Tensor window_pool(const Tensor& x, std::size_t k, PoolKind kind) {
  detail::require_2d(x, "window_pool");
  const std::size_t t = x.dim(0), d = x.dim(1);
  const std::size_t m = detail::window_count(t, k, "window_pool");
  std::vector<double> out(m * d);
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::Max) {
    argmax.resize(m * d);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        std::size_t best = i;
        for (std::size_t r = i + 1; r < i + k; ++r)
          if (x.data()[r * d + j] > x.data()[best * d + j]) best = r;
        argmax[i * d + j] = best;
        out[i * d + j] = x.data()[best * d + j];
      }
  } else {
    const double inv = 1.0 / static_cast<double>(k);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t r = i; r < i + k; ++r) acc += x.data()[r * d + j];
        out[i * d + j] = acc * inv;
      }
  }
  return detail::make_result(
      {m, d}, std::move(out), {x},
      [m, k, d, kind, argmax = std::move(argmax)](detail::Node& self) {
        auto* g = detail::parent_grad(self, 0);
        if (!g) return;
        if (kind == PoolKind::Max) {
          for (std::size_t i = 0; i < m * d; ++i) (*g)[argmax[i] * d + i % d] += self.grad[i];
        } else {
          const double inv = 1.0 / static_cast<double>(k);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t r = i; r < i + k; ++r)
              for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += self.grad[i * d + j] * inv;
        }
      });
}

/// scores[i][r] = <queries[i], keys[i + r]> for r < k, with T - k + 1 query rows.
inline Tensor window_scores(const Tensor& queries, const Tensor& keys, std::size_t k) {
  detail::require_2d(queries, "window_scores");
  detail::require_2d(keys, "window_scores");
  const std::size_t t = keys.dim(0), e = keys.dim(1);
  const std::size_t m = detail::window_count(t, k, "window_scores");
  if (queries.dim(0) != m || queries.dim(1) != e) {
    throw DimensionError("window_scores: queries " + shape_str(queries.shape()) +
                         " incompatible with keys " + shape_str(keys.shape()) + " at width " +
                         std::to_string(k));
  }
  std::vector<double> out(m * k, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t r = 0; r < k; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < e; ++j) acc += queries.data()[i * e + j] * keys.data()[(i + r) * e + j];
      out[i * k + r] = acc;
    }
  return detail::make_result({m, k}, std::move(out), {queries, keys},
                             [m, k, e](detail::Node& self) {
                               const auto& qd = detail::parent_data(self, 0);
                               const auto& kd = detail::parent_data(self, 1);
                               auto* gq = detail::parent_grad(self, 0);
                               auto* gk = detail::parent_grad(self, 1);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t r = 0; r < k; ++r) {
                                   const double g = self.grad[i * k + r];
                                   if (g == 0.0) continue;
                                   for (std::size_t j = 0; j < e; ++j) {
                                     if (gq) (*gq)[i * e + j] += g * kd[(i + r) * e + j];
                                     if (gk) (*gk)[(i + r) * e + j] += g * qd[i * e + j];
                                   }
                                 }
                             });
}

/// out[i] = sum_r weights[i][r] * values[i + r].
inline Tensor window_weighted_sum(const Tensor& weights, const Tensor& values) {
  detail::require_2d(weights, "window_weighted_sum");
  detail::require_2d(values, "window_weighted_sum");
  const std::size_t m = weights.dim(0), k = weights.dim(1);
  const std::size_t t = values.dim(0), d = values.dim(1);
  if (k == 0 || k > t || t - k + 1 != m) {
    throw DimensionError("window_weighted_sum: weights " + shape_str(weights.shape()) +
                         " incompatible with values " + shape_str(values.shape()));
  }
  std::vector<double> out(m * d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t r = 0; r < k; ++r) {
      const double w = weights.data()[i * k + r];
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += w * values.data()[(i + r) * d + j];
    }
  return detail::make_result({m, d}, std::move(out), {weights, values},
                             [m, k, d](detail::Node& self) {
                               const auto& wd = detail::parent_data(self, 0);
                               const auto& vd = detail::parent_data(self, 1);
                               auto* gw = detail::parent_grad(self, 0);
                               auto* gv = detail::parent_grad(self, 1);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t r = 0; r < k; ++r) {
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                     const double g = self.grad[i * d + j];
                                     acc += g * vd[(i + r) * d + j];
                                     if (gv) (*gv)[(i + r) * d + j] += g * wd[i * k + r];
                                   }
                                   if (gw) (*gw)[i * k + r] += acc;
                                 }
                             });
}

/// r[n][c] = sum_{p,q} left[n][p] * weight[p][c][q] * right[n][q].
/// `weight` has shape (a, c, b).
inline Tensor bilinear(const Tensor& left, const Tensor& weight, const Tensor& right) {
  detail::require_2d(left, "bilinear");
  detail::require_2d(right, "bilinear");
  if (weight.ndim() != 3 || weight.dim(0) != left.dim(1) || weight.dim(2) != right.dim(1) ||
      left.dim(0) != right.dim(0)) {
    throw DimensionError("bilinear: shapes " + shape_str(left.shape()) + ", " +
                         shape_str(weight.shape()) + ", " + shape_str(right.shape()));
  }
  const std::size_t n = left.dim(0), a = weight.dim(0), c = weight.dim(1), b = weight.dim(2);
  std::vector<double> out(n * c, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < a; ++p) {
      const double lv = left.data()[s * a + p];
      if (lv == 0.0) continue;
      for (std::size_t o = 0; o < c; ++o) {
        double acc = 0.0;
        for (std::size_t q = 0; q < b; ++q)
          acc += weight.data()[(p * c + o) * b + q] * right.data()[s * b + q];
        out[s * c + o] += lv * acc;
      }
    }
  return detail::make_result(
      {n, c}, std::move(out), {left, weight, right}, [n, a, c, b](detail::Node& self) {
        const auto& ld = detail::parent_data(self, 0);
        const auto& wd = detail::parent_data(self, 1);
        const auto& rd = detail::parent_data(self, 2);
        auto* gl = detail::parent_grad(self, 0);
        auto* gw = detail::parent_grad(self, 1);
        auto* gr = detail::parent_grad(self, 2);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t o = 0; o < c; ++o) {
            const double g = self.grad[s * c + o];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < a; ++p)
              for (std::size_t q = 0; q < b; ++q) {
                const double w = wd[(p * c + o) * b + q];
                if (gl) (*gl)[s * a + p] += g * w * rd[s * b + q];
                if (gr) (*gr)[s * b + q] += g * w * ld[s * a + p];
                if (gw) (*gw)[(p * c + o) * b + q] += g * ld[s * a + p] * rd[s * b + q];
              }
          }
      });
}

// ---------------------------------------------------------------------------
// Losses. Targets are constants laid out like the prediction grid.

/// -sum(targets * log_softmax(logits)), summed over rows.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const double> targets) {
  if (targets.size() != logits.size()) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  const std::size_t r = logits.rows(), c = logits.cols();
  std::vector<double> probs(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &logits.data()[i * c];
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - lse);
      const double y = targets[i * c + j];
      if (y != 0.0) loss -= y * (row[j] - lse);
    }
  }
  std::vector<double> y(targets.begin(), targets.end());
  return detail::make_result({1}, {loss}, {logits},
                             [r, c, probs = std::move(probs), y = std::move(y)](detail::Node& self) {
                               auto* g = detail::parent_grad(self, 0);
                               if (!g) return;
                               const double up = self.grad[0];
                               for (std::size_t i = 0; i < r; ++i) {
                                 double ysum = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) ysum += y[i * c + j];
                                 for (std::size_t j = 0; j < c; ++j)
                                   (*g)[i * c + j] +=
                                       up * (probs[i * c + j] * ysum - y[i * c + j]);
                               }
                             });
}

/// -sum(targets * log(probs)); entries with a zero target contribute nothing.
inline Tensor cross_entropy(const Tensor& probs, std::span<const double> targets) {
  if (targets.size() != probs.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for probabilities " + shape_str(probs.shape()));
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (targets[i] != 0.0) loss -= targets[i] * std::log(probs[i]);
  std::vector<double> y(targets.begin(), targets.end());
  return detail::make_result({1}, {loss}, {probs}, [y = std::move(y)](detail::Node& self) {
    auto* g = detail::parent_grad(self, 0);
    if (!g) return;
    const auto& p = detail::parent_data(self, 0);
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] != 0.0) (*g)[i] -= self.grad[0] * y[i] / p[i];
  });
}

}  // namespace dspert
