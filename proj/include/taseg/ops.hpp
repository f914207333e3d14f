#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "taseg/autograd.hpp"
#include "taseg/error.hpp"
#include "taseg/tensor.hpp"

// Differentiable tensor ops. Every op records its output on the tape of its
// inputs together with a closure that maps the output gradient to input
// gradients.

namespace taseg::ops {

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_2d(const char* op, const Var& a) {
  if (a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + to_string(a.shape()));
  }
}

inline void accumulate(Tensor* dst, const Tensor& src, Scalar factor = 1) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

/// Neumaier-compensated running sum. Long reductions feed the loss, and their
/// rounding error would otherwise swamp finite-difference gradient checks.
class CompensatedSum {
 public:
  void add(Scalar v) {
    const Scalar t = sum_ + v;
    comp_ += std::abs(sum_) >= std::abs(v) ? (sum_ - t) + v : (v - t) + sum_;
    sum_ = t;
  }
  Scalar value() const { return sum_ + comp_; }

 private:
  Scalar sum_ = 0;
  Scalar comp_ = 0;
};

/// Length of a broadcast row operand ([d] or [1 x d]).
inline std::size_t row_operand_len(const char* op, const Var& x, const Var& row) {
  const Shape& rs = row.shape();
  const bool ok = (rs.size() == 1) || (rs.size() == 2 && rs[0] == 1);
  const std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (!ok || rs.back() != d) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(rs) + " over rows of " +
                     to_string(x.shape()));
  }
  return d;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape()->record("add", std::move(out), {a, b},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            detail::accumulate(in.grad(0), g);
                            detail::accumulate(in.grad(1), g);
                          });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.tape()->record("sub", std::move(out), {a, b},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            detail::accumulate(in.grad(0), g);
                            detail::accumulate(in.grad(1), g, -1);
                          });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape()->record("mul", std::move(out), {a, b},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            const auto av = in.value(0).data();
                            const auto bv = in.value(1).data();
                            const auto gv = g.data();
                            if (Tensor* ga = in.grad(0)) {
                              auto d = ga->data();
                              for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * bv[i];
                            }
                            if (Tensor* gb = in.grad(1)) {
                              auto d = gb->data();
                              for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * av[i];
                            }
                          });
}

inline Var scale(Var a, Scalar s) {
  Tensor out = a.value();
  for (Scalar& v : out.data()) v *= s;
  return a.tape()->record("scale", std::move(out), {a},
                          [s](const Tensor&, const Tensor& g, GradSink& in) {
                            detail::accumulate(in.grad(0), g, s);
                          });
}

/// x + row, with `row` ([d] or [1 x d]) broadcast over every leading index of x.
inline Var add_row(Var x, Var row) {
  const std::size_t d = detail::row_operand_len("add_row", x, row);
  Tensor out = x.value();
  auto o = out.data();
  auto r = row.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += r[i % d];
  return x.tape()->record("add_row", std::move(out), {x, row},
                          [d](const Tensor&, const Tensor& g, GradSink& in) {
                            detail::accumulate(in.grad(0), g);
                            if (Tensor* gr = in.grad(1)) {
                              auto dr = gr->data();
                              auto gv = g.data();
                              for (std::size_t i = 0; i < gv.size(); ++i) dr[i % d] += gv[i];
                            }
                          });
}

/// x * row, with `row` broadcast over every leading index of x (channel gating).
inline Var mul_row(Var x, Var row) {
  const std::size_t d = detail::row_operand_len("mul_row", x, row);
  Tensor out = x.value();
  auto o = out.data();
  auto r = row.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= r[i % d];
  return x.tape()->record("mul_row", std::move(out), {x, row},
                          [d](const Tensor&, const Tensor& g, GradSink& in) {
                            const auto xv = in.value(0).data();
                            const auto rv = in.value(1).data();
                            const auto gv = g.data();
                            if (Tensor* gx = in.grad(0)) {
                              auto dx = gx->data();
                              for (std::size_t i = 0; i < gv.size(); ++i) dx[i] += gv[i] * rv[i % d];
                            }
                            if (Tensor* gr = in.grad(1)) {
                              auto dr = gr->data();
                              for (std::size_t i = 0; i < gv.size(); ++i) dr[i % d] += gv[i] * xv[i];
                            }
                          });
}

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar aip = a[i * k + p];
      const Scalar* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace detail

/// Matrix product of two 2-D tensors.
inline Var matmul(Var a, Var b) {
  detail::require_2d("matmul", a);
  detail::require_2d("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  Tensor out({m, n}, Scalar{0});
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return a.tape()->record(
      "matmul", std::move(out), {a, b}, [m, k, n](const Tensor&, const Tensor& g, GradSink& in) {
        const auto av = in.value(0).data();
        const auto bv = in.value(1).data();
        const auto gv = g.data();
        // dA = G * B^T
        if (Tensor* ga = in.grad(0)) {
          auto da = ga->data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              Scalar s = 0;
              const Scalar* grow = gv.data() + i * n;
              const Scalar* brow = bv.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              da[i * k + p] += s;
            }
          }
        }
        // dB = A^T * G
        if (Tensor* gb = in.grad(1)) {
          auto db = gb->data();
          for (std::size_t i = 0; i < m; ++i) {
            const Scalar* grow = gv.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const Scalar aip = av[i * k + p];
              Scalar* drow = db.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
            }
          }
        }
      });
}

inline Var transpose(Var a) {
  detail::require_2d("transpose", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.tape()->record("transpose", std::move(out), {a},
                          [r, c](const Tensor&, const Tensor& g, GradSink& in) {
                            if (Tensor* ga = in.grad(0)) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
                            }
                          });
}

inline Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape()->record("reshape", std::move(out), {a},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            detail::accumulate(in.grad(0), g);
                          });
}

/// Softmax along `axis` (negative values count from the back), stabilized by
/// subtracting the per-slice maximum.
inline Var softmax(Var x, int axis = -1) {
  const Shape& s = x.shape();
  const int nd = static_cast<int>(s.size());
  const int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) throw ShapeError("softmax: axis out of range for " + to_string(s));
  const std::size_t n = s[ax];
  if (n == 0) throw ShapeError("softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < nd; ++i) inner *= s[i];

  Tensor out(s);
  const auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * n * inner + b;
      Scalar mx = xv[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      Scalar z = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const Scalar e = std::exp(xv[base + i * inner] - mx);
        o[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) o[base + i * inner] /= z;
    }
  }
  return x.tape()->record(
      "softmax", std::move(out), {x},
      [outer, inner, n](const Tensor& y, const Tensor& g, GradSink& in) {
        Tensor* gx = in.grad(0);
        if (!gx) return;
        for (std::size_t a = 0; a < outer; ++a) {
          for (std::size_t b = 0; b < inner; ++b) {
            const std::size_t base = a * n * inner + b;
            Scalar dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t k = base + i * inner;
              (*gx)[k] += y[k] * (g[k] - dot);
            }
          }
        }
      });
}

/// Sum of all elements, as a 0-D tensor.
inline Var sum(Var a) {
  detail::CompensatedSum s;
  for (Scalar v : a.value().data()) s.add(v);
  return a.tape()->record("sum", Tensor::scalar(s.value()), {a},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            if (Tensor* ga = in.grad(0)) {
                              for (Scalar& v : ga->data()) v += g[0];
                            }
                          });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), Scalar{1} / static_cast<Scalar>(n));
}

/// Mean over all leading indices: [... x d] -> [1 x d] (global average pool).
inline Var mean_rows(Var x) {
  const auto [rows, d] = as_rows(x.shape());
  if (rows == 0) throw ShapeError("mean_rows: no rows");
  Tensor out({1, d}, Scalar{0});
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[j] += xv[r * d + j];
  const Scalar inv = Scalar{1} / static_cast<Scalar>(rows);
  for (Scalar& v : out.data()) v *= inv;
  return x.tape()->record("mean_rows", std::move(out), {x},
                          [rows, d, inv](const Tensor&, const Tensor& g, GradSink& in) {
                            if (Tensor* gx = in.grad(0)) {
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += g[j] * inv;
                            }
                          });
}

/// GELU with the exact erf formulation.
inline Var gelu(Var x) {
  Tensor out = x.value();
  for (Scalar& v : out.data()) v = Scalar{0.5} * v * (Scalar{1} + std::erf(v / std::numbers::sqrt2_v<Scalar>));
  return x.tape()->record("gelu", std::move(out), {x},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            Tensor* gx = in.grad(0);
                            if (!gx) return;
                            const auto xv = in.value(0).data();
                            const Scalar inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<Scalar> / std::numbers::sqrt2_v<Scalar>;
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                              const Scalar v = xv[i];
                              const Scalar cdf = Scalar{0.5} * (Scalar{1} + std::erf(v / std::numbers::sqrt2_v<Scalar>));
                              const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar{-0.5} * v * v);
                              (*gx)[i] += g[i] * (cdf + v * pdf);
                            }
                          });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (Scalar& v : out.data()) v = v > 0 ? v : Scalar{0};
  return x.tape()->record("relu", std::move(out), {x},
                          [](const Tensor&, const Tensor& g, GradSink& in) {
                            Tensor* gx = in.grad(0);
                            if (!gx) return;
                            const auto xv = in.value(0).data();
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                              if (xv[i] > 0) (*gx)[i] += g[i];
                            }
                          });
}

inline Var sigmoid(Var x) {
  Tensor out = x.value();
  for (Scalar& v : out.data()) v = Scalar{1} / (Scalar{1} + std::exp(-v));
  return x.tape()->record("sigmoid", std::move(out), {x},
                          [](const Tensor& y, const Tensor& g, GradSink& in) {
                            Tensor* gx = in.grad(0);
                            if (!gx) return;
                            for (std::size_t i = 0; i < y.size(); ++i) {
                              (*gx)[i] += g[i] * y[i] * (Scalar{1} - y[i]);
                            }
                          });
}

/// Standardizes each last-axis row, then applies the affine gamma/beta.
inline Var layer_norm(Var x, Var gamma, Var beta, Scalar eps = Scalar{1e-5}) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const auto [rows, d] = as_rows(x.shape());
  if (d == 0) throw ShapeError("layer_norm: empty feature axis");
  detail::row_operand_len("layer_norm", x, gamma);
  detail::row_operand_len("layer_norm", x, beta);
  const auto xv = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  Tensor out(x.shape());
  // Cache the normalized values and inverse stddevs for the backward pass.
  std::vector<Scalar> xhat(rows * d), rstd(rows);
  const Scalar inv_d = Scalar{1} / static_cast<Scalar>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = xv.data() + r * d;
    Scalar mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu *= inv_d;
    Scalar var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var *= inv_d;
    const Scalar rs = Scalar{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const Scalar h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape()->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [rows, d, inv_d, xhat = std::move(xhat), rstd = std::move(rstd)](
          const Tensor&, const Tensor& g, GradSink& in) {
        const auto gam = in.value(1).data();
        if (Tensor* gg = in.grad(1)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (Tensor* gb = in.grad(2)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
        }
        if (Tensor* gx = in.grad(0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            Scalar sum_dh = 0, sum_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const Scalar dh = g[r * d + j] * gam[j];
              sum_dh += dh;
              sum_dh_h += dh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const Scalar dh = g[r * d + j] * gam[j];
              (*gx)[r * d + j] +=
                  rstd[r] * (dh - inv_d * sum_dh - xhat[r * d + j] * inv_d * sum_dh_h);
            }
          }
        }
      });
}

/// Columns [start, start+len) of a 2-D tensor.
inline Var slice_cols(Var a, std::size_t start, std::size_t len) {
  detail::require_2d("slice_cols", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (start + len > c) throw ShapeError("slice_cols: range exceeds " + to_string(a.shape()));
  Tensor out({r, len});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.data() + i * c + start, len, out.data().data() + i * len);
  return a.tape()->record("slice_cols", std::move(out), {a},
                          [r, c, start, len](const Tensor&, const Tensor& g, GradSink& in) {
                            if (Tensor* ga = in.grad(0)) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < len; ++j)
                                  (*ga)[i * c + start + j] += g[i * len + j];
                            }
                          });
}

/// Rows [start, start+len) of a 2-D tensor.
inline Var slice_rows(Var a, std::size_t start, std::size_t len) {
  detail::require_2d("slice_rows", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (start + len > r) throw ShapeError("slice_rows: range exceeds " + to_string(a.shape()));
  const auto av = a.value().data();
  Tensor out({len, c}, std::vector<Scalar>(av.begin() + start * c, av.begin() + (start + len) * c));
  return a.tape()->record("slice_rows", std::move(out), {a},
                          [c, start, len](const Tensor&, const Tensor& g, GradSink& in) {
                            if (Tensor* ga = in.grad(0)) {
                              for (std::size_t i = 0; i < len * c; ++i) (*ga)[start * c + i] += g[i];
                            }
                          });
}

/// Concatenation of 2-D tensors along columns (all must share the row count).
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].shape().at(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_2d("concat_cols", p);
    if (p.shape()[0] != r) {
      throw ShapeError("concat_cols: row counts differ, " + to_string(parts[0].shape()) + " vs " +
                       to_string(p.shape()));
    }
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].value().data();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pv.data() + i * widths[k], widths[k], out.data().data() + i * total + off);
    off += widths[k];
  }
  return parts[0].tape()->record(
      "concat_cols", std::move(out), parts,
      [r, total, widths](const Tensor&, const Tensor& g, GradSink& in) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (Tensor* gp = in.grad(k)) {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < widths[k]; ++j)
                (*gp)[i * widths[k] + j] += g[i * total + off + j];
          }
          off += widths[k];
        }
      });
}

/// Concatenation of 2-D tensors along rows (all must share the column count).
/// Zero-row parts are allowed.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].shape().at(1);
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_2d("concat_rows", p);
    if (p.shape()[1] != c) {
      throw ShapeError("concat_rows: column counts differ, " + to_string(parts[0].shape()) +
                       " vs " + to_string(p.shape()));
    }
    counts.push_back(p.shape()[0]);
    total += p.shape()[0];
  }
  std::vector<Scalar> data;
  data.reserve(total * c);
  for (const Var& p : parts) {
    const auto pv = p.value().data();
    data.insert(data.end(), pv.begin(), pv.end());
  }
  return parts[0].tape()->record("concat_rows", Tensor({total, c}, std::move(data)), parts,
                                 [c, counts](const Tensor&, const Tensor& g, GradSink& in) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < counts.size(); ++k) {
                                     if (Tensor* gp = in.grad(k)) {
                                       for (std::size_t i = 0; i < counts[k] * c; ++i)
                                         (*gp)[i] += g[off + i];
                                     }
                                     off += counts[k] * c;
                                   }
                                 });
}

/// Column gather on a 2-D tensor: out[:, j] = a[:, index[j]].
inline Var select_cols(Var a, std::vector<std::size_t> index) {
  detail::require_2d("select_cols", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1], n = index.size();
  for (std::size_t j : index) {
    if (j >= c) throw ShapeError("select_cols: column index out of range for " + to_string(a.shape()));
  }
  Tensor out({r, n});
  const auto av = a.value().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * c + index[j]];
  return a.tape()->record("select_cols", std::move(out), {a},
                          [r, c, n, index = std::move(index)](const Tensor&, const Tensor& g,
                                                              GradSink& in) {
                            if (Tensor* ga = in.grad(0)) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  (*ga)[i * c + index[j]] += g[i * n + j];
                            }
                          });
}

/// Splits an [H x W x c] image into non-overlapping p x p patches:
/// [(H/p * W/p) x (p*p*c)], patches in row-major grid order, each patch
/// flattened in (row, col, channel) order.
inline Var patchify(Var img, std::size_t p) {
  const Shape& s = img.shape();
  if (s.size() != 3) throw ShapeError("patchify: expected [H x W x c], got " + to_string(s));
  const std::size_t H = s[0], W = s[1], C = s[2];
  if (p == 0 || H % p != 0 || W % p != 0) {
    throw ShapeError("patchify: patch size " + std::to_string(p) + " does not divide H=" +
                     std::to_string(H) + ", W=" + std::to_string(W));
  }
  const std::size_t gh = H / p, gw = W / p, plen = p * p * C;
  // index map: out element -> image element
  std::vector<std::size_t> src(gh * gw * plen);
  for (std::size_t ti = 0; ti < gh; ++ti)
    for (std::size_t tj = 0; tj < gw; ++tj)
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c)
          for (std::size_t ch = 0; ch < C; ++ch) {
            const std::size_t o = (ti * gw + tj) * plen + (r * p + c) * C + ch;
            src[o] = ((ti * p + r) * W + (tj * p + c)) * C + ch;
          }
  Tensor out({gh * gw, plen});
  const auto iv = img.value().data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = iv[src[i]];
  return img.tape()->record("patchify", std::move(out), {img},
                            [src = std::move(src)](const Tensor&, const Tensor& g, GradSink& in) {
                              if (Tensor* gi = in.grad(0)) {
                                for (std::size_t i = 0; i < src.size(); ++i) (*gi)[src[i]] += g[i];
                              }
                            });
}

/// [h x w x 4c] -> [2h x 2w x c]. Input channel (ki*2 + kj)*c + o lands at
/// output pixel (2i+ki, 2j+kj), channel o. Together with a matmul this is a
/// stride-2, 2x2 transposed convolution.
inline Var depth_to_space2(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] % 4 != 0) {
    throw ShapeError("depth_to_space2: expected [h x w x 4c], got " + to_string(s));
  }
  const std::size_t h = s[0], w = s[1], c = s[2] / 4;
  std::vector<std::size_t> dst(x.value().size());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ki = 0; ki < 2; ++ki)
        for (std::size_t kj = 0; kj < 2; ++kj)
          for (std::size_t o = 0; o < c; ++o) {
            const std::size_t from = (i * w + j) * 4 * c + (ki * 2 + kj) * c + o;
            dst[from] = ((2 * i + ki) * (2 * w) + (2 * j + kj)) * c + o;
          }
  Tensor out({2 * h, 2 * w, c});
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) out[dst[i]] = xv[i];
  return x.tape()->record("depth_to_space2", std::move(out), {x},
                          [dst = std::move(dst)](const Tensor&, const Tensor& g, GradSink& in) {
                            if (Tensor* gx = in.grad(0)) {
                              for (std::size_t i = 0; i < dst.size(); ++i) (*gx)[i] += g[dst[i]];
                            }
                          });
}

namespace detail {

struct Tap {
  std::size_t lo, hi;
  Scalar w_hi;
};

// Half-pixel-centre sampling with edge clamping.
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const Scalar ratio = static_cast<Scalar>(in) / static_cast<Scalar>(out);
  for (std::size_t o = 0; o < out; ++o) {
    Scalar src = (static_cast<Scalar>(o) + Scalar{0.5}) * ratio - Scalar{0.5};
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<Scalar>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of an [h x w x c] grid to [H x W x c].
inline Var bilinear_resize(Var x, std::size_t H, std::size_t W) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] == 0 || s[1] == 0) {
    throw ShapeError("bilinear_resize: expected non-empty [h x w x c], got " + to_string(s));
  }
  const std::size_t h = s[0], w = s[1], c = s[2];
  auto ty = detail::bilinear_taps(h, H);
  auto tx = detail::bilinear_taps(w, W);
  Tensor out({H, W, c}, Scalar{0});
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < H; ++i) {
    const auto& a = ty[i];
    for (std::size_t j = 0; j < W; ++j) {
      const auto& b = tx[j];
      const Scalar w00 = (1 - a.w_hi) * (1 - b.w_hi), w01 = (1 - a.w_hi) * b.w_hi;
      const Scalar w10 = a.w_hi * (1 - b.w_hi), w11 = a.w_hi * b.w_hi;
      Scalar* o = out.data().data() + (i * W + j) * c;
      const Scalar* p00 = xv.data() + (a.lo * w + b.lo) * c;
      const Scalar* p01 = xv.data() + (a.lo * w + b.hi) * c;
      const Scalar* p10 = xv.data() + (a.hi * w + b.lo) * c;
      const Scalar* p11 = xv.data() + (a.hi * w + b.hi) * c;
      for (std::size_t k = 0; k < c; ++k) {
        o[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
      }
    }
  }
  return x.tape()->record(
      "bilinear_resize", std::move(out), {x},
      [=, ty = std::move(ty), tx = std::move(tx)](const Tensor&, const Tensor& g, GradSink& in) {
        Tensor* gx = in.grad(0);
        if (!gx) return;
        auto d = gx->data();
        for (std::size_t i = 0; i < H; ++i) {
          const auto& a = ty[i];
          for (std::size_t j = 0; j < W; ++j) {
            const auto& b = tx[j];
            const Scalar w00 = (1 - a.w_hi) * (1 - b.w_hi), w01 = (1 - a.w_hi) * b.w_hi;
            const Scalar w10 = a.w_hi * (1 - b.w_hi), w11 = a.w_hi * b.w_hi;
            const Scalar* go = g.data().data() + (i * W + j) * c;
            for (std::size_t k = 0; k < c; ++k) {
              d[(a.lo * w + b.lo) * c + k] += w00 * go[k];
              d[(a.lo * w + b.hi) * c + k] += w01 * go[k];
              d[(a.hi * w + b.lo) * c + k] += w10 * go[k];
              d[(a.hi * w + b.hi) * c + k] += w11 * go[k];
            }
          }
        }
      });
}

/// Mean pixel-wise cross-entropy of [N x C] logits against integer labels;
/// labels equal to `ignore_label` are skipped. Zero when every pixel is
/// ignored.
inline Var cross_entropy(Var logits, std::span<const std::int32_t> labels,
                         std::int32_t ignore_label) {
  detail::require_2d("cross_entropy", logits);
  const std::size_t n = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " logit rows");
  }
  const auto lv = logits.value().data();
  Tensor prob({n, C});
  std::size_t counted = 0;
  detail::CompensatedSum total;
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t y = labels[i];
    if (y == ignore_label) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(C) + ")");
    }
    const Scalar* row = lv.data() + i * C;
    Scalar mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    Scalar z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const Scalar lz = std::log(z);
    for (std::size_t c = 0; c < C; ++c) prob[i * C + c] = std::exp(row[c] - mx - lz);
    total.add(lz - (row[y] - mx));
    ++counted;
  }
  const Scalar loss = counted ? total.value() / static_cast<Scalar>(counted) : Scalar{0};
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return logits.tape()->record(
      "cross_entropy", Tensor::scalar(loss), {logits},
      [n, C, counted, ignore_label, lab = std::move(lab), prob = std::move(prob)](
          const Tensor&, const Tensor& g, GradSink& in) {
        Tensor* gl = in.grad(0);
        if (!gl || counted == 0) return;
        const Scalar f = g[0] / static_cast<Scalar>(counted);
        for (std::size_t i = 0; i < n; ++i) {
          if (lab[i] == ignore_label) continue;
          for (std::size_t c = 0; c < C; ++c) (*gl)[i * C + c] += f * prob[i * C + c];
          (*gl)[i * C + static_cast<std::size_t>(lab[i])] -= f;
        }
      });
}

/// Soft Dice loss over [N x C] class probabilities: 1 - mean_c D_c with
/// D_c = (2 sum p_c y_c + smooth) / (sum p_c + sum y_c + smooth), sums over
/// non-ignored pixels.
inline Var dice_from_probs(Var probs, std::span<const std::int32_t> labels, Scalar smooth,
                           std::int32_t ignore_label) {
  detail::require_2d("dice_loss", probs);
  if (!(smooth > 0)) throw ConfigError("dice_loss: smoothing term must be positive");
  const std::size_t n = probs.shape()[0], C = probs.shape()[1];
  if (labels.size() != n) throw ShapeError("dice_loss: label count does not match pixel count");
  const auto pv = probs.value().data();
  std::vector<detail::CompensatedSum> inter_sum(C), denom_sum(C);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t y = labels[i];
    if (y == ignore_label) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ConfigError("dice_loss: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(C) + ")");
    }
    for (std::size_t c = 0; c < C; ++c) denom_sum[c].add(pv[i * C + c]);
    inter_sum[static_cast<std::size_t>(y)].add(pv[i * C + static_cast<std::size_t>(y)]);
    denom_sum[static_cast<std::size_t>(y)].add(1);
  }
  std::vector<Scalar> inter(C), denom(C);
  for (std::size_t c = 0; c < C; ++c) {
    inter[c] = inter_sum[c].value();
    denom[c] = denom_sum[c].value();
  }
  Scalar mean_dice = 0;
  for (std::size_t c = 0; c < C; ++c) mean_dice += (2 * inter[c] + smooth) / (denom[c] + smooth);
  mean_dice /= static_cast<Scalar>(C);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return probs.tape()->record(
      "dice_loss", Tensor::scalar(Scalar{1} - mean_dice), {probs},
      [n, C, smooth, ignore_label, lab = std::move(lab), inter = std::move(inter),
       denom = std::move(denom)](const Tensor&, const Tensor& g, GradSink& in) {
        Tensor* gp = in.grad(0);
        if (!gp) return;
        // dD_c/dp_ic = (2 y_ic (S_c + s) - (2 I_c + s)) / (S_c + s)^2
        const Scalar f = -g[0] / static_cast<Scalar>(C);
        std::vector<Scalar> base(C), hit(C);
        for (std::size_t c = 0; c < C; ++c) {
          const Scalar s2 = (denom[c] + smooth) * (denom[c] + smooth);
          base[c] = -(2 * inter[c] + smooth) / s2;
          hit[c] = 2 * (denom[c] + smooth) / s2;
        }
        for (std::size_t i = 0; i < n; ++i) {
          if (lab[i] == ignore_label) continue;
          for (std::size_t c = 0; c < C; ++c) (*gp)[i * C + c] += f * base[c];
          (*gp)[i * C + static_cast<std::size_t>(lab[i])] += f * hit[static_cast<std::size_t>(lab[i])];
        }
      });
}

}  // namespace taseg::ops
