#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "bridgetts/tape.hpp"

namespace bridgetts {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

enum class Padding { same, valid };

namespace detail {

template <typename T>
ConstMatMap<T> as_mat(const Array<T>& a, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MatMap<T> as_mat(Array<T>& a, std::size_t rows, std::size_t cols) {
  return MatMap<T>(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void check_rank2(const Shape& s, const char* what) {
  require(s.size() == 2, ErrorCode::shape_mismatch, std::string(what) + " expects a rank-2 array, got " + shape_str(s));
}

template <typename T>
T gelu_value(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T inner = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(inner));
}

template <typename T>
T gelu_derivative(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T x2 = x * x;
  const T inner = c * (x + static_cast<T>(0.044715) * x2 * x);
  const T th = std::tanh(inner);
  const T sech2 = T{1} - th * th;
  return static_cast<T>(0.5) * (T{1} + th) +
         static_cast<T>(0.5) * x * sech2 * c * (T{1} + static_cast<T>(3 * 0.044715) * x2);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Array<T>& g) {
    for (auto v : {a, b})
      if (auto* gt = t.grad_target(v))
        for (std::size_t i = 0; i < g.size(); ++i) (*gt)[i] += g[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Array<T>& g) {
    if (auto* ga = t.grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = t.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Array<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (auto* ga = t.grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (auto* gb = t.grad_target(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Array<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape<T>& t, const Array<T>& g) {
    if (auto* ga = t.grad_target(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s;
  });
}

// x + offset where offset is a constant. With offset = q - x this is the
// straight-through quantizer: the value is q, the gradient w.r.t. x is identity.
template <typename T>
Var<T> add_constant(const Var<T>& x, const Array<T>& offset) {
  require(x.shape() == offset.shape(), ErrorCode::shape_mismatch,
          "add_constant: " + shape_str(x.shape()) + " vs " + shape_str(offset.shape()));
  Array<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += offset[i];
  return x.tape()->record(std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Array<T> out = x.value();
  for (auto& v : out.values()) v = detail::gelu_value(v);
  return x.tape()->record(std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x)) {
      const auto& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * detail::gelu_derivative(xv[i]);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Array<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return x.tape()->record(std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x)) {
      const auto& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T{0}) (*gx)[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().values()) s += v;
  return x.tape()->record(Array<T>::scalar(s), {x}, [x](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (auto& v : gx->values()) v += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  require(x.value().size() > 0, ErrorCode::shape_mismatch, "mean of empty array");
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Array<T> out = x.value().reshaped(std::move(shape));
  return x.tape()->record(std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

// ---------------------------------------------------------------- dense algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_rank2(a.shape(), "matmul");
  detail::check_rank2(b.shape(), "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  require(b.shape()[0] == k, ErrorCode::shape_mismatch,
          "matmul: inner dims disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Array<T> out(Shape{n, m});
  detail::as_mat(out, n, m).noalias() = detail::as_mat(a.value(), n, k) * detail::as_mat(b.value(), k, m);
  return a.tape()->record(std::move(out), {a, b}, [a, b, n, k, m](Tape<T>& t, const Array<T>& g) {
    auto G = detail::as_mat(g, n, m);
    if (auto* ga = t.grad_target(a))
      detail::as_mat(*ga, n, k).noalias() += G * detail::as_mat(b.value(), k, m).transpose();
    if (auto* gb = t.grad_target(b))
      detail::as_mat(*gb, k, m).noalias() += detail::as_mat(a.value(), n, k).transpose() * G;
  });
}

// x[N x Din] * weight[Din x Dout] + bias[Dout]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::check_rank2(x.shape(), "linear input");
  detail::check_rank2(weight.shape(), "linear weight");
  const std::size_t n = x.shape()[0], din = x.shape()[1], dout = weight.shape()[1];
  require(weight.shape()[0] == din, ErrorCode::shape_mismatch,
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  require(bias.value().size() == dout, ErrorCode::shape_mismatch,
          "linear: weight " + shape_str(weight.shape()) + " vs bias " + shape_str(bias.shape()));
  Array<T> out(Shape{n, dout});
  auto Y = detail::as_mat(out, n, dout);
  Y.noalias() = detail::as_mat(x.value(), n, din) * detail::as_mat(weight.value(), din, dout);
  const auto bv = detail::as_mat(bias.value(), 1, dout);
  Y.rowwise() += bv.row(0);
  return x.tape()->record(std::move(out), {x, weight, bias},
                          [x, weight, bias, n, din, dout](Tape<T>& t, const Array<T>& g) {
                            auto G = detail::as_mat(g, n, dout);
                            if (auto* gx = t.grad_target(x))
                              detail::as_mat(*gx, n, din).noalias() +=
                                  G * detail::as_mat(weight.value(), din, dout).transpose();
                            if (auto* gw = t.grad_target(weight))
                              detail::as_mat(*gw, din, dout).noalias() +=
                                  detail::as_mat(x.value(), n, din).transpose() * G;
                            if (auto* gb = t.grad_target(bias))
                              detail::as_mat(*gb, 1, dout) += G.colwise().sum();
                          });
}

// Row-wise layer normalisation over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = static_cast<T>(1e-5)) {
  detail::check_rank2(x.shape(), "layer_norm");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  require(gamma.value().size() == c && beta.value().size() == c, ErrorCode::shape_mismatch,
          "layer_norm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()));
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Array<T> out(Shape{n, c});
  auto xhat = std::make_shared<Array<T>>(Shape{n, c});
  auto inv_std = std::make_shared<std::vector<T>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += xv[r * c + j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv[r * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xv[r * c + j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape()->record(
      std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, n, c](Tape<T>& t, const Array<T>& g) {
        const auto& gv = gamma.value();
        if (auto* gg = t.grad_target(gamma))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g[r * c + j] * (*xhat)[r * c + j];
        if (auto* gb = t.grad_target(beta))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[r * c + j];
        if (auto* gx = t.grad_target(x)) {
          for (std::size_t r = 0; r < n; ++r) {
            T sum_dh{0}, sum_dh_h{0};
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = g[r * c + j] * gv[j];
              sum_dh += dh;
              sum_dh_h += dh * (*xhat)[r * c + j];
            }
            const T inv_c = T{1} / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = g[r * c + j] * gv[j];
              (*gx)[r * c + j] +=
                  (*inv_std)[r] * (dh - inv_c * sum_dh - (*xhat)[r * c + j] * inv_c * sum_dh_h);
            }
          }
        }
      });
}

// Rows of table[V x E] selected by ids.
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  detail::check_rank2(table.shape(), "embedding");
  const std::size_t v = table.shape()[0], e = table.shape()[1];
  Array<T> out(Shape{ids.size(), e});
  const auto& tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < v, ErrorCode::out_of_range,
            "embedding id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) + " rows");
    std::copy_n(tv.data() + ids[i] * e, e, out.data() + i * e);
  }
  return table.tape()->record(std::move(out), {table}, [table, ids, e](Tape<T>& t, const Array<T>& g) {
    if (auto* gt = t.grad_target(table))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < e; ++j) (*gt)[ids[i] * e + j] += g[i * e + j];
  });
}

// ---------------------------------------------------------------- structural

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat_cols of nothing");
  const std::size_t n = parts[0].shape().at(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::check_rank2(p.shape(), "concat_cols");
    require(p.shape()[0] == n, ErrorCode::shape_mismatch,
            "concat_cols: row counts differ, " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Array<T> out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
  }
  return parts[0].tape()->record(std::move(out), parts, [parts, widths, n, total](Tape<T>& t, const Array<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (auto* gp = t.grad_target(parts[k]))
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) (*gp)[r * widths[k] + j] += g[r * total + off + j];
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t width) {
  detail::check_rank2(x.shape(), "slice_cols");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  require(begin + width <= c, ErrorCode::out_of_range,
          "slice_cols [" + std::to_string(begin) + ", +" + std::to_string(width) + ") of " + shape_str(x.shape()));
  Array<T> out(Shape{n, width});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < n; ++r) std::copy_n(xv.data() + r * c + begin, width, out.data() + r * width);
  return x.tape()->record(std::move(out), {x}, [x, begin, width, n, c](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < width; ++j) (*gx)[r * c + begin + j] += g[r * width + j];
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat_rows of nothing");
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> rows;
  for (const auto& p : parts) {
    detail::check_rank2(p.shape(), "concat_rows");
    require(p.shape()[1] == c, ErrorCode::shape_mismatch,
            "concat_rows: widths differ, " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows.push_back(p.shape()[0]);
    total += p.shape()[0];
  }
  Array<T> out(Shape{total, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.value().size();
  }
  return parts[0].tape()->record(std::move(out), parts, [parts, c](Tape<T>& t, const Array<T>& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.value().size();
      if (auto* gp = t.grad_target(p))
        for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[off + i];
      off += len;
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count) {
  detail::check_rank2(x.shape(), "slice_rows");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  require(begin + count <= n, ErrorCode::out_of_range,
          "slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + shape_str(x.shape()));
  Array<T> out(Shape{count, c});
  std::copy_n(x.value().data() + begin * c, count * c, out.data());
  return x.tape()->record(std::move(out), {x}, [x, begin, count, c](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (std::size_t i = 0; i < count * c; ++i) (*gx)[begin * c + i] += g[i];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& index) {
  detail::check_rank2(x.shape(), "gather_rows");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  Array<T> out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < n, ErrorCode::out_of_range, "gather_rows index " + std::to_string(index[i]));
    std::copy_n(x.value().data() + index[i] * c, c, out.data() + i * c);
  }
  return x.tape()->record(std::move(out), {x}, [x, index, c](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*gx)[index[i] * c + j] += g[i * c + j];
  });
}

// Extend to `rows` rows by repeating the last row.
template <typename T>
Var<T> pad_rows_replicate(const Var<T>& x, std::size_t rows) {
  detail::check_rank2(x.shape(), "pad_rows_replicate");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  require(n >= 1 && rows >= n, ErrorCode::invalid_argument,
          "pad_rows_replicate to " + std::to_string(rows) + " rows from " + shape_str(x.shape()));
  if (rows == n) return x;
  Array<T> out(Shape{rows, c});
  const auto& xv = x.value();
  std::copy(xv.values().begin(), xv.values().end(), out.data());
  for (std::size_t r = n; r < rows; ++r) std::copy_n(xv.data() + (n - 1) * c, c, out.data() + r * c);
  return x.tape()->record(std::move(out), {x}, [x, n, c, rows](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < n * c; ++i) (*gx)[i] += g[i];
      for (std::size_t r = n; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) (*gx)[(n - 1) * c + j] += g[r * c + j];
    }
  });
}

// ---------------------------------------------------------------- convolution

inline std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride, Padding padding) {
  const std::size_t pad = padding == Padding::same ? kernel - 1 : 0;
  if (length + pad < kernel) return 0;
  return (length + pad - kernel) / stride + 1;
}

// Cross-correlation of input[T x Cin] with kernel[k x Cin x Cout]. `same`
// zero-pads (k-1)/2 frames on the left and the remainder on the right.
template <typename T>
Var<T> conv1d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride = 1,
              Padding padding = Padding::same) {
  detail::check_rank2(input.shape(), "conv1d input");
  const Shape& ks = kernel.shape();
  require(ks.size() == 3, ErrorCode::shape_mismatch, "conv1d kernel must be [k x Cin x Cout], got " + shape_str(ks));
  const std::size_t len = input.shape()[0], cin = input.shape()[1];
  const std::size_t k = ks[0], cout = ks[2];
  require(ks[1] == cin, ErrorCode::shape_mismatch,
          "conv1d: input " + shape_str(input.shape()) + " has " + std::to_string(cin) + " channels, kernel " +
              shape_str(ks) + " expects " + std::to_string(ks[1]));
  require(bias.value().size() == cout, ErrorCode::shape_mismatch,
          "conv1d: kernel " + shape_str(ks) + " vs bias " + shape_str(bias.shape()));
  require(stride >= 1, ErrorCode::invalid_argument, "conv1d stride must be >= 1");
  const std::size_t pad_left = padding == Padding::same ? (k - 1) / 2 : 0;
  const std::size_t pad_total = padding == Padding::same ? k - 1 : 0;
  const std::size_t out_len = conv_output_length(len, k, stride, padding);
  require(out_len >= 1, ErrorCode::shape_mismatch,
          "conv1d: input " + shape_str(input.shape()) + " shorter than kernel " + shape_str(ks));
  const std::size_t plen = len + pad_total;

  auto padded = std::make_shared<Array<T>>(Shape{plen, cin});
  std::copy(input.value().values().begin(), input.value().values().end(), padded->data() + pad_left * cin);

  Array<T> out(Shape{out_len, cout});
  auto Y = detail::as_mat(out, out_len, cout);
  Y.rowwise() = detail::as_mat(bias.value(), 1, cout).row(0);
  const auto eout = static_cast<Eigen::Index>(out_len);
  const auto ecin = static_cast<Eigen::Index>(cin);
  const auto ecout = static_cast<Eigen::Index>(cout);
  for (std::size_t j = 0; j < k; ++j) {
    ConstStridedMap<T> xj(padded->data() + j * cin, eout, ecin, Eigen::OuterStride<>(stride * cin));
    ConstMatMap<T> wj(kernel.value().data() + j * cin * cout, ecin, ecout);
    Y.noalias() += xj * wj;
  }
  return input.tape()->record(
      std::move(out), {input, kernel, bias},
      [=](Tape<T>& t, const Array<T>& g) {
        ConstMatMap<T> G(g.data(), eout, ecout);
        if (auto* gb = t.grad_target(bias)) detail::as_mat(*gb, 1, cout) += G.colwise().sum();
        if (auto* gk = t.grad_target(kernel)) {
          for (std::size_t j = 0; j < k; ++j) {
            ConstStridedMap<T> xj(padded->data() + j * cin, eout, ecin, Eigen::OuterStride<>(stride * cin));
            MatMap<T>(gk->data() + j * cin * cout, ecin, ecout).noalias() += xj.transpose() * G;
          }
        }
        if (auto* gx = t.grad_target(input)) {
          Array<T> gpad(Shape{plen, cin});
          for (std::size_t j = 0; j < k; ++j) {
            StridedMap<T> gj(gpad.data() + j * cin, eout, ecin, Eigen::OuterStride<>(stride * cin));
            ConstMatMap<T> wj(kernel.value().data() + j * cin * cout, ecin, ecout);
            gj.noalias() += G * wj.transpose();
          }
          for (std::size_t i = 0; i < len * cin; ++i) (*gx)[i] += gpad[pad_left * cin + i];
        }
      });
}

// Transposed convolution: output[(T-1)*stride + k x Cout], each input frame
// scatters k output frames through kernel[k x Cin x Cout].
template <typename T>
Var<T> conv_transpose1d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride) {
  detail::check_rank2(input.shape(), "conv_transpose1d input");
  const Shape& ks = kernel.shape();
  require(ks.size() == 3, ErrorCode::shape_mismatch,
          "conv_transpose1d kernel must be [k x Cin x Cout], got " + shape_str(ks));
  const std::size_t len = input.shape()[0], cin = input.shape()[1];
  const std::size_t k = ks[0], cout = ks[2];
  require(ks[1] == cin, ErrorCode::shape_mismatch,
          "conv_transpose1d: input " + shape_str(input.shape()) + " vs kernel " + shape_str(ks));
  require(bias.value().size() == cout, ErrorCode::shape_mismatch,
          "conv_transpose1d: kernel " + shape_str(ks) + " vs bias " + shape_str(bias.shape()));
  require(stride >= 1 && len >= 1, ErrorCode::invalid_argument, "conv_transpose1d needs stride >= 1 and T >= 1");
  const std::size_t out_len = (len - 1) * stride + k;
  Array<T> out(Shape{out_len, cout});
  detail::as_mat(out, out_len, cout).rowwise() = detail::as_mat(bias.value(), 1, cout).row(0);
  const auto elen = static_cast<Eigen::Index>(len);
  const auto ecin = static_cast<Eigen::Index>(cin);
  const auto ecout = static_cast<Eigen::Index>(cout);
  ConstMatMap<T> X(input.value().data(), elen, ecin);
  for (std::size_t j = 0; j < k; ++j) {
    StridedMap<T> yj(out.data() + j * cout, elen, ecout, Eigen::OuterStride<>(stride * cout));
    yj.noalias() += X * ConstMatMap<T>(kernel.value().data() + j * cin * cout, ecin, ecout);
  }
  return input.tape()->record(std::move(out), {input, kernel, bias}, [=](Tape<T>& t, const Array<T>& g) {
    if (auto* gb = t.grad_target(bias)) detail::as_mat(*gb, 1, cout) += detail::as_mat(g, out_len, cout).colwise().sum();
    ConstMatMap<T> X(input.value().data(), elen, ecin);
    for (std::size_t j = 0; j < k; ++j) {
      ConstStridedMap<T> gj(g.data() + j * cout, elen, ecout, Eigen::OuterStride<>(stride * cout));
      if (auto* gk = t.grad_target(kernel))
        MatMap<T>(gk->data() + j * cin * cout, ecin, ecout).noalias() += X.transpose() * gj;
      if (auto* gx = t.grad_target(input))
        MatMap<T>(gx->data(), elen, ecin).noalias() +=
            gj * ConstMatMap<T>(kernel.value().data() + j * cin * cout, ecin, ecout).transpose();
    }
  });
}

// ---------------------------------------------------------------- softmax family

template <typename T>
void softmax_rows_inplace(Array<T>& a) {
  const std::size_t n = a.rows(), c = a.cols();
  for (std::size_t r = 0; r < n; ++r) {
    T* row = a.data() + r * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  detail::check_rank2(x.shape(), "softmax_rows");
  auto probs = std::make_shared<Array<T>>(x.value());
  softmax_rows_inplace(*probs);
  const std::size_t n = probs->rows(), c = probs->cols();
  Array<T> out = *probs;
  return x.tape()->record(std::move(out), {x}, [x, probs, n, c](Tape<T>& t, const Array<T>& g) {
    if (auto* gx = t.grad_target(x))
      for (std::size_t r = 0; r < n; ++r) {
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * (*probs)[r * c + j];
        for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += (*probs)[r * c + j] * (g[r * c + j] - dot);
      }
  });
}

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
  detail::check_rank2(logits.shape(), "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  require(targets.size() == n, ErrorCode::shape_mismatch,
          "softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
              shape_str(logits.shape()));
  require(n > 0, ErrorCode::shape_mismatch, "softmax_cross_entropy on zero rows");
  for (int tg : targets)
    require(tg >= 0 && static_cast<std::size_t>(tg) < k, ErrorCode::out_of_range,
            "target " + std::to_string(tg) + " outside [0, " + std::to_string(k) + ")");
  auto probs = std::make_shared<Array<T>>(logits.value());
  const auto& lv = logits.value();
  T loss{0};
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = lv.data() + r * k;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j]);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    loss += std::log(z) + mx - row[targets[r]];
  }
  softmax_rows_inplace(*probs);
  loss /= static_cast<T>(n);
  return logits.tape()->record(Array<T>::scalar(loss), {logits},
                               [logits, probs, targets, n, k](Tape<T>& t, const Array<T>& g) {
                                 if (auto* gl = t.grad_target(logits)) {
                                   const T s = g[0] / static_cast<T>(n);
                                   for (std::size_t r = 0; r < n; ++r)
                                     for (std::size_t j = 0; j < k; ++j) {
                                       const T onehot = static_cast<std::size_t>(targets[r]) == j ? T{1} : T{0};
                                       (*gl)[r * k + j] += s * ((*probs)[r * k + j] - onehot);
                                     }
                                 }
                               });
}

// Mean of squared elementwise differences.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          "mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.value().size();
  require(n > 0, ErrorCode::shape_mismatch, "mse of empty arrays");
  const auto& av = a.value();
  const auto& bv = b.value();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  return a.tape()->record(Array<T>::scalar(acc / static_cast<T>(n)), {a, b}, [a, b, n](Tape<T>& t, const Array<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const T s = T{2} * g[0] / static_cast<T>(n);
    if (auto* ga = t.grad_target(a))
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += s * (av[i] - bv[i]);
    if (auto* gb = t.grad_target(b))
      for (std::size_t i = 0; i < n; ++i) (*gb)[i] -= s * (av[i] - bv[i]);
  });
}

// ---------------------------------------------------------------- attention

// Causal multi-head self-attention core. qkv is [N x 3W] laid out as
// [q | k | v]; returns the concatenated head outputs [N x W]. Position i
// attends to positions j <= i only.
template <typename T>
Var<T> causal_self_attention(const Var<T>& qkv, std::size_t heads) {
  detail::check_rank2(qkv.shape(), "causal_self_attention");
  const std::size_t n = qkv.shape()[0], w3 = qkv.shape()[1];
  require(w3 % 3 == 0 && (w3 / 3) % heads == 0, ErrorCode::shape_mismatch,
          "causal_self_attention: width " + std::to_string(w3) + " not divisible into 3 x " + std::to_string(heads) +
              " heads");
  const std::size_t w = w3 / 3, hd = w / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
  const auto en = static_cast<Eigen::Index>(n);
  const auto ehd = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> s3(static_cast<Eigen::Index>(w3));
  const Eigen::OuterStride<> s1(static_cast<Eigen::Index>(w));

  auto probs = std::make_shared<std::vector<RowMat<T>>>(heads);
  Array<T> out(Shape{n, w});
  const T* base = qkv.value().data();
  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap<T> q(base + h * hd, en, ehd, s3);
    ConstStridedMap<T> kk(base + w + h * hd, en, ehd, s3);
    ConstStridedMap<T> v(base + 2 * w + h * hd, en, ehd, s3);
    RowMat<T>& p = (*probs)[h];
    p.noalias() = (q * kk.transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < en; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, p(i, j));
      T z{0};
      for (Eigen::Index j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= z;
      for (Eigen::Index j = i + 1; j < en; ++j) p(i, j) = T{0};
    }
    StridedMap<T>(out.data() + h * hd, en, ehd, s1).noalias() = p * v;
  }
  return qkv.tape()->record(std::move(out), {qkv}, [=](Tape<T>& t, const Array<T>& g) {
    auto* gq = t.grad_target(qkv);
    if (!gq) return;
    const T* base = qkv.value().data();
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> q(base + h * hd, en, ehd, s3);
      ConstStridedMap<T> kk(base + w + h * hd, en, ehd, s3);
      ConstStridedMap<T> v(base + 2 * w + h * hd, en, ehd, s3);
      ConstStridedMap<T> go(g.data() + h * hd, en, ehd, s1);
      const RowMat<T>& p = (*probs)[h];
      RowMat<T> dp = go * v.transpose();
      StridedMap<T>(gq->data() + 2 * w + h * hd, en, ehd, s3).noalias() += p.transpose() * go;
      RowMat<T> ds(en, en);
      for (Eigen::Index i = 0; i < en; ++i) {
        T dot{0};
        for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
        for (Eigen::Index j = 0; j < en; ++j) ds(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * inv_sqrt : T{0};
      }
      StridedMap<T>(gq->data() + h * hd, en, ehd, s3).noalias() += ds * kk;
      StridedMap<T>(gq->data() + w + h * hd, en, ehd, s3).noalias() += ds.transpose() * q;
    }
  });
}

}  // namespace bridgetts
