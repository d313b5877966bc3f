#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "nanonet/error.hpp"
#include "nanonet/tensor.hpp"

namespace nanonet {

using autograd::grad_of;
using autograd::make_result;

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](auto, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      auto B = b.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          ga[i * k + p] += s;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      auto A = a.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](auto, std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = grad_of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](auto, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "multiply");
  std::vector<double> out(a.numel());
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](auto, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      auto B = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      auto A = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [x, factor](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require_matrix(x, "add_rowvec");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.numel() != n) {
    throw ShapeError("add_rowvec: bias " + shape_str(b.shape()) + " does not match rows of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += B[j];
  return make_result(x.shape(), std::move(out), {x, b}, [x, b, m, n](auto, std::span<const double> g) {
    if (x.requires_grad()) {
      auto gx = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = X[i * n + j];
  return make_result({n, m}, std::move(out), {x}, [x, m, n](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    }
    offsets.push_back(total);
    total += p.cols();
  }
  std::vector<double> out(m * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto P = parts[k].data();
    const std::size_t c = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&P[i * c], c, &out[i * total + offsets[k]]);
  }
  return make_result({m, total}, std::move(out), parts, [parts, offsets, m, total](auto, std::span<const double> g) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      auto gp = grad_of(parts[k]);
      const std::size_t c = parts[k].cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offsets[k] + j];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols();
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  return make_result({end - begin, n}, std::move(out), {x}, [x, begin, n](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  if (begin >= end || end > x.cols()) {
    throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  std::vector<double> out(m * w);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(&X[i * n + begin], w, &out[i * w]);
  return make_result({m, w}, std::move(out), {x}, [x, begin, m, n, w](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t v = table.rows(), n = table.cols();
  std::vector<double> out(ids.size() * n);
  auto T = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " + std::to_string(v) + " rows");
    }
    std::copy_n(&T[ids[i] * n], n, &out[i * n]);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return make_result({ids.size(), n}, std::move(out), {table}, [table, idx = std::move(idx), n](auto, std::span<const double> g) {
    auto gt = grad_of(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gt[idx[i] * n + j] += g[i * n + j];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [x](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s / n}, {x}, [x, n](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    for (auto& v : gx) v += g[0] / n;
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * X[i] * (1.0 + std::erf(X[i] * std::numbers::sqrt2 / 2.0));
  return make_result(x.shape(), std::move(out), {x}, [x](auto, std::span<const double> g) {
    auto gx = grad_of(x);
    auto X = x.data();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(X[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * X[i] * X[i]);
      gx[i] += g[i] * (cdf + X[i] * pdf);
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  require_finite(x.data(), "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &X[i * n];
    const double mx = *std::max_element(row, row + n);
    if (mx == -std::numeric_limits<double>::infinity()) throw NumericError("softmax_rows: row is entirely masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, m, n](std::span<const double> y, std::span<const double> g) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.numel();
  auto A = a.data(), B = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
  return make_result({1}, {s / static_cast<double>(n)}, {a, b}, [a, b, n](auto, std::span<const double> g) {
    auto A = a.data(), B = b.data();
    const double c = 2.0 * g[0] / static_cast<double>(n);
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      for (std::size_t i = 0; i < n; ++i) ga[i] += c * (A[i] - B[i]);
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      for (std::size_t i = 0; i < n; ++i) gb[i] -= c * (A[i] - B[i]);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_matrix(logits, "cross_entropy");
  require_finite(logits.data(), "cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(m) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  auto Z = logits.data();
  std::vector<double> probs(m * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &Z[i * c];
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[i]];
  }
  std::vector<int> y(labels.begin(), labels.end());
  return make_result({1}, {loss / static_cast<double>(m)}, {logits},
                     [logits, probs = std::move(probs), y = std::move(y), m, c](auto, std::span<const double> g) {
                       auto gz = grad_of(logits);
                       const double s = g[0] / static_cast<double>(m);
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += s * probs[i * c + j];
                         gz[i * c + static_cast<std::size_t>(y[i])] -= s;
                       }
                     });
}

Tensor detach(const Tensor& x) {
  return Tensor::from_data(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), false);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || (bias.defined() && bias.numel() != n)) {
    throw ShapeError("layer_norm: parameter width does not match " + shape_str(x.shape()));
  }
  auto X = x.data(), G = gain.data();
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (X[i * n + j] - mu) * (X[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (X[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * G[j] + (bias.defined() ? bias.data()[j] : 0.0);
    }
  }
  std::vector<Tensor> inputs{x, gain};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      x.shape(), std::move(out), std::move(inputs),
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](auto, std::span<const double> g) {
        auto G = gain.data();
        if (gain.requires_grad()) {
          auto gg = grad_of(gain);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (bias.defined() && bias.requires_grad()) {
          auto gb = grad_of(bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (x.requires_grad()) {
          auto gx = grad_of(x);
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[i * n + j] * G[j];
              s1 += dxh;
              s2 += dxh * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dxh = g[i * n + j] * G[j];
              gx[i * n + j] += inv_std[i] * (dxh - s1 / dn - xhat[i * n + j] * s2 / dn);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must be in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& v : mask) v = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return multiply(x, Tensor::from_data(x.shape(), std::move(mask)));
}

}  // namespace nanonet
