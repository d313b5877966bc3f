#include <cmath>
#include <limits>

#include "nanonet/encoder.hpp"
#include "nanonet/error.hpp"

namespace nanonet {

using autograd::grad_of;
using autograd::make_result;

Tensor build_mask(const PackedBatch& batch, const AttentionKind& kind) {
  batch.validate();
  const std::size_t t = batch.total_tokens();
  std::vector<double> mask(t * t, -std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
    const std::size_t b = batch.seq_begin(s), e = b + batch.seq_len(s);
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t j = b; j < e; ++j)
        if (kind.allows(batch.positions[i], batch.positions[j])) mask[i * t + j] = 0.0;
  }
  return Tensor::from_data({t, t}, std::move(mask));
}

Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double theta, std::size_t head_dim) {
  if (x.dim() != 2) throw ShapeError("rope_apply: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t t = x.rows(), d = x.cols();
  if (head_dim == 0) head_dim = d;
  if (head_dim % 2 != 0) throw ConfigError("rope_apply: head dimension must be even, got " + std::to_string(head_dim));
  if (d % head_dim != 0) throw ShapeError("rope_apply: width " + std::to_string(d) + " is not a multiple of head dimension");
  if (positions.size() != t) throw ShapeError("rope_apply: one position per row required");
  if (theta <= 0.0) throw ConfigError("rope_apply: theta must be positive");

  const std::size_t half = head_dim / 2;
  std::vector<double> cos_t(t * half), sin_t(t * half);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(positions[r]) * inv_freq;
      cos_t[r * half + i] = std::cos(angle);
      sin_t[r * half + i] = std::sin(angle);
    }
  }
  auto X = x.data();
  std::vector<double> out(t * d);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t g = 0; g < d; g += head_dim) {
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cos_t[r * half + i], s = sin_t[r * half + i];
        const double x0 = X[r * d + g + 2 * i], x1 = X[r * d + g + 2 * i + 1];
        out[r * d + g + 2 * i] = x0 * c - x1 * s;
        out[r * d + g + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x},
                     [x, cos_t = std::move(cos_t), sin_t = std::move(sin_t), t, d, head_dim, half](
                         auto, std::span<const double> g) {
                       auto gx = grad_of(x);
                       for (std::size_t r = 0; r < t; ++r) {
                         for (std::size_t o = 0; o < d; o += head_dim) {
                           for (std::size_t i = 0; i < half; ++i) {
                             const double c = cos_t[r * half + i], s = sin_t[r * half + i];
                             const double g0 = g[r * d + o + 2 * i], g1 = g[r * d + o + 2 * i + 1];
                             gx[r * d + o + 2 * i] += g0 * c + g1 * s;
                             gx[r * d + o + 2 * i + 1] += -g0 * s + g1 * c;
                           }
                         }
                       }
                     });
}

Tensor attention_probs(const Tensor& q, const Tensor& k, const PackedBatch& batch, const AttentionKind& kind,
                       std::size_t n_heads) {
  if (q.shape() != k.shape() || q.dim() != 2) {
    throw ShapeError("attention_probs: q " + shape_str(q.shape()) + " and k " + shape_str(k.shape()) + " must match");
  }
  const std::size_t t = q.rows(), d = q.cols();
  if (t != batch.total_tokens()) throw ShapeError("attention_probs: row count does not match the batch");
  if (n_heads == 0 || d % n_heads != 0) throw ConfigError("attention_probs: width not divisible by head count");
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto offsets = batch.block_offsets();
  const std::size_t per_head = offsets.back();

  auto Q = q.data(), K = k.data();
  std::vector<double> probs(n_heads * per_head, 0.0);
  std::vector<double> scores;
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
      const std::size_t b = batch.seq_begin(s), len = batch.seq_len(s);
      double* block = &probs[h * per_head + offsets[s]];
      scores.assign(len, 0.0);
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = &Q[(b + i) * d + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          if (!kind.allows(batch.positions[b + i], batch.positions[b + j])) {
            scores[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          const double* kj = &K[(b + j) * d + h * dh];
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * scale;
          if (std::isnan(scores[j])) throw NumericError("attention_probs: NaN attention score");
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const double e = std::isinf(scores[j]) && scores[j] < 0 ? 0.0 : std::exp(scores[j] - mx);
          block[i * len + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j < len; ++j) block[i * len + j] /= z;
      }
    }
  }

  return make_result(
      {n_heads, per_head}, std::move(probs), {q, k},
      [q, k, batch, offsets, n_heads, d, dh, scale, per_head](std::span<const double> p, std::span<const double> g) {
        auto Q = q.data(), K = k.data();
        std::span<double> gq, gk;
        if (q.requires_grad()) gq = grad_of(q);
        if (k.requires_grad()) gk = grad_of(k);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
            const std::size_t b = batch.seq_begin(s), len = batch.seq_len(s);
            const double* pb = &p[h * per_head + offsets[s]];
            const double* gb = &g[h * per_head + offsets[s]];
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) dot += gb[i * len + j] * pb[i * len + j];
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = pb[i * len + j] * (gb[i * len + j] - dot) * scale;
                if (ds == 0.0) continue;
                const std::size_t qi = (b + i) * d + h * dh, kj = (b + j) * d + h * dh;
                if (!gq.empty())
                  for (std::size_t c = 0; c < dh; ++c) gq[qi + c] += ds * K[kj + c];
                if (!gk.empty())
                  for (std::size_t c = 0; c < dh; ++c) gk[kj + c] += ds * Q[qi + c];
              }
            }
          }
        }
      });
}

Tensor attention_context(const Tensor& probs, const Tensor& v, const PackedBatch& batch, std::size_t n_heads) {
  if (v.dim() != 2 || v.rows() != batch.total_tokens()) {
    throw ShapeError("attention_context: values " + shape_str(v.shape()) + " do not match the batch");
  }
  const std::size_t t = v.rows(), d = v.cols();
  if (n_heads == 0 || d % n_heads != 0) throw ConfigError("attention_context: width not divisible by head count");
  const std::size_t dh = d / n_heads;
  const auto offsets = batch.block_offsets();
  const std::size_t per_head = offsets.back();
  if (probs.shape() != Shape{n_heads, per_head}) {
    throw ShapeError("attention_context: probabilities " + shape_str(probs.shape()) + " do not match the batch");
  }
  auto P = probs.data(), V = v.data();
  std::vector<double> out(t * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
      const std::size_t b = batch.seq_begin(s), len = batch.seq_len(s);
      const double* pb = &P[h * per_head + offsets[s]];
      for (std::size_t i = 0; i < len; ++i) {
        double* o = &out[(b + i) * d + h * dh];
        for (std::size_t j = 0; j < len; ++j) {
          const double pij = pb[i * len + j];
          if (pij == 0.0) continue;
          const double* vj = &V[(b + j) * d + h * dh];
          for (std::size_t c = 0; c < dh; ++c) o[c] += pij * vj[c];
        }
      }
    }
  }
  return make_result(
      {t, d}, std::move(out), {probs, v},
      [probs, v, batch, offsets, n_heads, d, dh, per_head](auto, std::span<const double> g) {
        auto P = probs.data(), V = v.data();
        std::span<double> gp, gv;
        if (probs.requires_grad()) gp = grad_of(probs);
        if (v.requires_grad()) gv = grad_of(v);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
            const std::size_t b = batch.seq_begin(s), len = batch.seq_len(s);
            const std::size_t off = h * per_head + offsets[s];
            for (std::size_t i = 0; i < len; ++i) {
              const double* gi = &g[(b + i) * d + h * dh];
              for (std::size_t j = 0; j < len; ++j) {
                const std::size_t vj = (b + j) * d + h * dh;
                if (!gp.empty()) {
                  double dot = 0.0;
                  for (std::size_t c = 0; c < dh; ++c) dot += gi[c] * V[vj + c];
                  gp[off + i * len + j] += dot;
                }
                if (!gv.empty()) {
                  const double pij = P[off + i * len + j];
                  if (pij == 0.0) continue;
                  for (std::size_t c = 0; c < dh; ++c) gv[vj + c] += pij * gi[c];
                }
              }
            }
          }
        }
      });
}

Tensor expand_attention(const Tensor& probs, const PackedBatch& batch, std::size_t head) {
  const auto offsets = batch.block_offsets();
  const std::size_t per_head = offsets.back();
  if (probs.dim() != 2 || probs.cols() != per_head || head >= probs.rows()) {
    throw ShapeError("expand_attention: map " + shape_str(probs.shape()) + " does not match the batch");
  }
  const std::size_t t = batch.total_tokens();
  std::vector<double> dense(t * t, 0.0);
  auto P = probs.data();
  for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
    const std::size_t b = batch.seq_begin(s), len = batch.seq_len(s);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j)
        dense[(b + i) * t + b + j] = P[head * per_head + offsets[s] + i * len + j];
  }
  return Tensor::from_data({t, t}, std::move(dense));
}

}  // namespace nanonet
