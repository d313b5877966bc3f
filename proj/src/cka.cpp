#include <cmath>
#include <fstream>
#include <iostream>

#include "nanonet/error.hpp"
#include "nanonet/harness.hpp"

namespace nanonet {

namespace {

std::vector<double> centered(const Tensor& t) {
  const std::size_t n = t.rows(), p = t.cols();
  std::vector<double> out(t.data().begin(), t.data().end());
  for (std::size_t j = 0; j < p; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += out[i * p + j];
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i * p + j] -= mu;
  }
  return out;
}

// ||Aᵀ B||_F² for A [n×p], B [n×q].
double cross_frobenius_sq(const std::vector<double>& a, std::size_t p, const std::vector<double>& b, std::size_t q,
                          std::size_t n) {
  double total = 0.0;
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < q; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += a[i * p + r] * b[i * q + c];
      total += s * s;
    }
  }
  return total;
}

std::vector<Tensor> cls_states(const Encoder& model, const std::vector<std::vector<int>>& seqs) {
  const std::size_t layers = model.config().n_layers + 1, d = model.config().d_model;
  std::vector<std::vector<double>> rows(layers);
  for (std::size_t b = 0; b < seqs.size(); b += 32) {
    const std::size_t e = std::min(seqs.size(), b + 32);
    std::vector<std::vector<int>> chunk(seqs.begin() + static_cast<std::ptrdiff_t>(b),
                                        seqs.begin() + static_cast<std::ptrdiff_t>(e));
    const auto trace = forward(model, pack_sequences(chunk), {false, 0});
    for (std::size_t l = 0; l < layers; ++l) {
      const Tensor cls = trace.cls_hidden(l);
      rows[l].insert(rows[l].end(), cls.data().begin(), cls.data().end());
    }
  }
  std::vector<Tensor> out;
  for (auto& r : rows) out.push_back(Tensor::from_data({seqs.size(), d}, std::move(r)));
  return out;
}

}  // namespace

double linear_cka(const Tensor& x, const Tensor& y) {
  if (x.dim() != 2 || y.dim() != 2 || x.rows() != y.rows()) {
    throw ShapeError("linear_cka: " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " need equal row counts");
  }
  const std::size_t n = x.rows(), p = x.cols(), q = y.cols();
  if (n < 2) throw ConfigError("linear_cka needs at least two samples");
  const auto xc = centered(x), yc = centered(y);
  const double xy = cross_frobenius_sq(xc, p, yc, q, n);
  const double xx = std::sqrt(cross_frobenius_sq(xc, p, xc, p, n));
  const double yy = std::sqrt(cross_frobenius_sq(yc, q, yc, q, n));
  if (xx == 0.0 || yy == 0.0) {
    std::cerr << "warning: linear_cka on a zero-variance input is defined as 0\n";
    return 0.0;
  }
  return std::min(1.0, xy / (xx * yy));
}

CKAMatrix cka_heatmap(const Encoder& teacher, const Encoder& student, const Corpus& probe, std::size_t n_samples,
                      std::size_t max_len) {
  if (n_samples < 2) throw ConfigError("cka_heatmap needs at least two probe samples");
  if (probe.size() < n_samples) {
    throw ConfigError("probe corpus has " + std::to_string(probe.size()) + " examples, " + std::to_string(n_samples) +
                      " requested");
  }
  Corpus head = probe;
  head.examples.resize(n_samples);
  const auto seqs = tokenize_corpus(head, max_len);
  const auto t_states = cls_states(teacher, seqs);
  const auto s_states = cls_states(student, seqs);
  CKAMatrix m;
  for (const auto& t : t_states) {
    auto& row = m.values.emplace_back();
    for (const auto& s : s_states) row.push_back(linear_cka(t, s));
  }
  return m;
}

void write_cka_csv(const CKAMatrix& matrix, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "teacher_layer";
  const std::size_t cols = matrix.values.empty() ? 0 : matrix.values.front().size();
  for (std::size_t j = 0; j < cols; ++j) out << ',' << j;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < matrix.values.size(); ++i) {
    out << i;
    for (double v : matrix.values[i]) out << ',' << v;
    out << '\n';
  }
}

}  // namespace nanonet
