#include <algorithm>
#include <cmath>

#include "nanonet/error.hpp"
#include "nanonet/tensor.hpp"

namespace nanonet {

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps, double tolerance) {
  if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");
  if (!x.is_leaf()) throw Error("grad_check: x must be a leaf tensor");
  const bool restore_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();

  Tensor y = f(x);
  y.backward();
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  x.clear_grad();

  GradCheckReport report;
  report.per_element_errors.resize(analytic.size());
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + eps;
    const double up = f(x).item();
    values[i] = original - eps;
    const double down = f(x).item();
    values[i] = original;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    report.per_element_errors[i] = err;
    report.max_relative_error = std::max(report.max_relative_error, err);
  }
  report.passed = report.max_relative_error <= tolerance;
  x.set_requires_grad(restore_flag);
  return report;
}

}  // namespace nanonet
