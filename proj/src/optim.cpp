#include "nanonet/optim.hpp"

#include <cmath>

#include "nanonet/error.hpp"

namespace nanonet {

RegimeSettings regime_settings(Regime regime) {
  RegimeSettings s;
  if (regime == Regime::mbert) {
    s.peak_lr = 1e-3;
    s.warmup_fraction = 0.06;
    s.final_fraction = 0.02;
    s.beta2 = 0.98;
    s.eps = 1e-6;
    s.weight_decay = 1e-6;
    s.decoupled_weight_decay = true;
  }
  return s;
}

Regime parse_regime(std::string_view name) {
  if (name == "bert") return Regime::bert;
  if (name == "mbert") return Regime::mbert;
  throw ConfigError("unknown optimizer regime '" + std::string(name) + "' (expected bert or mbert)");
}

Adam::Adam(const std::vector<Tensor>& params, const RegimeSettings& settings) : settings_(settings) {
  for (const auto& p : params) {
    if (!p.requires_grad()) continue;
    params_.push_back(p);
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g[i];
      if (!settings_.decoupled_weight_decay && settings_.weight_decay > 0.0) gi += settings_.weight_decay * w[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + settings_.eps);
      if (settings_.decoupled_weight_decay) w[i] -= lr * settings_.weight_decay * w[i];
      w[i] -= lr * update;
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.clear_grad();
}

}  // namespace nanonet
