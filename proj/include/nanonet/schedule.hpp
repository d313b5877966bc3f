#pragma once

#include <cstddef>
#include <string_view>

namespace nanonet {

struct ScheduleState {
  std::size_t step = 0;
  std::size_t total_steps = 0;
  double warmup_fraction = 0.2;
  // Consistency weight; scaled by mu_ramp().
  double lambda = 1.0;
  double mu_ramp_fraction = 0.2;
};

enum class Regime { bert, mbert };

// Optimizer and learning-rate settings of one training regime.
struct RegimeSettings {
  double peak_lr = 5e-4;
  double warmup_fraction = 0.2;
  // Learning rate at the final step, as a fraction of peak_lr.
  double final_fraction = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled_weight_decay = false;
};

// bert:  Adam, peak 5e-4, 20% warmup, linear decay to 0.
// mbert: decoupled AdamW, peak 1e-3, β2 0.98, eps 1e-6, wd 1e-6, 6% warmup,
//        linear decay to 2% of peak.
RegimeSettings regime_settings(Regime regime);
Regime parse_regime(std::string_view name);

}  // namespace nanonet
