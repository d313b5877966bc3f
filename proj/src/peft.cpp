#include "nanonet/peft.hpp"

#include <fnmatch.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "nanonet/error.hpp"

namespace nanonet {

std::vector<std::string> apply_policy(const std::vector<Param*>& params, const ParamPolicy& policy) {
  for (Param* p : params) {
    bool trainable = true;
    switch (p->role) {
      case ParamRole::weight: trainable = !policy.bitfit; break;
      case ParamRole::embedding: trainable = !policy.bitfit && !policy.freeze_embeddings; break;
      case ParamRole::bias: trainable = true; break;
      case ParamRole::head: trainable = policy.train_head; break;
    }
    p->value.set_requires_grad(trainable);
  }
  std::vector<std::string> unmatched;
  for (const auto& [pattern, trainable] : policy.explicit_overrides) {
    bool hit = false;
    for (Param* p : params) {
      if (fnmatch(pattern.c_str(), p->name.c_str(), 0) == 0) {
        p->value.set_requires_grad(trainable);
        hit = true;
      }
    }
    if (!hit) {
      std::cerr << "warning: parameter override '" << pattern << "' matched no parameters\n";
      unmatched.push_back(pattern);
    }
  }
  return unmatched;
}

std::vector<std::string> apply_policy(Encoder& model, const ParamPolicy& policy) {
  return apply_policy(model.params(), policy);
}

ParamReport count_params(const std::vector<const Param*>& params) {
  ParamReport r;
  for (auto role : {ParamRole::weight, ParamRole::bias, ParamRole::embedding, ParamRole::head}) r.per_role[role] = {};
  for (const Param* p : params) {
    const std::size_t n = p->value.numel();
    auto& rc = r.per_role[p->role];
    rc.total += n;
    r.total_params += n;
    if (p->trainable()) {
      rc.trainable += n;
      r.trainable_params += n;
    }
  }
  r.trainable_fraction = r.total_params ? static_cast<double>(r.trainable_params) / static_cast<double>(r.total_params) : 0.0;
  return r;
}

ParamReport count_params(const Encoder& model) { return count_params(model.params()); }

namespace {

double fraction(const RoleCount& c) {
  return c.total ? static_cast<double>(c.trainable) / static_cast<double>(c.total) : 0.0;
}

}  // namespace

std::string format_param_report(const ParamReport& report) {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof(line), "%-10s %12s %12s %10s\n", "role", "total", "trainable", "fraction");
  os << line;
  for (const auto& [role, c] : report.per_role) {
    std::snprintf(line, sizeof(line), "%-10s %12zu %12zu %10.6f\n", std::string(role_name(role)).c_str(), c.total,
                  c.trainable, fraction(c));
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-10s %12zu %12zu %10.6f\n", "all", report.total_params, report.trainable_params,
                report.trainable_fraction);
  os << line;
  return os.str();
}

void write_param_report_csv(const ParamReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "role,total,trainable,fraction\n";
  for (const auto& [role, c] : report.per_role) {
    out << role_name(role) << ',' << c.total << ',' << c.trainable << ',' << fraction(c) << '\n';
  }
  out << "all," << report.total_params << ',' << report.trainable_params << ',' << report.trainable_fraction << '\n';
}

double lr_schedule(const ScheduleState& state, const RegimeSettings& regime) {
  if (state.total_steps == 0) return 0.0;
  const double total = static_cast<double>(state.total_steps);
  const double step = static_cast<double>(std::min(state.step, state.total_steps));
  const double warm = regime.warmup_fraction * total;
  if (step < warm) return regime.peak_lr * step / warm;
  if (total <= warm) return regime.peak_lr;
  const double progress = (step - warm) / (total - warm);
  return regime.peak_lr * (1.0 - (1.0 - regime.final_fraction) * progress);
}

double lr_schedule(const ScheduleState& state, Regime regime) { return lr_schedule(state, regime_settings(regime)); }

}  // namespace nanonet
