#pragma once

// Selective fine-tuning: which parameters train (BitFit, frozen embeddings,
// explicit overrides), parameter census, and learning-rate schedules.

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nanonet/encoder.hpp"
#include "nanonet/schedule.hpp"

namespace nanonet {

struct ParamPolicy {
  // Freeze every weight- and embedding-role tensor; biases and head train.
  bool bitfit = false;
  bool freeze_embeddings = false;
  bool train_head = true;
  // Applied last, in order. Patterns are shell globs over parameter names.
  std::vector<std::pair<std::string, bool>> explicit_overrides;
};

// Sets requires_grad on every parameter per the policy. Returns the override
// patterns that matched nothing (each is also reported on stderr).
std::vector<std::string> apply_policy(const std::vector<Param*>& params, const ParamPolicy& policy);
std::vector<std::string> apply_policy(Encoder& model, const ParamPolicy& policy);

struct RoleCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
};

struct ParamReport {
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  double trainable_fraction = 0.0;
  std::map<ParamRole, RoleCount> per_role;
};

ParamReport count_params(const std::vector<const Param*>& params);
ParamReport count_params(const Encoder& model);

// Fixed-width table for terminals.
std::string format_param_report(const ParamReport& report);
// CSV with header role,total,trainable,fraction; one row per role plus "all".
void write_param_report_csv(const ParamReport& report, const std::filesystem::path& path);

// Linear warmup over warmup_fraction·total_steps to peak_lr, then linear
// decay reaching final_fraction·peak_lr at total_steps.
double lr_schedule(const ScheduleState& state, const RegimeSettings& regime);
double lr_schedule(const ScheduleState& state, Regime regime);

}  // namespace nanonet
