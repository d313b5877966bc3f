#pragma once

// Semi-supervised objective: supervised CE on the labeled stream, offline
// distillation plus peer consistency on the unlabeled stream.
//
//   total = [CE_T] + Σ_k CE_k + Σ_k (w_a·attn_k + w_h·hidden_k + w_l·logit_k + μ·λ·con_k)
//
// CE_T only appears when the teacher is fine-tuned alongside the students.

#include <cstdint>
#include <vector>

#include "nanonet/distill.hpp"
#include "nanonet/encoder.hpp"
#include "nanonet/optim.hpp"
#include "nanonet/schedule.hpp"

namespace nanonet {

struct SemiBatch {
  PackedBatch labeled;
  PackedBatch unlabeled;
};

struct Student {
  Encoder model;
  LayerSelection selection;
  HiddenProjection projection;
  // Seeds this student's dropout masks; students with equal seeds see equal masks.
  std::uint64_t noise_seed = 0;
};

struct CotrainConfig {
  DistillConfig distill;
  bool teacher_finetune = false;
  RegimeSettings regime;
};

struct KdParts {
  double attn = 0.0;
  double hidden = 0.0;
  double logit = 0.0;
};

struct LossBreakdown {
  double ce_teacher = 0.0;
  std::vector<double> ce_student;
  std::vector<KdParts> kd_per_student;
  std::vector<double> dml_per_student;
  double mu = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  double total = 0.0;

  // Recomputes the objective from the parts.
  double composed(const DistillConfig& weights) const;
};

// MSE(z_self, detach(z_peer)).
Tensor loss_dml(const Tensor& z_self, const Tensor& z_peer);
// Mean over peers of loss_dml(z_k, z_i).
Tensor loss_cohort(const Tensor& z_k, const std::vector<Tensor>& z_others);

// min(1, step / (mu_ramp_fraction · total_steps)).
double mu_ramp(const ScheduleState& state);

// Every tensor the optimizer should own: trainable student and projection
// parameters, plus the teacher's when it is fine-tuned.
std::vector<Tensor> trainable_tensors(Encoder* teacher, std::vector<Student>& students, const CotrainConfig& config);

// One optimizer step on the full objective; `teacher` may be null for plain
// supervised training. The update uses the learning rate at state.step + 1.
LossBreakdown train_step(Encoder* teacher, std::vector<Student>& students, const SemiBatch& batch,
                         const ScheduleState& state, const CotrainConfig& config, Adam& optimizer);

}  // namespace nanonet
