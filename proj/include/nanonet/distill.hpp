#pragma once

// Offline teacher -> student distillation: students are built from a subset
// of teacher layers and trained against the teacher's attention maps, hidden
// states and logits. Teacher-side tensors are always detached.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "nanonet/encoder.hpp"

namespace nanonet {

struct LayerSelection {
  std::vector<std::size_t> teacher_indices;
  std::string policy_name;
};

// Learnable map from student width to teacher width: H_T ≈ H_S · W_h.
struct HiddenProjection {
  Param weight;

  // Identity when the widths agree, small random values otherwise.
  static HiddenProjection create(std::size_t d_student, std::size_t d_teacher, std::uint64_t seed);
};

enum class AttentionDistance { mse, kl };

struct DistillConfig {
  double temperature = 1.0;
  double attn_weight = 1.0;
  double hidden_weight = 1.0;
  double logit_weight = 1.0;
  AttentionDistance attn_distance = AttentionDistance::mse;

  void validate() const;
};

// Named policies (BERT-A6 … MBERT-B4) or an explicit list such as "0,2,3".
LayerSelection select_layers(std::string_view policy, const EncoderConfig& teacher_config);

// Student layer i is a deep copy of teacher layer sel[i], attention kind and
// RoPE theta included.
Encoder init_student(const Encoder& teacher, const LayerSelection& selection);

Tensor loss_attn(const ForwardTrace& teacher, const ForwardTrace& student, const LayerSelection& selection,
                 const DistillConfig& config = {});

Tensor loss_hidden(const ForwardTrace& teacher, const ForwardTrace& student, const LayerSelection& selection,
                   const HiddenProjection& projection);

// MSE(z_T, z_S / t); only the student side is divided.
Tensor loss_logit(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

}  // namespace nanonet
