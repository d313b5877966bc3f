#include "nanonet/cotrain.hpp"

#include <algorithm>
#include <cmath>

#include "nanonet/error.hpp"
#include "nanonet/peft.hpp"

namespace nanonet {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t dropout_seed(std::uint64_t noise_seed, std::size_t step, std::uint64_t phase) {
  return mix(mix(noise_seed) ^ mix(static_cast<std::uint64_t>(step) * 4 + phase));
}

Tensor accumulate(const Tensor& total, const Tensor& term) { return total.defined() ? add(total, term) : term; }

}  // namespace

double LossBreakdown::composed(const DistillConfig& w) const {
  double t = ce_teacher;
  for (double ce : ce_student) t += ce;
  for (std::size_t k = 0; k < kd_per_student.size(); ++k) {
    const auto& kd = kd_per_student[k];
    t += w.attn_weight * kd.attn + w.hidden_weight * kd.hidden + w.logit_weight * kd.logit + mu * lambda * dml_per_student[k];
  }
  return t;
}

Tensor loss_dml(const Tensor& z_self, const Tensor& z_peer) {
  if (z_self.shape() != z_peer.shape()) {
    throw ShapeError("loss_dml: " + shape_str(z_self.shape()) + " vs " + shape_str(z_peer.shape()));
  }
  return mse(z_self, detach(z_peer));
}

Tensor loss_cohort(const Tensor& z_k, const std::vector<Tensor>& z_others) {
  if (z_others.empty()) throw ConfigError("loss_cohort needs at least one peer");
  Tensor total;
  for (const auto& z : z_others) total = accumulate(total, loss_dml(z_k, z));
  return z_others.size() == 1 ? total : scale(total, 1.0 / static_cast<double>(z_others.size()));
}

double mu_ramp(const ScheduleState& state) {
  if (state.total_steps == 0) throw ConfigError("mu_ramp: total_steps must be positive");
  const double ramp = state.mu_ramp_fraction * static_cast<double>(state.total_steps);
  if (ramp <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(state.step) / ramp);
}

std::vector<Tensor> trainable_tensors(Encoder* teacher, std::vector<Student>& students, const CotrainConfig& config) {
  std::vector<Tensor> out;
  auto take = [&](Encoder& m) {
    for (Param* p : m.params())
      if (p->trainable()) out.push_back(p->value);
  };
  if (teacher && config.teacher_finetune) take(*teacher);
  for (auto& s : students) {
    take(s.model);
    if (s.projection.weight.trainable()) out.push_back(s.projection.weight.value);
  }
  return out;
}

LossBreakdown train_step(Encoder* teacher, std::vector<Student>& students, const SemiBatch& batch,
                         const ScheduleState& state, const CotrainConfig& config, Adam& optimizer) {
  if (students.empty()) throw ConfigError("train_step needs at least one student");
  if (!batch.labeled.labels) throw ValidationError("labeled batch carries no labels");
  config.distill.validate();
  const auto& w = config.distill;
  const std::size_t k_students = students.size();

  LossBreakdown br;
  br.ce_student.assign(k_students, 0.0);
  br.kd_per_student.assign(k_students, {});
  br.dml_per_student.assign(k_students, 0.0);
  br.lambda = state.lambda;
  br.mu = state.total_steps > 0 ? mu_ramp(state) : 0.0;
  ScheduleState next = state;
  next.step = state.step + 1;
  br.lr = lr_schedule(next, config.regime);

  Tensor total;
  const auto& labels = *batch.labeled.labels;

  if (teacher && config.teacher_finetune) {
    auto tr = forward(*teacher, batch.labeled, {true, dropout_seed(0x7eac4e5ULL, state.step, 0)});
    Tensor ce = cross_entropy(tr.logits, labels);
    br.ce_teacher = ce.item();
    total = accumulate(total, ce);
  }
  for (std::size_t k = 0; k < k_students; ++k) {
    auto tr = forward(students[k].model, batch.labeled, {true, dropout_seed(students[k].noise_seed, state.step, 0)});
    Tensor ce = cross_entropy(tr.logits, labels);
    br.ce_student[k] = ce.item();
    total = accumulate(total, ce);
  }

  const bool kd_on = teacher && (w.attn_weight > 0.0 || w.hidden_weight > 0.0 || w.logit_weight > 0.0);
  const double con_weight = br.mu * br.lambda;
  const bool con_on = k_students >= 2 && con_weight > 0.0;
  if ((kd_on || con_on) && batch.unlabeled.n_sequences() > 0) {
    std::vector<ForwardTrace> traces;
    for (std::size_t k = 0; k < k_students; ++k) {
      traces.push_back(
          forward(students[k].model, batch.unlabeled, {true, dropout_seed(students[k].noise_seed, state.step, 1)}));
    }
    std::optional<ForwardTrace> target;
    if (kd_on) target = forward(*teacher, batch.unlabeled, {false, 0});
    for (std::size_t k = 0; k < k_students; ++k) {
      if (kd_on) {
        auto& s = students[k];
        Tensor attn = loss_attn(*target, traces[k], s.selection, w);
        Tensor hidden = loss_hidden(*target, traces[k], s.selection, s.projection);
        Tensor logit = loss_logit(target->logits, traces[k].logits, w.temperature);
        br.kd_per_student[k] = {attn.item(), hidden.item(), logit.item()};
        if (w.attn_weight > 0.0) total = accumulate(total, scale(attn, w.attn_weight));
        if (w.hidden_weight > 0.0) total = accumulate(total, scale(hidden, w.hidden_weight));
        if (w.logit_weight > 0.0) total = accumulate(total, scale(logit, w.logit_weight));
      }
      if (k_students >= 2) {
        std::vector<Tensor> peers;
        for (std::size_t i = 0; i < k_students; ++i)
          if (i != k) peers.push_back(traces[i].logits);
        Tensor con = loss_cohort(traces[k].logits, peers);
        br.dml_per_student[k] = con.item();
        if (con_on) total = accumulate(total, scale(con, con_weight));
      }
    }
  }

  br.total = total.item();
  if (!std::isfinite(br.total)) {
    throw NumericError("non-finite training loss at step " + std::to_string(state.step));
  }
  total.backward();
  optimizer.step(br.lr);
  optimizer.zero_grad();
  return br;
}

}  // namespace nanonet
