#pragma once

#include <vector>

#include "nanonet/schedule.hpp"
#include "nanonet/tensor.hpp"

namespace nanonet {

// Adam / decoupled AdamW. Only tensors that require grad at construction are
// bound, and moment buffers exist for exactly those.
class Adam {
 public:
  Adam(const std::vector<Tensor>& params, const RegimeSettings& settings);

  void step(double lr);
  void zero_grad();

  std::size_t bound_tensors() const { return params_.size(); }
  std::size_t moment_buffers() const { return m_.size() + v_.size(); }
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  RegimeSettings settings_;
  std::size_t t_ = 0;
};

}  // namespace nanonet
