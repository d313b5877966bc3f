#pragma once

#include <memory>
#include <vector>

#include "nanonet/tensor.hpp"

namespace nanonet {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  autograd::BackwardFn backward;
};

}  // namespace detail

struct TensorAccess {
  static const std::shared_ptr<detail::Node>& node(const Tensor& t) { return t.node_; }
};

}  // namespace nanonet
