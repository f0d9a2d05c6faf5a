// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/autograd.hpp"

#include "nilmformer/error.hpp"

namespace nilm {

Var Tape::constant(Tensor value) {
  auto& node = nodes_.emplace_back();
  node.owned = std::move(value);
  node.value = &node.owned;
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  auto& node = nodes_.emplace_back();
  node.value = &p.value;
  node.param = &p;
  node.requires_grad = true;
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, bool requires_grad, Backward backward) {
  auto& node = nodes_.emplace_back();
  node.owned = std::move(value);
  node.value = &node.owned;
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  auto& node = nodes_[id];
  if (node.param) return node.param->grad;
  if (node.grad.empty()) node.grad = Tensor(node.value->shape());
  return node.grad;
}

void Tape::backward(Var loss) {
  NILM_EXPECT(&loss.tape() == this, "loss belongs to a different tape");
  NILM_EXPECT(loss.value().size() == 1, "backward requires a scalar loss, got " + to_string(loss.shape()));
  if (!nodes_[loss.id()].requires_grad) return;
  grad(loss.id())[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(node.grad);
    node.grad = Tensor();  // fully propagated
  }
}

}  // namespace nilm
