#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fcdn/errors.hpp"
#include "fcdn/tensor.hpp"

namespace fcdn {

// How the optimizer treats a parameter (weight decay hits conv weights only).
enum class ParamRole { conv_weight, bias, bn_scale, bn_shift };

// A trainable tensor with its gradient accumulator. Owned by a network; the
// graph only references it while recording a forward pass.
template <typename T>
struct Parameter {
  std::string name;
  ParamRole role = ParamRole::conv_weight;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string name_, ParamRole role_, Shape shape)
      : name(std::move(name_)), role(role_), value(shape), grad(shape) {}

  void zero_grad() { grad.fill(T{0}); }
};

// Handle to a value recorded in a Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

// Tape of a forward computation for reverse-mode differentiation.
//
// Nodes are appended in execution order; backward() walks them in exactly the
// reverse order. Gradients of interior nodes are recomputed from scratch on
// every backward() call, while leaves (tracked inputs and parameters)
// accumulate, so two backward passes without zeroing double a parameter's grad.
template <typename T>
class Graph {
 public:
  // Receives the gradient of the node's output and pushes contributions into
  // its inputs through Graph::accumulate.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var input(Tensor<T> value, bool requires_grad = false) {
    Node node;
    node.op = "input";
    node.value = std::move(value);
    node.requires_grad = requires_grad && grad_enabled_;
    node.leaf = true;
    return push(std::move(node));
  }

  Var param(Parameter<T>& p) {
    Node node;
    node.op = "param";
    node.param = &p;
    node.requires_grad = grad_enabled_;
    node.leaf = true;
    return push(std::move(node));
  }

  // Appends an op output. `fn` is dropped when no input needs a gradient.
  Var record(std::string op, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node node;
    node.op = std::move(op);
    node.value = std::move(value);
    for (Var v : inputs) {
      if (v.valid() && nodes_.at(v.id).requires_grad) node.requires_grad = true;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    return push(std::move(node));
  }

  const Tensor<T>& value(Var v) const {
    const Node& node = nodes_.at(v.id);
    return node.param ? node.param->value : node.value;
  }

  const Shape& shape(Var v) const { return value(v).shape(); }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of a node, allocated on first use. For parameters this is
  // the parameter's own accumulator.
  Tensor<T>& grad(Var v) {
    Node& node = nodes_.at(v.id);
    if (node.param) return node.param->grad;
    if (node.grad.empty()) node.grad = Tensor<T>(value(v).shape());
    return node.grad;
  }

  bool has_grad(Var v) const {
    const Node& node = nodes_.at(v.id);
    return node.param != nullptr || !node.grad.empty();
  }

  // grad(v) += g elementwise; no-op when v is untracked.
  void accumulate(Var v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    Tensor<T>& dst = grad(v);
    if (dst.shape() != g.shape()) {
      throw ShapeError("gradient shape " + g.shape().str() + " does not match value shape " +
                       dst.shape().str() + " for op '" + nodes_.at(v.id).op + "'");
    }
    T* d = dst.ptr();
    const T* s = g.ptr();
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) d[i] += s[i];
  }

  void backward(Var loss) {
    if (value(loss).numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + value(loss).shape().str());
    }
    last_backward_order_.clear();
    for (Node& node : nodes_) {
      if (!node.leaf) node.grad = Tensor<T>();
    }
    if (!requires_grad(loss)) return;
    grad(loss)[0] += T{1};
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& node = nodes_[i];
      if (node.leaf || !node.backward || node.grad.empty()) continue;
      last_backward_order_.push_back(i);
      // The node's grad is complete once every later node has run.
      node.backward(*this, node.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }

  // Node ids whose backward ran during the last backward(), in visit order.
  const std::vector<std::size_t>& last_backward_order() const noexcept {
    return last_backward_order_;
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> last_backward_order_;
};

}  // namespace fcdn
