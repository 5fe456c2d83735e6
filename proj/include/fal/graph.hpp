#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "fal/tensor.hpp"

namespace fal {

using NodeId = std::uint32_t;

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kAdd3,
  kMul,
  kScale,
  kMatMul,
  kMatMulNT,
  kAddBias,
  kLayerNorm,
  kGelu,
  kSplitHeads,
  kMergeHeads,
  kRepeatKv,
  kCausalAttention,
  kSliceLast,
  kConcatLast,
  kSliceRows,
  kEmbed,
  kCrossEntropy,
  kSum,
  kDot,
  kDropout,
  kFanout,
  kReduceSum,
};

const char* op_name(OpKind op);

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

  bool valid() const noexcept { return graph_ != nullptr; }
  Graph<T>& graph() const { return *graph_; }
  NodeId id() const noexcept { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return graph_->value(id_).shape(); }

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Append-only tape. Node inputs always have smaller ids than the node itself,
/// so reverse append order is a valid reverse topological order.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    if (!value.all_finite()) throw NumericalError("non-finite value in leaf tensor");
    return push(OpKind::kLeaf, {}, std::move(value), requires_grad, nullptr);
  }

  Var<T> constant(Tensor<T> value) {
    if (!value.all_finite()) throw NumericalError("non-finite value in constant tensor");
    return push(OpKind::kConstant, {}, std::move(value), false, nullptr);
  }

  // Appends an op node. requires_grad is inherited from the inputs.
  Var<T> record(OpKind op, std::vector<NodeId> inputs, Tensor<T> value, BackwardFn backward) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericalError(std::string("non-finite output from ") + op_name(op));
    }
    bool rg = false;
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw std::logic_error("graph input refers to a future node");
      rg = rg || nodes_[in].requires_grad;
    }
    return push(op, std::move(inputs), std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(NodeId id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient of the last backward() target w.r.t. node `id`; zeros when no path exists.
  Tensor<T> grad(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) return Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }
  Tensor<T> grad(Var<T> v) const { return grad(v.id()); }

  // Upstream gradient of a node during backward; nullptr when nothing flowed in.
  const Tensor<T>* upstream(NodeId id) const {
    const Node& n = nodes_[id];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  // Zero-initialized gradient buffer of an input, or nullptr if it takes no gradient.
  T* grad_ptr(NodeId id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad.data();
  }

  void set_check_finite(bool on) noexcept { check_finite_ = on; }

  void backward(Var<T> loss) {
    if (loss.valid() && &loss.graph() != this) throw std::invalid_argument("loss belongs to another graph");
    if (backward_done_) throw std::logic_error("backward() already ran on this graph");
    const Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + to_string(root.value.shape()));
    }
    backward_done_ = true;
    if (!root.requires_grad) return;
    nodes_[loss.id()].grad = Tensor<T>(root.value.shape(), T(1));
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.backward || n.grad.empty()) continue;
      ++backward_visits_;
      n.backward(*this, static_cast<NodeId>(k));
    }
  }

  std::size_t backward_visits() const noexcept { return backward_visits_; }

 private:
  struct Node {
    OpKind op;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Var<T> push(OpKind op, std::vector<NodeId> inputs, Tensor<T> value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), {}, rg, std::move(fn)});
    return Var<T>(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  bool backward_done_ = false;
  bool check_finite_ = true;
  std::size_t backward_visits_ = 0;
};

}  // namespace fal
