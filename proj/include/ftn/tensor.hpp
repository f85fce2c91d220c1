#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ftn/errors.hpp"

namespace ftn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Row-major strides.
inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// ---------------------------------------------------------------------------
// Gradient recording switch. Thread-local, so independent tapes on separate
// threads never interfere.

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation. matmul/linear report their MAC counts
// to the active counter under the innermost active label.

class MacCounter {
 public:
  MacCounter() : prev_(current()) { current() = this; }
  ~MacCounter() { current() = prev_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t get(const std::string& label) const {
    auto it = counts_.find(label);
    return it == counts_.end() ? 0 : it->second;
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [_, v] : counts_) t += v;
    return t;
  }
  const std::map<std::string, std::uint64_t>& counts() const { return counts_; }

  static void record(std::uint64_t macs) {
    if (auto* c = current()) c->counts_[label_stack().empty() ? "other" : label_stack().back()] += macs;
  }

  static std::vector<std::string>& label_stack() {
    thread_local std::vector<std::string> stack;
    return stack;
  }

 private:
  static MacCounter*& current() {
    thread_local MacCounter* c = nullptr;
    return c;
  }
  MacCounter* prev_;
  std::map<std::string, std::uint64_t> counts_;
};

class MacLabel {
 public:
  explicit MacLabel(std::string label) { MacCounter::label_stack().push_back(std::move(label)); }
  ~MacLabel() { MacCounter::label_stack().pop_back(); }
  MacLabel(const MacLabel&) = delete;
  MacLabel& operator=(const MacLabel&) = delete;
};

// ---------------------------------------------------------------------------

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() : BasicTensor(Shape{}, std::vector<T>{T(0)}) {}

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (numel_of(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " holds " +
                           std::to_string(numel_of(shape)) + " values, got " +
                           std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static BasicTensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = numel_of(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, {value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Writable view; intended for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  std::vector<T> to_vector() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
    std::size_t off = 0, i = 0;
    for (auto v : idx) {
      if (v >= node_->shape[i]) throw DimensionError("index out of range for " + shape_str(shape()));
      off = off * node_->shape[i++] + v;
    }
    return node_->data[off];
  }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw UsageError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  BasicTensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return BasicTensor(shape(), node_->grad);
  }
  void zero_grad() { node_->grad.clear(); }

  // A new leaf sharing no history with this tensor.
  BasicTensor detach() const { return BasicTensor(shape(), node_->data); }

  bool same_node(const BasicTensor& o) const { return node_ == o.node_; }

  const NodePtr& node() const { return node_; }
  static BasicTensor from_node(NodePtr n) {
    BasicTensor t(nullptr);
    t.node_ = std::move(n);
    return t;
  }

 private:
  explicit BasicTensor(std::nullptr_t) {}
  NodePtr node_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NumericError(std::string("non-finite value produced by ") + op + " at element " +
                         std::to_string(i));
}

// Wraps freshly computed data as an op result, recording the backward rule
// when any input requires a gradient and recording is enabled.
template <class T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::vector<std::shared_ptr<Node<T>>> inputs,
                           std::function<void(Node<T>&)> backward) {
  check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = grad_enabled() &&
               std::any_of(inputs.begin(), inputs.end(),
                           [](const auto& n) { return n->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// The computation tape: the recorded operations reachable from a root, in
// topological order (inputs before consumers).

template <class T>
class ComputationTape {
 public:
  using NodeT = detail::Node<T>;

  static ComputationTape record_from(const BasicTensor<T>& root) {
    ComputationTape tape;
    std::unordered_set<const NodeT*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    NodeT* r = root.node().get();
    if (r->is_leaf()) return tape;
    stack.emplace_back(r, 0);
    visited.insert(r);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        NodeT* child = node->inputs[next++].get();
        if (!child->is_leaf() && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.ops_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return ops_.size(); }
  bool empty() const { return ops_.empty(); }
  std::span<NodeT* const> operations() const { return ops_; }

  bool is_topological() const {
    std::unordered_map<const NodeT*, std::size_t> pos;
    for (std::size_t i = 0; i < ops_.size(); ++i) pos[ops_[i]] = i;
    for (std::size_t i = 0; i < ops_.size(); ++i)
      for (const auto& in : ops_[i]->inputs) {
        auto it = pos.find(in.get());
        if (it != pos.end() && it->second >= i) return false;
      }
    return true;
  }

  // Runs every backward rule once, consumers first, then releases the
  // recorded history.
  void replay_backward() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      NodeT* node = *it;
      node->ensure_grad();
      for (auto& in : node->inputs)
        if (in->requires_grad) in->ensure_grad();
      node->backward(*node);
    }
    for (NodeT* node : ops_) {
      node->backward = nullptr;
      node->inputs.clear();
      node->grad.clear();
      node->consumed = true;
    }
    ops_.clear();
  }

 private:
  std::vector<NodeT*> ops_;
};

template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  auto& node = *loss.node();
  if (node.consumed) throw UsageError("backward(): tape already consumed");
  if (!node.requires_grad) throw UsageError("backward(): loss does not depend on any tensor requiring grad");
  if (node.is_leaf()) {
    node.ensure_grad();
    node.grad[0] += T(1);
    return;
  }
  auto tape = ComputationTape<T>::record_from(loss);
  node.ensure_grad();
  std::fill(node.grad.begin(), node.grad.end(), T(0));
  node.grad[0] = T(1);
  tape.replay_backward();
}

}  // namespace ftn
