#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "slimconv/tensor.hpp"

namespace slimconv {

enum class Mode { Train, Eval };

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // single accumulation slot, allocated on first use
  bool requires_grad = false;
  const void* owner = nullptr;
  std::size_t position = 0;  // index on the owning tape (recorded ops only)
  std::function<void(const Tensor<T>&)> backward;

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    require_same_shape(g.shape(), value.shape(), "gradient accumulation");
    if (grad.empty() && !value.empty()) {
      grad = g;
      return;
    }
    for (std::size_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
  }
};

// Handle to a value produced on a tape.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<Node<T>> node_;
  friend class Tape<T>;
};

struct TapeOptions {
  int threads = 1;
  // When false nothing is recorded and no gradients can be requested; used
  // for inference and for cost-free forward passes inside gradient checks.
  bool record = true;
  // If set, every piecewise-linear op appends the branch it took per element
  // (ReLU sign, max-pool argmax) so a caller can tell whether two forward
  // passes were on the same linear piece.
  std::vector<std::size_t>* branch_log = nullptr;
};

// Records differentiable operations in execution order and replays their
// adjoints in exact reverse order. A tape is single-use: one backward pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>&)>;

  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int threads() const { return options_.threads; }
  bool recording() const { return options_.record; }
  std::vector<std::size_t>* branch_log() const { return options_.branch_log; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->owner = this;
    return Var<T>(std::move(n));
  }

  // A leaf whose gradient is collected by backward().
  Var<T> parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->owner = this;
    n->requires_grad = options_.record;
    if (n->requires_grad) leaves_.push_back(n);
    return Var<T>(std::move(n));
  }

  // Registers the output of an operation. `make_backward` is only invoked
  // when some input needs a gradient; it receives the output node so the
  // closure can read the upstream gradient.
  template <typename MakeBackward>
  Var<T> record(Tensor<T> value, std::initializer_list<const Var<T>*> inputs, MakeBackward&& make_backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->owner = this;
    bool needs = false;
    for (const Var<T>* in : inputs) {
      if (in->node_->owner != this) throw UsageError("tape: input belongs to another tape");
      needs = needs || in->requires_grad();
    }
    if (options_.record && needs) {
      n->requires_grad = true;
      n->position = nodes_.size();
      n->backward = make_backward();
      nodes_.push_back(n);
    }
    return Var<T>(std::move(n));
  }

  void backward(const Var<T>& root) {
    if (!root.valid() || root.value().numel() != 1) {
      throw UsageError("backward: implicit seed needs a scalar root; pass an explicit seed");
    }
    backward(root, Tensor<T>(root.shape(), T(1)));
  }

  void backward(const Var<T>& root, const Tensor<T>& seed) {
    if (!root.valid() || root.node_->owner != this) throw UsageError("backward: root is not on this tape");
    if (backward_done_) throw UsageError("backward: tape already consumed");
    if (nodes_.empty() || !root.requires_grad()) {
      throw UsageError("backward: nothing recorded (run a forward pass with parameters first)");
    }
    backward_done_ = true;
    root.node_->accumulate(seed);
    visited_.clear();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node<T>& n = *nodes_[i];
      if (n.grad.empty()) continue;
      visited_.push_back(n.position);
      n.backward(n.grad);
      // Intermediate gradients are no longer needed once propagated.
      if (&n != root.node_.get()) {
        n.grad = Tensor<T>();
        n.backward = nullptr;
      }
    }
  }

  // Gradient of a parameter; zeros if it did not influence the root.
  Tensor<T> grad(const Var<T>& v) const {
    if (!backward_done_) throw UsageError("grad: backward has not been run");
    if (!v.valid() || v.node_->owner != this) throw UsageError("grad: variable is not on this tape");
    if (!v.node_->requires_grad) throw UsageError("grad: variable does not require gradients");
    if (v.node_->grad.empty()) return Tensor<T>(v.shape());
    return v.node_->grad;
  }

  // Tape positions in the order the last backward pass visited them.
  const std::vector<std::size_t>& visit_order() const { return visited_; }

 private:
  TapeOptions options_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::vector<std::shared_ptr<Node<T>>> leaves_;
  std::vector<std::size_t> visited_;
  bool backward_done_ = false;
};

}  // namespace slimconv
