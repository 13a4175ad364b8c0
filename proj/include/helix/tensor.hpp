#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <vector>

#include "helix/errors.hpp"

namespace helix {

template <class S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace autograd {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_enabled_flag(); }

/// Scoped guard disabling tape construction (evaluation mode).
struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
}  // namespace autograd

/// One node of the reverse-mode tape. The tape is built per forward pass and
/// freed once the last Tensor handle referencing it goes away.
template <class S>
struct TapeNode {
  Shape shape;
  ArrX<S> value;
  ArrX<S> grad;  // zero-sized until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode<S>>> parents;
  std::function<void(TapeNode<S>&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrX<S>::Zero(value.size());
  }
  void clear_grad() { grad.resize(0); }
};

/// Dense n-dimensional tensor handle participating in a reverse-mode autodiff
/// graph. Copies are shallow (shared node), matching tape semantics: a tensor
/// value is immutable after creation except for gradient accumulation.
template <class S>
class TensorT {
 public:
  using Scalar = S;
  using NodePtr = std::shared_ptr<TapeNode<S>>;

  TensorT() = default;

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, S(0), requires_grad);
  }
  static TensorT ones(const Shape& shape, bool requires_grad = false) {
    return filled(shape, S(1), requires_grad);
  }
  static TensorT filled(const Shape& shape, S v, bool requires_grad = false) {
    TensorT t;
    t.node_ = std::make_shared<TapeNode<S>>();
    t.node_->shape = shape;
    t.node_->value = ArrX<S>::Constant(shape_numel(shape), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static TensorT from_data(const Shape& shape, const std::vector<S>& data,
                           bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("from_data: data length does not match shape " + shape_str(shape));
    TensorT t = zeros(shape, requires_grad);
    for (std::size_t i = 0; i < data.size(); ++i) t.node_->value[static_cast<long>(i)] = data[i];
    return t;
  }
  /// Fresh node wrapping the given raw value array.
  static TensorT from_array(const Shape& shape, ArrX<S> v, bool requires_grad = false) {
    if (v.size() != shape_numel(shape))
      throw DimensionError("from_array: size mismatch for shape " + shape_str(shape));
    TensorT t;
    t.node_ = std::make_shared<TapeNode<S>>();
    t.node_->shape = shape;
    t.node_->value = std::move(v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->value.size(); }

  ArrX<S>& values() { return node_->value; }
  const ArrX<S>& values() const { return node_->value; }
  ArrX<S>& grad() { return node_->grad; }
  const ArrX<S>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  S item() const {
    if (numel() != 1) throw PreconditionError("item: tensor is not scalar");
    return node_->value[0];
  }
  S at(std::int64_t flat) const { return node_->value[flat]; }

  NodePtr node() const { return node_; }

  /// Result node of an op: requires_grad if any parent does and the tape is
  /// enabled; parents/backward recorded only in that case.
  template <class Fn>
  static TensorT make_op(const Shape& shape, ArrX<S> value,
                         std::vector<NodePtr> parents, Fn&& backward) {
    TensorT t = from_array(shape, std::move(value));
    bool rg = false;
    if (autograd::grad_enabled())
      for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backward = std::forward<Fn>(backward);
    }
    return t;
  }

  /// Reverse-mode sweep from a scalar loss. Each requires_grad leaf reachable
  /// from the loss receives dLoss/dLeaf, accumulated additively over fan-out.
  void backward() const {
    if (numel() != 1) throw PreconditionError("backward: loss must be scalar");
    // Iterative topological order over the tape.
    std::vector<TapeNode<S>*> order;
    std::unordered_set<TapeNode<S>*> seen;
    std::vector<std::pair<TapeNode<S>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        TapeNode<S>* p = n->parents[i++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TapeNode<S>* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

  /// Row-major matrix view over a 2-D tensor's values.
  Eigen::Map<MatX<S>> mat() {
    if (rank() != 2) throw DimensionError("mat: tensor is not 2-D");
    return Eigen::Map<MatX<S>>(node_->value.data(), dim(0), dim(1));
  }
  Eigen::Map<const MatX<S>> mat() const {
    if (rank() != 2) throw DimensionError("mat: tensor is not 2-D");
    return Eigen::Map<const MatX<S>>(node_->value.data(), dim(0), dim(1));
  }

 private:
  NodePtr node_;
};

using Tensor = TensorT<double>;

}  // namespace helix
