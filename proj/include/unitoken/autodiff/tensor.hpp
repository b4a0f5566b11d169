#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unitoken/core/error.hpp"

namespace unitoken {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Shape = std::vector<Index>;

inline Index shape_rows(const Shape& shape) {
  if (shape.size() <= 1) return 1;
  return std::accumulate(shape.begin(), shape.end() - 1, Index{1}, std::multiplies<>());
}

inline Index shape_cols(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

/// Dense learnable tensor. Values live in a row-major matrix whose column count
/// is the last dim and whose row count is the product of the leading dims.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = true)
      : shape_(std::move(shape)),
        value_(Matrix<Scalar>::Zero(shape_rows(shape_), shape_cols(shape_))),
        requires_grad_(requires_grad) {
    for (Index d : shape_) {
      if (d <= 0) throw UsageError("tensor dims must be positive");
    }
    if (requires_grad_) grad_ = Matrix<Scalar>::Zero(value_.rows(), value_.cols());
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return value_.size(); }

  Matrix<Scalar>& value() { return value_; }
  const Matrix<Scalar>& value() const { return value_; }

  // Empty when requires_grad is false.
  Matrix<Scalar>& grad() { return grad_; }
  const Matrix<Scalar>& grad() const { return grad_; }
  bool has_grad() const { return grad_.size() == value_.size() && value_.size() > 0; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && !has_grad()) grad_ = Matrix<Scalar>::Zero(value_.rows(), value_.cols());
  }

  void zero_grad() {
    if (has_grad()) grad_.setZero();
  }

 private:
  Shape shape_;
  Matrix<Scalar> value_;
  Matrix<Scalar> grad_;
  bool requires_grad_ = true;
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward walks
/// them in reverse and accumulates into the `grad()` of every leaf tensor that
/// requires it. Calling backward twice without `Tensor::zero_grad` accumulates.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Matrix<Scalar> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, false, nullptr});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Leaf bound to a tensor; reused if the tensor was already bound.
  Var<Scalar> param(Tensor<Scalar>& t) {
    if (auto it = leaf_of_.find(&t); it != leaf_of_.end()) return Var<Scalar>(this, it->second);
    nodes_.push_back(Node{t.value(), {}, nullptr, t.requires_grad(), &t});
    const int id = static_cast<int>(nodes_.size()) - 1;
    leaf_of_.emplace(&t, id);
    return Var<Scalar>(this, id);
  }

  /// Records an op output. `fn` runs during backward only if some input needs
  /// a gradient.
  Var<Scalar> record(Matrix<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn fn) {
    return record(std::move(value), std::vector<Var<Scalar>>(inputs), std::move(fn));
  }

  Var<Scalar> record(Matrix<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                     BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.valid() && &in.tape() != this) throw UsageError("vars from different tapes");
      needs = needs || (in.valid() && nodes_[in.id()].needs_grad);
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : nullptr, needs, nullptr});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix<Scalar>& value(int id) const { return nodes_[id].value; }
  Matrix<Scalar>& grad(int id) { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool needs_grad(const Var<Scalar>& v) const { return nodes_[v.id()].needs_grad; }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Var<Scalar>& loss, Scalar seed = Scalar(1)) {
    if (!loss.valid() || &loss.tape() != this) throw UsageError("loss is not on this tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw UsageError("backward requires a scalar loss");
    for (auto& n : nodes_) {
      if (n.needs_grad) {
        n.grad.setZero(n.value.rows(), n.value.cols());
      } else {
        n.grad.resize(0, 0);
      }
    }
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad(0, 0) = seed;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward) n.backward(*this, id);
    }
    for (auto& n : nodes_) {
      if (n.param != nullptr && n.needs_grad) n.param->grad() += n.grad;
    }
  }

  void clear() {
    nodes_.clear();
    leaf_of_.clear();
  }

 private:
  struct Node {
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
    BackwardFn backward;
    bool needs_grad;
    Tensor<Scalar>* param;
  };

  std::deque<Node> nodes_;  // stable references: Var::value() outlives later records
  std::unordered_map<const Tensor<Scalar>*, int> leaf_of_;
};

/// A named set of tensors sharing one learning rate.
template <typename Scalar>
struct ParamGroup {
  std::string name;
  std::vector<std::pair<std::string, Tensor<Scalar>*>> params;
  double lr_scale = 1.0;

  void set_trainable(bool on) {
    for (auto& [_, t] : params) t->set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : params) t->zero_grad();
  }
};

}  // namespace unitoken
