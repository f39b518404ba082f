#pragma once

// Dense n-d arrays plus the operator tape that drives reverse-mode gradients.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "ovrn/common.hpp"

namespace ovrn {

using Shape = std::vector<Eigen::Index>;

inline Eigen::Index shape_size(const Shape& shape) {
  Eigen::Index n = 1;
  for (Eigen::Index d : shape) n *= d;
  return n;
}

template <typename Scalar>
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct TensorNode {
  Shape shape;
  Eigen::ArrayX<Scalar> value;
  Eigen::ArrayX<Scalar> grad;  // sized lazily, same length as value
  bool requires_grad = false;
};

// Shared handle to a tensor node. Copies alias the same storage, which is
// what the tape relies on to accumulate gradients in place.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<Scalar>>()) {
    validate_shape(shape);
    node_->shape = std::move(shape);
    node_->value = Eigen::ArrayX<Scalar>::Zero(shape_size(node_->shape));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.value().setConstant(v);
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<Scalar> data) {
    Tensor t(std::move(shape));
    if (static_cast<Eigen::Index>(data.size()) != t.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + seq_str(t.shape()));
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.value()[i] = data[static_cast<std::size_t>(i)];
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index size() const { return node_->value.size(); }

  Eigen::Index dim(int axis) const {
    if (axis < 0 || axis >= rank())
      throw DimensionError("axis " + std::to_string(axis) +
                           " out of range for shape " + seq_str(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
  }

  Eigen::ArrayX<Scalar>& value() { return node_->value; }
  const Eigen::ArrayX<Scalar>& value() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  Eigen::ArrayX<Scalar>& grad() {
    ensure_grad();
    return node_->grad;
  }
  const Eigen::ArrayX<Scalar>& grad() const {
    const_cast<Tensor*>(this)->ensure_grad();
    return node_->grad;
  }

  void ensure_grad() {
    if (!has_grad()) node_->grad = Eigen::ArrayX<Scalar>::Zero(size());
  }

  void zero_grad() {
    ensure_grad();
    node_->grad.setZero();
  }

  Scalar item() const {
    if (size() != 1)
      throw DimensionError("item() requires a scalar tensor, got shape " +
                           seq_str(shape()));
    return node_->value[0];
  }

  // Row-major matrix view over the flat storage.
  Eigen::Map<MatrixRM<Scalar>> mat(Eigen::Index rows, Eigen::Index cols) {
    check_view(rows, cols);
    return {node_->value.data(), rows, cols};
  }
  Eigen::Map<const MatrixRM<Scalar>> mat(Eigen::Index rows,
                                         Eigen::Index cols) const {
    check_view(rows, cols);
    return {node_->value.data(), rows, cols};
  }
  Eigen::Map<MatrixRM<Scalar>> grad_mat(Eigen::Index rows, Eigen::Index cols) {
    check_view(rows, cols);
    ensure_grad();
    return {node_->grad.data(), rows, cols};
  }

  // Identity of the underlying node; used by the tape to dedupe.
  const void* id() const { return node_.get(); }

 private:
  void check_view(Eigen::Index rows, Eigen::Index cols) const {
    if (rows * cols != size())
      throw DimensionError("matrix view " + std::to_string(rows) + "x" +
                           std::to_string(cols) + " does not cover tensor of " +
                           std::to_string(size()) + " elements");
  }

  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must be non-empty");
    for (Eigen::Index d : shape)
      if (d <= 0)
        throw DimensionError("tensor extents must be positive, got " +
                             seq_str(shape));
  }

  std::shared_ptr<TensorNode<Scalar>> node_;
};

// Execution-order record of applied operators. Replaying it in reverse is a
// reverse topological traversal of the recorded graph, so each step can push
// its output gradient into its inputs with plain accumulation.
template <typename Scalar>
class Tape {
 public:
  void record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
  }

  // Tensors whose gradients take part in the replay; zeroed before it runs.
  void track(const Tensor<Scalar>& t) { tracked_.push_back(t); }

  std::size_t size() const { return steps_.size(); }
  std::size_t replayed() const { return replayed_; }

  void backward(Tensor<Scalar>& loss) {
    if (loss.size() != 1)
      throw DimensionError("backward requires a scalar loss, got shape " +
                           seq_str(loss.shape()));
    for (auto& t : tracked_) t.zero_grad();
    loss.grad()[0] = Scalar(1);
    replayed_ = 0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      (*it)();
      ++replayed_;
    }
  }

  void clear() {
    steps_.clear();
    tracked_.clear();
    replayed_ = 0;
  }

 private:
  std::vector<std::function<void()>> steps_;
  std::vector<Tensor<Scalar>> tracked_;
  std::size_t replayed_ = 0;
};

}  // namespace ovrn
