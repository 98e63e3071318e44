#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "roundfit/errors.hpp"

namespace roundfit {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename T>
using Buffer = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

/// Dense row-major array with an optional link to the tape that produced it.
///
/// Storage is shared and never mutated after construction, so copies are
/// cheap and a tensor captured by a backward closure stays valid. A tensor
/// is "tracked" when it is a node on a live tape; untracked tensors are
/// constants with respect to differentiation.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() : data_(std::make_shared<const Buffer<T>>()) {}
  Tensor(Shape shape, Buffer<T> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::initializer_list<T> values);
  static Tensor scalar(T value) { return full({}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index numel() const { return data_->size(); }
  /// Extent of dimension `axis`; negative values count from the back.
  Index dim(int axis) const;

  const Buffer<T>& array() const { return *data_; }
  std::span<const T> values() const { return {data_->data(), static_cast<std::size_t>(data_->size())}; }
  const T* data() const { return data_->data(); }
  T operator[](Index i) const { return (*data_)(i); }

  /// Row-major matrix view with the trailing dimension as columns.
  Eigen::Map<const RowMatrix<T>> matrix() const;

  /// Value of a single-element tensor.
  T item() const;

  bool tracked() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::int32_t node() const { return node_; }

  /// Same values and shape, detached from any tape.
  Tensor detach() const { return Tensor(shape_, data_); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, data_->template cast<U>());
  }

 private:
  Tensor(Shape shape, std::shared_ptr<const Buffer<T>> data) : shape_(std::move(shape)), data_(std::move(data)) {}

  Shape shape_;
  std::shared_ptr<const Buffer<T>> data_;
  Tape<T>* tape_ = nullptr;
  std::int32_t node_ = -1;

  friend class Tape<T>;
};

/// Receives gradient contributions while a tape runs backward.
template <typename T>
class GradSink {
 public:
  virtual ~GradSink() = default;
  /// Adds `grad` to the gradient of `node`; node < 0 means "not tracked" and is ignored.
  virtual void accumulate(std::int32_t node, const Buffer<T>& grad) = 0;
};

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// One tape belongs to one computation: record ops by evaluating them on
/// tracked tensors, call backward() once, then read leaf gradients. The tape
/// must outlive every tensor recorded on it.
template <typename T>
class Tape : private GradSink<T> {
 public:
  using Backward = std::function<void(const Buffer<T>& upstream, GradSink<T>& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a leaf that accumulates a gradient.
  Tensor<T> leaf(const Tensor<T>& value);

  /// Records an op output. Used by op implementations.
  Tensor<T> record(Shape shape, Buffer<T> value, Backward backward);

  /// Runs reverse-mode differentiation from a scalar root. Allowed once.
  void backward(const Tensor<T>& loss);

  /// Gradient of a leaf after backward(); zeros if nothing flowed into it.
  Tensor<T> grad(const Tensor<T>& leaf) const;

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  /// Number of recorded ops whose backward ran in the last backward().
  std::size_t backward_visits() const { return visits_; }

 private:
  struct Node {
    Shape shape;
    Backward backward;  // empty for leaves
    bool leaf = false;
  };

  void accumulate(std::int32_t node, const Buffer<T>& grad) override;
  void require_live(const char* what) const;

  std::vector<Node> nodes_;
  std::vector<Buffer<T>> grads_;
  std::vector<bool> has_grad_;
  bool consumed_ = false;
  std::size_t visits_ = 0;
};

/// Tape shared by the tracked operands, or nullptr if none is tracked.
template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> operands);

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, Buffer<T> data)
    : shape_(std::move(shape)), data_(std::make_shared<const Buffer<T>>(std::move(data))) {
  if (shape_numel(shape_) != data_->size()) {
    throw DimensionError("tensor data length " + std::to_string(data_->size()) + " does not match shape " +
                         shape_str(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer<T>::Constant(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::initializer_list<T> values) {
  Buffer<T> data(static_cast<Index>(values.size()));
  Index i = 0;
  for (T v : values) data(i++) = v;
  return Tensor(std::move(shape), std::move(data));
}

template <typename T>
Index Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(a)];
}

template <typename T>
Eigen::Map<const RowMatrix<T>> Tensor<T>::matrix() const {
  const Index cols = rank() == 0 ? 1 : shape_.back();
  const Index rows = cols == 0 ? 0 : numel() / cols;
  return Eigen::Map<const RowMatrix<T>>(data_->data(), rows, cols);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)(0);
}

template <typename T>
Tensor<T> Tape<T>::leaf(const Tensor<T>& value) {
  require_live("leaf");
  Tensor<T> out(value.shape(), value.data_);
  out.tape_ = this;
  out.node_ = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{value.shape(), {}, true});
  grads_.emplace_back();
  has_grad_.push_back(false);
  return out;
}

template <typename T>
Tensor<T> Tape<T>::record(Shape shape, Buffer<T> value, Backward backward) {
  require_live("record");
  Tensor<T> out(shape, std::move(value));
  out.tape_ = this;
  out.node_ = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{std::move(shape), std::move(backward), false});
  grads_.emplace_back();
  has_grad_.push_back(false);
  return out;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  require_live("backward");
  if (loss.numel() != 1) throw ArgumentError("backward() needs a scalar root, got shape " + shape_str(loss.shape()));
  if (loss.tape() != this) throw ArgumentError("backward() root was not recorded on this tape");
  consumed_ = true;
  visits_ = 0;
  grads_[static_cast<std::size_t>(loss.node())] = Buffer<T>::Ones(1);
  has_grad_[static_cast<std::size_t>(loss.node())] = true;
  for (auto i = static_cast<std::int32_t>(loss.node()); i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    if (!has_grad_[k] || nodes_[k].leaf) continue;
    nodes_[k].backward(grads_[k], *this);
    ++visits_;
    grads_[k] = Buffer<T>();  // intermediates are not kept
    has_grad_[k] = false;
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Tensor<T>& leaf) const {
  if (leaf.tape() != this || !nodes_[static_cast<std::size_t>(leaf.node())].leaf) {
    throw ArgumentError("grad() requested for a tensor that is not a leaf of this tape");
  }
  const auto k = static_cast<std::size_t>(leaf.node());
  if (!has_grad_[k]) return Tensor<T>::zeros(leaf.shape());
  return Tensor<T>(leaf.shape(), grads_[k]);
}

template <typename T>
void Tape<T>::accumulate(std::int32_t node, const Buffer<T>& grad) {
  if (node < 0) return;
  const auto k = static_cast<std::size_t>(node);
  if (has_grad_[k]) {
    grads_[k] += grad;
  } else {
    grads_[k] = grad;
    has_grad_[k] = true;
  }
}

template <typename T>
void Tape<T>::require_live(const char* what) const {
  if (consumed_) throw StateError(std::string(what) + "() on a tape whose backward pass already ran");
}

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> operands) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : operands) {
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && tape != t->tape()) throw ArgumentError("operands belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace roundfit
