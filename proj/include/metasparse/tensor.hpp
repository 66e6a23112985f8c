#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace metasparse {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Thrown when operand shapes do not conform to an operation's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Vector value;
  Vector grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool released = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty() && !released; }
  void accumulate(const Vector& g);
};

}  // namespace detail

/**
 * Dense row-major n-dimensional array of doubles with reverse-mode gradient
 * tracking.
 *
 * Tensor is a shared handle: copies alias the same storage. Use clone() for
 * an independent leaf. Every operation that receives at least one input with
 * requires_grad() records itself in the graph; backward() walks that graph in
 * reverse topological order once and then releases it, so a second backward()
 * through the same graph throws.
 *
 * Leaf gradients accumulate across separate forward/backward passes until
 * zero_grad() is called.
 */
class Tensor {
 public:
  /// Undefined handle; used for optional operands such as a missing bias.
  Tensor() = default;
  bool defined() const { return static_cast<bool>(node_); }

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, double value);
  static Tensor from(Shape shape, Vector data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor parameter(Shape shape, Vector data) { return from(std::move(shape), std::move(data), true); }

  const Shape& shape() const { return node_->shape; }
  Index numel() const { return node_->value.size(); }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }

  const Vector& data() const { return node_->value; }
  /// Writable storage; only legal on leaves (parameters, inputs).
  Vector& mutable_data();
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient written by backward(); zero vector when none was computed.
  Vector grad() const;
  void zero_grad() { node_->grad.resize(0); }

  void backward() const;

  /// Independent leaf copy of the value (gradient not copied).
  Tensor clone(bool requires_grad) const;
  Tensor clone() const { return clone(requires_grad()); }
  /// Leaf that shares no graph history, same value.
  Tensor detach() const { return clone(false); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const char* op_name() const { return node_->op; }

  // Internal: used by operation implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  Tensor(Shape shape, Vector data, bool requires_grad);
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool enabled();

 private:
  bool previous_;
};

}  // namespace metasparse
