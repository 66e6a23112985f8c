#include "metasparse/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace metasparse {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool grad_disabled = false;
}

NoGradGuard::NoGradGuard() : previous_(grad_disabled) { grad_disabled = true; }
NoGradGuard::~NoGradGuard() { grad_disabled = previous_; }
bool NoGradGuard::enabled() { return grad_disabled; }

namespace detail {

void Node::accumulate(const Vector& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

}  // namespace detail

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, Vector data, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive extent in shape " + to_string(shape));
  }
  if (metasparse::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor::Tensor(Shape shape, Vector data, bool requires_grad)
    : node_(make_leaf(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = metasparse::numel(shape);
  return Tensor(std::move(shape), Vector::Zero(n), requires_grad);
}

Tensor Tensor::constant(Shape shape, double value) {
  const Index n = metasparse::numel(shape);
  return Tensor(std::move(shape), Vector::Constant(n, value), false);
}

Tensor Tensor::from(Shape shape, Vector data, bool requires_grad) {
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, Vector::Constant(1, value), requires_grad);
}

Vector& Tensor::mutable_data() {
  if (!node_->inputs.empty() || node_->released) throw std::logic_error("tensor: cannot mutate a non-leaf result of '" +
                                                      std::string(node_->op) + "'");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

Vector Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Vector::Zero(numel());
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->value, requires_grad);
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + to_string(shape()));
  if (node_->released) throw std::logic_error("backward: graph already released by a previous backward");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->released) throw std::logic_error("backward: graph already released by a previous backward");
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->accumulate(Vector::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->inputs.empty()) continue;
    if (node->grad.size() == 0) node->grad = Vector::Zero(node->value.size());
    node->backward_fn(*node);
  }
  for (detail::Node* node : order) {
    if (node->inputs.empty()) continue;
    node->inputs.clear();
    node->backward_fn = nullptr;
    node->grad.resize(0);
    node->released = true;
  }
}

}  // namespace metasparse
