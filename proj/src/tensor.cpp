#include "cpcser/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "node.hpp"

namespace cpcser {

namespace {
thread_local bool g_grad_enabled = true;

detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw std::logic_error("tensor: use of undefined tensor");
  return *node;
}
}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << " x ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

std::vector<double>& grad_buffer(Node& node) {
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->sequence = next_sequence();
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const auto& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = cpcser::numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor: shape must have at least one axis");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor: zero-length axis in shape " + to_string(shape));
  if (cpcser::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->sequence = detail::next_sequence();
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  auto& n = checked(node_);
  if (n.backward) throw std::logic_error("tensor: mutable_data on a non-leaf tensor");
  return n.value;
}

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) throw ShapeError("tensor: item() on tensor of shape " + to_string(n.shape));
  return n.value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const auto& n = checked(node_);
  if (n.shape.size() != 2 || row >= n.shape[0] || col >= n.shape[1]) {
    throw ShapeError("tensor: at(" + std::to_string(row) + ", " + std::to_string(col) + ") on " +
                     to_string(n.shape));
  }
  return n.value[row * n.shape[1] + col];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  auto& n = checked(node_);
  if (n.backward) throw std::logic_error("tensor: requires_grad can only be set on leaves");
  n.requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return !checked(node_).backward; }

bool Tensor::has_grad() const {
  const auto& n = checked(node_);
  return !n.grad.empty();
}

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

std::span<double> Tensor::mutable_grad() { return detail::grad_buffer(checked(node_)); }

void Tensor::zero_grad() { checked(node_).grad.clear(); }

std::string_view Tensor::op_name() const { return checked(node_).op; }

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return from_data(n.shape, n.value, false);
}

void Tensor::backward() const {
  auto& root = checked(node_);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(root.shape));
  }
  if (!root.requires_grad) throw std::logic_error("backward: loss does not depend on any tensor requiring grad");

  // Collect the reachable subgraph, then replay it in reverse creation order,
  // which is a valid reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{&root};
  seen.insert(&root);
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->sequence > b->sequence; });

  for (auto* n : order)
    if (n->backward) n->grad.clear();
  detail::grad_buffer(root)[0] += 1.0;

  for (auto* n : order) {
    if (!n->backward) continue;
    if (n->grad.empty()) continue;  // no path from loss carried gradient here
    n->backward(*n);
    if (n != &root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace cpcser
