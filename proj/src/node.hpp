#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cpcser/tensor.hpp"

namespace cpcser::detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::uint64_t sequence = 0;  // creation order; backward visits descending
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

std::uint64_t next_sequence();

/// Zero-filled gradient buffer of node, allocating on first use.
std::vector<double>& grad_buffer(Node& node);

/// Creates an op output. Parents and the VJP are only kept when grad mode is
/// on and at least one parent requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> backward);

inline Node& node_of(const Tensor& t) { return *t.node(); }

}  // namespace cpcser::detail
