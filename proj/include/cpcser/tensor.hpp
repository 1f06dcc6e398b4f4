#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cpcser {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes do not conform; the message names the op and shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Node;
}

/// Dense row-major float64 array with optional reverse-mode gradient tracking.
///
/// A Tensor is a handle: copies share storage and graph position. Results of
/// ops on tensors that require grad record their parents, so the graph is
/// rebuilt on every forward pass and released together with the last handle
/// that references it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view of the values. Only legal on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  std::string_view op_name() const;

  /// Reverse sweep from this scalar. Leaf gradients accumulate.
  void backward() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- primitive ops -------------------------------------------------------

/// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// Valid (unpadded) strided 1-D convolution over a time-major input.
/// x: [L_in x C_in], weight: [filter*C_in x C_out] with row index tap*C_in + c.
/// Output: [floor((L_in - filter)/stride) + 1 x C_out].
Tensor conv1d(const Tensor& x, const Tensor& weight, std::size_t filter, std::size_t stride);

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
/// Square root with a zero subgradient at 0 (population std of a constant is 0, not NaN).
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

/// Sum of every element, as a [1] tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Axis reductions keep the reduced axis with size 1.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
/// Population (divide-by-n) variance.
Tensor variance(const Tensor& a, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
/// Half-open range [begin, end) along axis.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// 2-D transpose.
Tensor transpose(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);

/// Indexed inner products: out[a][j] = dot(queries[a], keys[index[a*width + j]]).
/// queries: [A x D], keys: [L x D], index: A*width row ids into keys. Output [A x width].
Tensor gather_dot(const Tensor& queries, const Tensor& keys, std::span<const std::size_t> index,
                  std::size_t width);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// Shape of the broadcast of a and b; throws ShapeError naming op.
Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op);

}  // namespace cpcser
