#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "bandmoe/error.hpp"

namespace bandmoe {

std::size_t numel(const Shape& shape);

namespace detail {

// One recorded operation. Nodes are created in execution order and carry a
// per-thread sequence number so the backward sweep can replay them in exact
// reverse order.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

}  // namespace detail

// Dense row-major array of doubles with an optional autodiff record.
// Copies share storage; use clone() or detach() for an independent value.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  bool defined() const { return node_ != nullptr; }

  std::span<const double> data() const&;
  // A temporary may own the only reference to its storage.
  std::span<const double> data() const&& = delete;
  // Writable view for leaves (parameters, inputs). Mutating a tensor that
  // already fed recorded operations invalidates their backward rules.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  // Same values, no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const detail::Node* id() const { return node_.get(); }

  // Internal: wraps a node produced by an operation.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Result of a backward sweep: one gradient per tracked tensor reached from
// the loss. Tensors that were not reached (or sit behind stop_gradient)
// report a zero gradient of their own shape.
class Gradients {
 public:
  Tensor of(const Tensor& t) const;
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<const detail::Node*, Tensor> grads_;
};

Gradients backward(const Tensor& loss);

// Number of backward sweeps run on this thread so far.
std::uint64_t backward_pass_count();

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary operations broadcast over trailing
// dimensions with numpy rules (size-1 axes stretch, missing leading axes are
// implied).

enum class ElementwiseOp { kAdd, kSub, kMul, kDiv, kExp, kLog, kRelu, kScale };

// Dispatcher over the basic elementwise family. Unary ops ignore `b`;
// kScale multiplies by `scalar`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = Tensor(), double scalar = 1.0);

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Throws DomainError on an exact zero denominator.
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
// Throws DomainError on non-positive input.
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
// Subgradient 0 at exactly 0, so constant-channel statistics stay finite.
Tensor sqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Identity forward, zero gradient backward.
Tensor stop_gradient(const Tensor& a);

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reduce the last axis; result drops it (rank-1 inputs give shape {1}).
Tensor sum_lastdim(const Tensor& a);
Tensor mean_lastdim(const Tensor& a);
Tensor max_lastdim(const Tensor& a);
Tensor min_lastdim(const Tensor& a);
Tensor logsumexp_lastdim(const Tensor& a);

// Max-subtracted softmax over the last axis.
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose(const Tensor& a);  // rank 2 only
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::size_t axis = 0);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis = 0);
// Picks entries of a rank-1 tensor.
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
// Rank-1 view of entry `i` as a shape-{1} tensor.
Tensor select(const Tensor& a, std::size_t i);

// ---------------------------------------------------------------------------
// Linear algebra and imaging

Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation (no kernel flip) with zero "same" padding.
// input [Cin,H,W], kernel [Cout,Cin,k,k] with odd k, bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

// [C,H,W] -> [C]
Tensor global_avg_pool(const Tensor& x);
// 2x2 mean pooling, [C,H,W] -> [C,H/2,W/2]; H and W must be even.
Tensor avg_pool2(const Tensor& x);
// Nearest-neighbour 2x upsampling, [C,H,W] -> [C,2H,2W].
Tensor upsample2(const Tensor& x);

}  // namespace bandmoe
