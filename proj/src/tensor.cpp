#include "bandmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace bandmoe {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, Shape lhs, Shape rhs)
    : Error(op + ": incompatible shapes " + to_string(lhs) + " and " + to_string(rhs)),
      lhs_(std::move(lhs)),
      rhs_(std::move(rhs)) {}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

thread_local std::uint64_t g_next_seq = 0;
thread_local std::uint64_t g_backward_passes = 0;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor", shape, {});
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension", shape, {});
  }
}

NodePtr make_leaf(const Shape& shape, std::vector<double> value, bool requires_grad) {
  check_shape(shape);
  if (value.size() != numel(shape)) {
    throw ShapeError("tensor: payload size " + std::to_string(value.size()) + " vs shape", shape, {});
  }
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = g_next_seq++;
  return n;
}

// Records an operation result. The backward rule is kept only when some
// input is tracked.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = g_next_seq++;
  bool tracked = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (tracked) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline bool wants(const NodePtr& p) { return p->requires_grad && !p->grad.empty(); }

const NodePtr& require(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
  return t.node();
}

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastMap {
  Shape out;
  bool same_a = true;
  bool same_b = true;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    in_stride[k + offset] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  const std::size_t total = numel(out);
  std::vector<std::size_t> idx(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < total; ++i) {
    idx[i] = cur;
    for (std::size_t k = rank; k-- > 0;) {
      ++counter[k];
      cur += in_stride[k];
      if (counter[k] < out[k]) break;
      cur -= in_stride[k] * counter[k];
      counter[k] = 0;
    }
  }
  return idx;
}

BroadcastMap plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastMap m;
  m.out = broadcast_shape(a, b);
  m.same_a = a == m.out;
  m.same_b = b == m.out;
  if (!m.same_a) m.ia = broadcast_index(a, m.out);
  if (!m.same_b) m.ib = broadcast_index(b, m.out);
  return m;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& ta, const Tensor& tb, Fwd f, DA da, DB db) {
  const NodePtr& a = require(ta, name);
  const NodePtr& b = require(tb, name);
  auto plan = std::make_shared<BroadcastMap>();
  try {
    *plan = plan_broadcast(a->shape, b->shape);
  } catch (const ShapeError&) {
    throw ShapeError(name, a->shape, b->shape);
  }
  const std::size_t n = numel(plan->out);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a->value[plan->same_a ? i : plan->ia[i]];
    const double y = b->value[plan->same_b ? i : plan->ib[i]];
    out[i] = f(x, y);
  }
  return make_result(plan->out, std::move(out), {a, b}, [plan, da, db](Node& self) {
    const NodePtr& a = self.inputs[0];
    const NodePtr& b = self.inputs[1];
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ja = plan->same_a ? i : plan->ia[i];
      const std::size_t jb = plan->same_b ? i : plan->ib[i];
      const double g = self.grad[i];
      if (wants(a)) a->grad[ja] += g * da(a->value[ja], b->value[jb], self.value[i]);
      if (wants(b)) b->grad[jb] += g * db(a->value[ja], b->value[jb], self.value[i]);
    }
  });
}

// `df(x, y)` is the derivative given input x and output y.
template <typename Fwd, typename Df>
Tensor unary(const char* name, const Tensor& ta, Fwd f, Df df) {
  const NodePtr& a = require(ta, name);
  std::vector<double> out(a->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a->value[i]);
  return make_result(a->shape, std::move(out), {a}, [df](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      a->grad[i] += self.grad[i] * df(a->value[i], self.value[i]);
    }
  });
}

struct LastDim {
  std::size_t rows;
  std::size_t cols;
  Shape out;
};

LastDim split_last(const Shape& s) {
  LastDim d;
  d.cols = s.back();
  d.rows = numel(s) / d.cols;
  d.out.assign(s.begin(), s.end() - 1);
  if (d.out.empty()) d.out = {1};
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() = default;

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_leaf(shape, std::vector<double>(bandmoe::numel(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(make_leaf(shape, std::vector<double>(bandmoe::numel(shape), value), requires_grad));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return require(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw UsageError("dim: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return require(*this, "numel")->value.size(); }

std::span<const double> Tensor::data() const& { return require(*this, "data")->value; }

std::span<double> Tensor::mutable_data() {
  const auto& n = require(*this, "mutable_data");
  return {n->value.data(), n->value.size()};
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  const auto& n = require(*this, "set_requires_grad");
  if (n->backward) throw UsageError("set_requires_grad: only leaf tensors can be toggled");
  n->requires_grad = on;
  return *this;
}

Tensor Tensor::detach() const {
  const auto& n = require(*this, "detach");
  return Tensor(make_leaf(n->shape, n->value, false));
}

// ---------------------------------------------------------------------------
// Backward

Tensor Gradients::of(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it != grads_.end()) return it->second;
  return Tensor::zeros(t.shape());
}

Gradients backward(const Tensor& loss) {
  const NodePtr& root = require(loss, "backward");
  if (root->value.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " + to_string(root->shape));
  }
  ++g_backward_passes;
  Gradients out;
  if (!root->requires_grad) return out;

  std::vector<NodePtr> order;
  std::unordered_set<const Node*> seen;
  std::vector<NodePtr> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

  for (auto& n : order) n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto& n : order) {
    if (n->backward) n->backward(*n);
  }
  for (auto& n : order) {
    out.grads_.emplace(n.get(), Tensor::from(n->shape, std::move(n->grad)));
    n->grad.clear();
  }
  return out;
}

std::uint64_t backward_pass_count() { return g_backward_passes; }

// ---------------------------------------------------------------------------
// Elementwise

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const std::size_t db = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError("broadcast", a, b);
    out[k] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : require(b, "div")->value) {
    if (v == 0.0) throw DomainError("div: zero denominator");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : require(a, "log")->value) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : require(a, "sqrt")->value) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(
      "clamp_min", a, [lo](double x) { return x < lo ? lo : x; }, [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b, double scalar) {
  switch (op) {
    case ElementwiseOp::kAdd: return add(a, b);
    case ElementwiseOp::kSub: return sub(a, b);
    case ElementwiseOp::kMul: return mul(a, b);
    case ElementwiseOp::kDiv: return div(a, b);
    case ElementwiseOp::kExp: return exp(a);
    case ElementwiseOp::kLog: return log(a);
    case ElementwiseOp::kRelu: return relu(a);
    case ElementwiseOp::kScale: return scale(a, scalar);
  }
  throw UsageError("elementwise: unknown op");
}

Tensor stop_gradient(const Tensor& a) {
  require(a, "stop_gradient");
  return a.detach();
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& ta) {
  const NodePtr& a = require(ta, "sum");
  double s = 0.0;
  for (double v : a->value) s += v;
  return make_result({1}, {s}, {a}, [](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (auto& g : a->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_lastdim(const Tensor& ta) {
  const NodePtr& a = require(ta, "sum_lastdim");
  const LastDim d = split_last(a->shape);
  std::vector<double> out(d.rows, 0.0);
  for (std::size_t r = 0; r < d.rows; ++r) {
    for (std::size_t c = 0; c < d.cols; ++c) out[r] += a->value[r * d.cols + c];
  }
  return make_result(d.out, std::move(out), {a}, [d](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t r = 0; r < d.rows; ++r) {
      for (std::size_t c = 0; c < d.cols; ++c) a->grad[r * d.cols + c] += self.grad[r];
    }
  });
}

Tensor mean_lastdim(const Tensor& a) { return scale(sum_lastdim(a), 1.0 / static_cast<double>(a.shape().back())); }

namespace {

Tensor extreme_lastdim(const Tensor& ta, bool want_max) {
  const NodePtr& a = require(ta, want_max ? "max_lastdim" : "min_lastdim");
  const LastDim d = split_last(a->shape);
  std::vector<double> out(d.rows);
  auto arg = std::make_shared<std::vector<std::size_t>>(d.rows);
  for (std::size_t r = 0; r < d.rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < d.cols; ++c) {
      const double v = a->value[r * d.cols + c];
      const double b = a->value[r * d.cols + best];
      if (want_max ? v > b : v < b) best = c;
    }
    (*arg)[r] = best;
    out[r] = a->value[r * d.cols + best];
  }
  return make_result(d.out, std::move(out), {a}, [d, arg](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t r = 0; r < d.rows; ++r) a->grad[r * d.cols + (*arg)[r]] += self.grad[r];
  });
}

}  // namespace

Tensor max_lastdim(const Tensor& a) { return extreme_lastdim(a, true); }
Tensor min_lastdim(const Tensor& a) { return extreme_lastdim(a, false); }

Tensor logsumexp_lastdim(const Tensor& ta) {
  const NodePtr& a = require(ta, "logsumexp_lastdim");
  const LastDim d = split_last(a->shape);
  std::vector<double> out(d.rows);
  for (std::size_t r = 0; r < d.rows; ++r) {
    const double* row = a->value.data() + r * d.cols;
    const double m = *std::max_element(row, row + d.cols);
    double s = 0.0;
    for (std::size_t c = 0; c < d.cols; ++c) s += std::exp(row[c] - m);
    out[r] = m + std::log(s);
  }
  return make_result(d.out, std::move(out), {a}, [d](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t r = 0; r < d.rows; ++r) {
      for (std::size_t c = 0; c < d.cols; ++c) {
        a->grad[r * d.cols + c] += self.grad[r] * std::exp(a->value[r * d.cols + c] - self.value[r]);
      }
    }
  });
}

Tensor softmax_lastdim(const Tensor& ta) {
  const NodePtr& a = require(ta, "softmax_lastdim");
  const LastDim d = split_last(a->shape);
  std::vector<double> out(a->value.size());
  for (std::size_t r = 0; r < d.rows; ++r) {
    const double* row = a->value.data() + r * d.cols;
    double* y = out.data() + r * d.cols;
    const double m = *std::max_element(row, row + d.cols);
    double s = 0.0;
    for (std::size_t c = 0; c < d.cols; ++c) s += (y[c] = std::exp(row[c] - m));
    for (std::size_t c = 0; c < d.cols; ++c) y[c] /= s;
  }
  return make_result(a->shape, std::move(out), {a}, [d](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t r = 0; r < d.rows; ++r) {
      const double* y = self.value.data() + r * d.cols;
      const double* g = self.grad.data() + r * d.cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < d.cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < d.cols; ++c) a->grad[r * d.cols + c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& ta) {
  const NodePtr& a = require(ta, "log_softmax_lastdim");
  const LastDim d = split_last(a->shape);
  std::vector<double> out(a->value.size());
  for (std::size_t r = 0; r < d.rows; ++r) {
    const double* row = a->value.data() + r * d.cols;
    const double m = *std::max_element(row, row + d.cols);
    double s = 0.0;
    for (std::size_t c = 0; c < d.cols; ++c) s += std::exp(row[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < d.cols; ++c) out[r * d.cols + c] = row[c] - lse;
  }
  return make_result(a->shape, std::move(out), {a}, [d](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t r = 0; r < d.rows; ++r) {
      const double* y = self.value.data() + r * d.cols;
      const double* g = self.grad.data() + r * d.cols;
      double gs = 0.0;
      for (std::size_t c = 0; c < d.cols; ++c) gs += g[c];
      for (std::size_t c = 0; c < d.cols; ++c) a->grad[r * d.cols + c] += g[c] - std::exp(y[c]) * gs;
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& ta, const Shape& shape) {
  const NodePtr& a = require(ta, "reshape");
  check_shape(shape);
  if (numel(shape) != a->value.size()) throw ShapeError("reshape", a->shape, shape);
  return make_result(shape, a->value, {a}, [](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& ta) {
  const NodePtr& a = require(ta, "transpose");
  if (a->shape.size() != 2) throw ShapeError("transpose: rank-2 input required", a->shape, {});
  const std::size_t m = a->shape[0], n = a->shape[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a->value[i * n + j];
  }
  return make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor narrow(const Tensor& ta, std::size_t axis, std::size_t start, std::size_t length) {
  const NodePtr& a = require(ta, "narrow");
  if (axis >= a->shape.size() || length == 0 || start + length > a->shape[axis]) {
    throw ShapeError("narrow: axis " + std::to_string(axis) + " range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ")",
                     a->shape, {});
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= a->shape[k];
  for (std::size_t k = axis + 1; k < a->shape.size(); ++k) inner *= a->shape[k];
  const std::size_t full = a->shape[axis];
  Shape out_shape = a->shape;
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a->value.begin() + (o * full + start) * inner, length * inner, out.begin() + o * length * inner);
  }
  return make_result(out_shape, std::move(out), {a}, [=](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < length * inner; ++i) {
        a->grad[(o * full + start) * inner + i] += self.grad[o * length * inner + i];
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(require(p, "concat"));
  const Shape& first = nodes[0]->shape;
  if (axis >= first.size()) throw ShapeError("concat: axis out of range", first, {});
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& n : nodes) {
    Shape a = n->shape, b = first;
    if (a.size() != b.size()) throw ShapeError("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat", first, n->shape);
    out_shape[axis] += n->shape[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= first[k];
  for (std::size_t k = axis + 1; k < first.size(); ++k) inner *= first[k];
  const std::size_t total = out_shape[axis];
  std::vector<std::size_t> offsets;
  std::vector<double> out(numel(out_shape));
  std::size_t off = 0;
  for (const auto& n : nodes) {
    offsets.push_back(off);
    const std::size_t len = n->shape[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(n->value.begin() + o * len * inner, len * inner, out.begin() + (o * total + off) * inner);
    }
    off += len;
  }
  return make_result(out_shape, std::move(out), nodes, [=](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      const NodePtr& n = self.inputs[p];
      if (!wants(n)) continue;
      const std::size_t len = n->shape[axis];
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < len * inner; ++i) {
          n->grad[o * len * inner + i] += self.grad[(o * total + offsets[p]) * inner + i];
        }
      }
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor gather(const Tensor& ta, std::span<const std::size_t> indices) {
  const NodePtr& a = require(ta, "gather");
  if (a->shape.size() != 1) throw ShapeError("gather: rank-1 input required", a->shape, {});
  if (indices.empty()) throw UsageError("gather: empty index list");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a->value.size()) throw ShapeError("gather: index " + std::to_string(idx[i]), a->shape, {});
    out[i] = a->value[idx[i]];
  }
  return make_result({idx.size()}, std::move(out), {a}, [idx](Node& self) {
    const NodePtr& a = self.inputs[0];
    for (std::size_t i = 0; i < idx.size(); ++i) a->grad[idx[i]] += self.grad[i];
  });
}

Tensor select(const Tensor& a, std::size_t i) {
  const std::size_t idx[] = {i};
  return gather(a, idx);
}

// ---------------------------------------------------------------------------
// Linear algebra and imaging

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = require(ta, "matmul");
  const NodePtr& b = require(tb, "matmul");
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0]) {
    throw ShapeError("matmul", a->shape, b->shape);
  }
  const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a->value[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b->value.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const NodePtr& a = self.inputs[0];
    const NodePtr& b = self.inputs[1];
    const double* g = self.grad.data();
    if (wants(a)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = b->value.data() + p * n;
          const double* grow = g + i * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          a->grad[i * k + p] += s;
        }
      }
    }
    if (wants(b)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a->value[i * k + p];
          if (av == 0.0) continue;
          double* bg = b->grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) bg[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor conv2d(const Tensor& tin, const Tensor& tk, const Tensor& tbias) {
  const NodePtr& in = require(tin, "conv2d");
  const NodePtr& kr = require(tk, "conv2d");
  if (in->shape.size() != 3 || kr->shape.size() != 4 || kr->shape[1] != in->shape[0] ||
      kr->shape[2] != kr->shape[3]) {
    throw ShapeError("conv2d", in->shape, kr->shape);
  }
  const std::size_t ksz = kr->shape[2];
  if (ksz % 2 == 0) throw ConfigError("conv2d: kernel size " + std::to_string(ksz) + " must be odd");
  const std::size_t cin = in->shape[0], h = in->shape[1], w = in->shape[2], cout = kr->shape[0];
  std::vector<NodePtr> inputs{in, kr};
  if (tbias.defined()) {
    const NodePtr& b = tbias.node();
    if (b->shape != Shape{cout}) throw ShapeError("conv2d bias", b->shape, {cout});
    inputs.push_back(b);
  }
  const long pad = static_cast<long>(ksz / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);

  // Visits every (output pixel, input pixel) pair that a kernel tap links.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t ky = 0; ky < ksz; ++ky) {
          const long dy = static_cast<long>(ky) - pad;
          const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
          for (std::size_t kx = 0; kx < ksz; ++kx) {
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
            const std::size_t widx = ((co * cin + ci) * ksz + ky) * ksz + kx;
            for (long y = y0; y < y1; ++y) {
              const std::size_t orow = (co * h + static_cast<std::size_t>(y)) * w;
              const std::size_t irow = (ci * h + static_cast<std::size_t>(y + dy)) * w;
              fn(widx, orow + static_cast<std::size_t>(x0), irow + static_cast<std::size_t>(x0 + dx),
                 static_cast<std::size_t>(x1 - x0));
            }
          }
        }
      }
    }
  };

  std::vector<double> out(cout * h * w, 0.0);
  if (tbias.defined()) {
    for (std::size_t co = 0; co < cout; ++co) std::fill_n(out.begin() + co * h * w, h * w, tbias.node()->value[co]);
  }
  const double* iv = in->value.data();
  const double* kv = kr->value.data();
  for_taps([&](std::size_t widx, std::size_t o, std::size_t i, std::size_t len) {
    const double wv = kv[widx];
    double* op = out.data() + o;
    const double* ip = iv + i;
    for (std::size_t t = 0; t < len; ++t) op[t] += wv * ip[t];
  });

  return make_result({cout, h, w}, std::move(out), std::move(inputs), [=](Node& self) {
    const NodePtr& in = self.inputs[0];
    const NodePtr& kr = self.inputs[1];
    const double* g = self.grad.data();
    const bool gin = wants(in), gk = wants(kr);
    for_taps([&](std::size_t widx, std::size_t o, std::size_t i, std::size_t len) {
      const double* gp = g + o;
      if (gin) {
        const double wv = kr->value[widx];
        double* ig = in->grad.data() + i;
        for (std::size_t t = 0; t < len; ++t) ig[t] += wv * gp[t];
      }
      if (gk) {
        const double* ip = in->value.data() + i;
        double s = 0.0;
        for (std::size_t t = 0; t < len; ++t) s += gp[t] * ip[t];
        kr->grad[widx] += s;
      }
    });
    if (self.inputs.size() > 2 && wants(self.inputs[2])) {
      const NodePtr& b = self.inputs[2];
      for (std::size_t co = 0; co < cout; ++co) {
        double s = 0.0;
        for (std::size_t p = 0; p < h * w; ++p) s += g[co * h * w + p];
        b->grad[co] += s;
      }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool: [C,H,W] input required", x.shape(), {});
  return mean_lastdim(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

Tensor avg_pool2(const Tensor& tx) {
  const NodePtr& x = require(tx, "avg_pool2");
  if (x->shape.size() != 3 || x->shape[1] % 2 || x->shape[2] % 2) {
    throw ShapeError("avg_pool2: [C,H,W] with even H,W required", x->shape, {});
  }
  const std::size_t c = x->shape[0], h = x->shape[1], w = x->shape[2], oh = h / 2, ow = w / 2;
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* p = x->value.data() + (ch * h + 2 * y) * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return make_result({c, oh, ow}, std::move(out), {x}, [=](Node& self) {
    const NodePtr& x = self.inputs[0];
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double g = 0.25 * self.grad[(ch * oh + y) * ow + xx];
          double* p = x->grad.data() + (ch * h + 2 * y) * w + 2 * xx;
          p[0] += g;
          p[1] += g;
          p[w] += g;
          p[w + 1] += g;
        }
      }
    }
  });
}

Tensor upsample2(const Tensor& tx) {
  const NodePtr& x = require(tx, "upsample2");
  if (x->shape.size() != 3) throw ShapeError("upsample2: [C,H,W] input required", x->shape, {});
  const std::size_t c = x->shape[0], h = x->shape[1], w = x->shape[2], oh = 2 * h, ow = 2 * w;
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(ch * oh + y) * ow + xx] = x->value[(ch * h + y / 2) * w + xx / 2];
    }
  }
  return make_result({c, oh, ow}, std::move(out), {x}, [=](Node& self) {
    const NodePtr& x = self.inputs[0];
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          x->grad[(ch * h + y / 2) * w + xx / 2] += self.grad[(ch * oh + y) * ow + xx];
        }
      }
    }
  });
}

}  // namespace bandmoe
