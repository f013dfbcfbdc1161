#pragma once

// Dense N-d arrays with tape-based reverse-mode differentiation.
//
// Every op allocates a fresh node that keeps its inputs alive; backward()
// collects the graph reachable from a scalar loss, orders it topologically
// and runs each node's backward closure exactly once. Graphs are rebuilt on
// every forward pass.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace strek {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t id = node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

/// Disables graph recording on this thread for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->shape = std::move(shape);
    node_->value.assign(numel(node_->shape), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  /// Leaf that accumulates gradients.
  static Tensor leaf(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::size_t i) const { return node_->value.at(i); }

  /// Copy of the values without graph history.
  Tensor detach() const { return Tensor(shape(), values()); }

  NodePtr node() const { return node_; }

  /// Builds an op result. `inputs` become graph parents when any of them
  /// requires a gradient and recording is enabled.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                            std::function<void(detail::Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    if (detail::grad_disabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  NodePtr node_;
};

/// Runs reverse-mode differentiation from a scalar loss. Gradients accumulate
/// into every reachable leaf; intermediate buffers are released afterwards.
template <class T>
void backward(const Tensor<T>& loss) {
  using NodeT = detail::Node<T>;
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  NodeT* root = loss.node().get();
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // A loss node that is itself a leaf keeps its own accumulated gradient.
  const bool root_is_leaf = !root->backward;
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (!node->backward) continue;
    if (node->grad.empty()) continue;
    for (auto& in : node->inputs)
      if (in->requires_grad) in->ensure_grad();
    node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
  if (!root_is_leaf) root->grad.clear();
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T, class Fwd, class Dfdx>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Dfdx dfdx) {
  std::vector<T> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [xn, dfdx](Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i] * dfdx(xn->value[i], self.value[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b.values()[i] == T(0)) throw std::domain_error("div: division by zero");
    out[i] = a.values()[i] / b.values()[i];
  }
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T inv = T(1) / bn->value[i];
      if (an->requires_grad) an->grad[i] += self.grad[i] * inv;
      if (bn->requires_grad) bn->grad[i] -= self.grad[i] * an->value[i] * inv * inv;
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return detail::unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.values())
    if (!(v > T(0))) throw std::domain_error("log: non-positive input");
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Reductions (accumulate in double)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(acc)}, {x}, [xn](detail::Node<T>& self) {
    const T g = self.grad[0];
    for (auto& gi : xn->grad) gi += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Sum over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("sum_axis: axis out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  std::vector<double> acc(outer * inner, 0.0);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) acc[o * inner + i] += xv[(o * n + k) * inner + i];
  std::vector<T> out(acc.begin(), acc.end());
  auto xn = x.node();
  return Tensor<T>::make_result(out_shape, std::move(out), {x},
                                [xn, outer, inner, n](detail::Node<T>& self) {
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t k = 0; k < n; ++k)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        xn->grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
                                });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  const T n = static_cast<T>(x.shape().at(axis));
  return scale(sum_axis(x, axis), T(1) / n);
}

/// Sums a list of same-shaped tensors (typically scalars).
template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty list");
  for (const auto& x : xs) detail::require_same_shape(xs.front(), x, "add_n");
  std::vector<double> acc(xs.front().size(), 0.0);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x.values()[i];
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return Tensor<T>::make_result(xs.front().shape(), std::vector<T>(acc.begin(), acc.end()), xs,
                                [nodes](detail::Node<T>& self) {
                                  for (auto& n : nodes)
                                    if (n->requires_grad)
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                        n->grad[i] += self.grad[i];
                                });
}

/// Reinterprets the shape without copying semantics (values copied).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node();
  return Tensor<T>::make_result(std::move(shape), x.values(), {x}, [xn](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Softmax with temperature over all elements
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_temperature(const Tensor<T>& x, T t) {
  if (!(t > T(0))) throw std::invalid_argument("softmax_temperature: temperature must be > 0");
  const auto& xv = x.values();
  if (xv.empty()) throw ShapeError("softmax_temperature: empty tensor");
  const T mx = *std::max_element(xv.begin(), xv.end());
  std::vector<double> e(xv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    e[i] = std::exp((static_cast<double>(xv[i]) - mx) / t);
    total += e[i];
  }
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(e[i] / total);
  auto xn = x.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [xn, t](detail::Node<T>& self) {
    // dx_i = y_i (g_i - sum_j g_j y_j) / t
    double dot = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      dot += static_cast<double>(self.grad[i]) * self.value[i];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += static_cast<T>(self.value[i] * (self.grad[i] - dot) / t);
  });
}

// ---------------------------------------------------------------------------
// Indexing
// ---------------------------------------------------------------------------

/// Reads x[..., row, col] from a [H,W] or [C,H,W] tensor. Returns shape [] or
/// [C]; the gradient is scattered back into the gathered cell only.
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::size_t row, std::size_t col) {
  std::size_t channels = 1, h = 0, w = 0;
  if (x.rank() == 2) {
    h = x.dim(0);
    w = x.dim(1);
  } else if (x.rank() == 3) {
    channels = x.dim(0);
    h = x.dim(1);
    w = x.dim(2);
  } else {
    throw ShapeError("gather: expected [H,W] or [C,H,W], got " + shape_str(x.shape()));
  }
  if (row >= h || col >= w)
    throw std::out_of_range("gather: (" + std::to_string(row) + "," + std::to_string(col) +
                            ") outside " + shape_str(x.shape()));
  const std::size_t plane = h * w, offset = row * w + col;
  std::vector<T> out(channels);
  for (std::size_t c = 0; c < channels; ++c) out[c] = x.values()[c * plane + offset];
  Shape out_shape = x.rank() == 2 ? Shape{} : Shape{channels};
  auto xn = x.node();
  return Tensor<T>::make_result(out_shape, std::move(out), {x},
                                [xn, plane, offset, channels](detail::Node<T>& self) {
                                  for (std::size_t c = 0; c < channels; ++c)
                                    xn->grad[c * plane + offset] += self.grad[c];
                                });
}

/// Batched gather at flat pixel indices (row * W + col). [H,W] -> [n];
/// [C,H,W] -> [n, C].
template <class T>
Tensor<T> gather_points(const Tensor<T>& x, std::vector<std::size_t> pixels) {
  if (x.rank() != 2 && x.rank() != 3)
    throw ShapeError("gather_points: expected [H,W] or [C,H,W], got " + shape_str(x.shape()));
  const std::size_t channels = x.rank() == 2 ? 1 : x.dim(0);
  const std::size_t plane = x.rank() == 2 ? x.size() : x.dim(1) * x.dim(2);
  for (std::size_t p : pixels)
    if (p >= plane) throw std::out_of_range("gather_points: index " + std::to_string(p) + " outside " + shape_str(x.shape()));
  const std::size_t n = pixels.size();
  std::vector<T> out(n * channels);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c) out[i * channels + c] = xv[c * plane + pixels[i]];
  Shape out_shape = x.rank() == 2 ? Shape{n} : Shape{n, channels};
  auto xn = x.node();
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x},
                                [xn, plane, channels, pixels = std::move(pixels)](detail::Node<T>& self) {
                                  for (std::size_t i = 0; i < pixels.size(); ++i)
                                    for (std::size_t c = 0; c < channels; ++c)
                                      xn->grad[c * plane + pixels[i]] += self.grad[i * channels + c];
                                });
}

/// Dot product of two equal-shaped tensors as a scalar.
template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  return sum(mul(a, b));
}

// ---------------------------------------------------------------------------
// Fixed sparse linear maps: y = M x, with M given in CSR form. Used for
// steerable kernel synthesis, bias expansion and differentiable resampling.
// ---------------------------------------------------------------------------

template <class T>
struct SparseMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> col_idx;
  std::vector<T> values;

  void push(std::size_t col, T v) {
    col_idx.push_back(col);
    values.push_back(v);
  }
  void end_row() {
    row_ptr.push_back(col_idx.size());
    ++rows;
  }
};

template <class T>
Tensor<T> sparse_linear(const Tensor<T>& x, std::shared_ptr<const SparseMatrix<T>> m, Shape out_shape) {
  if (m->cols != x.size())
    throw ShapeError("sparse_linear: matrix expects " + std::to_string(m->cols) + " inputs, got " +
                     shape_str(x.shape()));
  if (numel(out_shape) != m->rows)
    throw ShapeError("sparse_linear: output shape " + shape_str(out_shape) + " does not match " +
                     std::to_string(m->rows) + " rows");
  std::vector<T> out(m->rows, T(0));
  const auto& xv = x.values();
  for (std::size_t r = 0; r < m->rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = m->row_ptr[r]; k < m->row_ptr[r + 1]; ++k)
      acc += static_cast<double>(m->values[k]) * xv[m->col_idx[k]];
    out[r] = static_cast<T>(acc);
  }
  auto xn = x.node();
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {x}, [xn, m](detail::Node<T>& self) {
    for (std::size_t r = 0; r < m->rows; ++r) {
      const T g = self.grad[r];
      if (g == T(0)) continue;
      for (std::size_t k = m->row_ptr[r]; k < m->row_ptr[r + 1]; ++k)
        xn->grad[m->col_idx[k]] += m->values[k] * g;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (same-shape cross-correlation via chunked im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Fills col[(ci*k + a)*k + b][p] for output pixels p in rows [r0, r1).
template <class T>
void im2col_rows(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                 std::ptrdiff_t pad, std::size_t r0, std::size_t r1, T* col) {
  const std::size_t npix = (r1 - r0) * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T* plane = x + ci * h * w;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        T* dst = col + ((ci * k + a) * k + b) * npix;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(b) - pad;
        for (std::size_t r = r0; r < r1; ++r) {
          const std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(r + a) - pad;
          T* drow = dst + (r - r0) * w;
          if (sr < 0 || sr >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + w, T(0));
            continue;
          }
          const T* srow = plane + sr * w;
          const std::ptrdiff_t c_lo = std::max<std::ptrdiff_t>(0, -dx);
          const std::ptrdiff_t c_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w),
                                                               static_cast<std::ptrdiff_t>(w) - dx);
          std::fill(drow, drow + std::max<std::ptrdiff_t>(0, c_lo), T(0));
          if (c_hi > c_lo) std::copy(srow + c_lo + dx, srow + c_hi + dx, drow + c_lo);
          std::fill(drow + std::max(c_hi, c_lo), drow + w, T(0));
        }
      }
  }
}

inline std::size_t conv_chunk_rows(std::size_t w, std::size_t col_rows) {
  // ~1 MiB of floats per im2col chunk.
  const std::size_t budget = (1u << 18);
  return std::max<std::size_t>(1, budget / std::max<std::size_t>(1, w * col_rows));
}

// out[cout][h][w] (+)= kernel * x with same padding.
template <class T>
void conv_forward_raw(const T* x, std::size_t cin, std::size_t h, std::size_t w, const T* kernel,
                      std::size_t cout, std::size_t k, std::ptrdiff_t pad, T* out) {
  const std::size_t krows = cin * k * k;
  const std::size_t chunk = conv_chunk_rows(w, krows);
  std::vector<T> col(krows * chunk * w);
  Eigen::Map<const RowMat<T>> K(kernel, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(krows));
  RowMat<T> y;
  for (std::size_t r0 = 0; r0 < h; r0 += chunk) {
    const std::size_t r1 = std::min(h, r0 + chunk);
    const std::size_t npix = (r1 - r0) * w;
    im2col_rows(x, cin, h, w, k, pad, r0, r1, col.data());
    Eigen::Map<const RowMat<T>> C(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(npix));
    y.noalias() = K * C;
    for (std::size_t co = 0; co < cout; ++co)
      std::copy(y.row(static_cast<Eigen::Index>(co)).data(),
                y.row(static_cast<Eigen::Index>(co)).data() + npix, out + co * h * w + r0 * w);
  }
}

// grad_kernel[cout][krows] += dy * col^T
template <class T>
void conv_kernel_grad_raw(const T* x, std::size_t cin, std::size_t h, std::size_t w, const T* dy,
                          std::size_t cout, std::size_t k, std::ptrdiff_t pad, T* grad_kernel) {
  const std::size_t krows = cin * k * k;
  const std::size_t chunk = conv_chunk_rows(w, krows);
  std::vector<T> col(krows * chunk * w);
  std::vector<T> dyc(cout * chunk * w);
  Eigen::Map<RowMat<T>> G(grad_kernel, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(krows));
  for (std::size_t r0 = 0; r0 < h; r0 += chunk) {
    const std::size_t r1 = std::min(h, r0 + chunk);
    const std::size_t npix = (r1 - r0) * w;
    im2col_rows(x, cin, h, w, k, pad, r0, r1, col.data());
    for (std::size_t co = 0; co < cout; ++co)
      std::copy(dy + co * h * w + r0 * w, dy + co * h * w + r1 * w, dyc.data() + co * npix);
    Eigen::Map<const RowMat<T>> C(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(npix));
    Eigen::Map<const RowMat<T>> D(dyc.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(npix));
    G.noalias() += D * C.transpose();
  }
}

}  // namespace detail

/// Cross-correlation of input [C_in,H,W] with kernel [C_out,C_in,k,k].
/// Output is [C_out, H+2p-k+1, W+2p-k+1]; padding k/2 keeps the shape.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t padding) {
  if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != input.dim(0) || kernel.dim(2) != kernel.dim(3))
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                     shape_str(kernel.shape()));
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + shape_str(kernel.shape()));
  if (h + 2 * padding < k || w + 2 * padding < k)
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " smaller than kernel " +
                     shape_str(kernel.shape()));
  const std::size_t oh = h + 2 * padding - k + 1, ow = w + 2 * padding - k + 1;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  std::vector<T> out(cout * oh * ow, T(0));
  if (oh == h && ow == w) {
    detail::conv_forward_raw(input.values().data(), cin, h, w, kernel.values().data(), cout, k, pad, out.data());
  } else {
    // General padding: embed into a same-size computation over a padded copy.
    const std::size_t ph = h + 2 * padding, pw = w + 2 * padding;
    std::vector<T> padded(cin * ph * pw, T(0));
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t r = 0; r < h; ++r)
        std::copy_n(input.values().data() + (c * h + r) * w, w, padded.data() + (c * ph + r + padding) * pw + padding);
    std::vector<T> full(cout * ph * pw, T(0));
    detail::conv_forward_raw(padded.data(), cin, ph, pw, kernel.values().data(), cout, k,
                             static_cast<std::ptrdiff_t>(k / 2), full.data());
    const std::size_t off = k / 2;
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t r = 0; r < oh; ++r)
        std::copy_n(full.data() + (c * ph + r + off) * pw + off, ow, out.data() + (c * oh + r) * ow);
  }

  auto xn = input.node(), kn = kernel.node();
  return Tensor<T>::make_result(
      Shape{cout, oh, ow}, std::move(out), {input, kernel},
      [xn, kn, cin, cout, h, w, k, oh, ow, padding](detail::Node<T>& self) {
        const std::size_t ph = h + 2 * padding, pw = w + 2 * padding;
        const bool same = oh == h && ow == w;
        // Embed dy into padded-size frame so both paths reduce to same-padding convs.
        std::vector<T> dy_frame;
        const T* dy = self.grad.data();
        std::size_t fh = h, fw = w;
        std::vector<T> x_frame;
        const T* x = xn->value.data();
        if (!same) {
          fh = ph;
          fw = pw;
          dy_frame.assign(cout * ph * pw, T(0));
          const std::size_t off = k / 2;
          for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t r = 0; r < oh; ++r)
              std::copy_n(self.grad.data() + (c * oh + r) * ow, ow, dy_frame.data() + (c * ph + r + off) * pw + off);
          dy = dy_frame.data();
          x_frame.assign(cin * ph * pw, T(0));
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t r = 0; r < h; ++r)
              std::copy_n(xn->value.data() + (c * h + r) * w, w, x_frame.data() + (c * ph + r + padding) * pw + padding);
          x = x_frame.data();
        }
        const auto fpad = static_cast<std::ptrdiff_t>(k / 2);
        if (kn->requires_grad)
          detail::conv_kernel_grad_raw(x, cin, fh, fw, dy, cout, k, fpad, kn->grad.data());
        if (xn->requires_grad) {
          // Input gradient: correlate dy with the flipped, transposed kernel.
          std::vector<T> kt(cin * cout * k * k);
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = 0; b < k; ++b)
                  kt[((ci * cout + co) * k + (k - 1 - a)) * k + (k - 1 - b)] =
                      kn->value[((co * cin + ci) * k + a) * k + b];
          std::vector<T> dx(cin * fh * fw, T(0));
          detail::conv_forward_raw(dy, cout, fh, fw, kt.data(), cin, k, fpad, dx.data());
          if (same) {
            for (std::size_t i = 0; i < dx.size(); ++i) xn->grad[i] += dx[i];
          } else {
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t r = 0; r < h; ++r)
                for (std::size_t q = 0; q < w; ++q)
                  xn->grad[(c * h + r) * w + q] += dx[(c * fh + r + padding) * fw + q + padding];
          }
        }
      });
}

/// Adds bias[c] to every pixel of channel c of a [C,H,W] tensor.
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 3 || bias.size() != x.dim(0))
    throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] += bias.values()[i];
  auto xn = x.node(), bn = bias.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, bias}, [xn, bn, c, plane](detail::Node<T>& self) {
    if (xn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (std::size_t i = 0; i < c; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += self.grad[i * plane + p];
        bn->grad[i] += static_cast<T>(acc);
      }
  });
}

// ---------------------------------------------------------------------------
// Resolution changes and channel plumbing
// ---------------------------------------------------------------------------

/// 2x2 max-pool with stride 2 on [C,H,W]; H and W must be even.
template <class T>
Tensor<T> max_pool2(const Tensor<T>& x) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
    throw ShapeError("max_pool2: needs [C,H,W] with even H,W, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = h / 2, ow = w / 2;
  std::vector<T> out(c * oh * ow);
  std::vector<std::size_t> arg(out.size());
  const auto& xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t q = 0; q < ow; ++q) {
        std::size_t best = (ch * h + 2 * r) * w + 2 * q;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) {
            const std::size_t idx = (ch * h + 2 * r + a) * w + 2 * q + b;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ch * oh + r) * ow + q;
        out[o] = xv[best];
        arg[o] = best;
      }
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{c, oh, ow}, std::move(out), {x},
                                [xn, arg = std::move(arg)](detail::Node<T>& self) {
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[arg[i]] += self.grad[i];
                                });
}

/// Nearest-neighbour 2x upsampling on [C,H,W].
template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("upsample2: needs [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = 2 * h, ow = 2 * w;
  std::vector<T> out(c * oh * ow);
  const auto& xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t q = 0; q < ow; ++q) out[(ch * oh + r) * ow + q] = xv[(ch * h + r / 2) * w + q / 2];
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{c, oh, ow}, std::move(out), {x}, [xn, c, h, w, oh, ow](detail::Node<T>& self) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t q = 0; q < ow; ++q) xn->grad[(ch * h + r / 2) * w + q / 2] += self.grad[(ch * oh + r) * ow + q];
  });
}

/// Concatenates [C1,H,W] and [C2,H,W] along channels.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t na = a.size();
  auto an = a.node(), bn = b.node();
  return Tensor<T>::make_result(Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b},
                                [an, bn, na](detail::Node<T>& self) {
                                  if (an->requires_grad)
                                    for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
                                  if (bn->requires_grad)
                                    for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += self.grad[na + i];
                                });
}

/// Normalizes each pixel's channel vector of a [C,H,W] tensor to unit L2 norm.
template <class T>
Tensor<T> l2_normalize_channels(const Tensor<T>& x, T eps = T(1e-12)) {
  if (x.rank() != 3) throw ShapeError("l2_normalize_channels: needs [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  const auto& xv = x.values();
  std::vector<T> out(x.size());
  std::vector<T> norms(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) acc += static_cast<double>(xv[ch * plane + p]) * xv[ch * plane + p];
    const double n = std::max(std::sqrt(acc), static_cast<double>(eps));
    norms[p] = static_cast<T>(n);
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * plane + p] = static_cast<T>(xv[ch * plane + p] / n);
  }
  auto xn = x.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [xn, c, plane, norms = std::move(norms)](detail::Node<T>& self) {
                                  // dx = (g - y (g.y)) / n
                                  for (std::size_t p = 0; p < plane; ++p) {
                                    double gy = 0.0;
                                    bool any = false;
                                    for (std::size_t ch = 0; ch < c; ++ch) {
                                      const T g = self.grad[ch * plane + p];
                                      any = any || g != T(0);
                                      gy += static_cast<double>(g) * self.value[ch * plane + p];
                                    }
                                    if (!any) continue;
                                    for (std::size_t ch = 0; ch < c; ++ch) {
                                      const std::size_t i = ch * plane + p;
                                      xn->grad[i] += static_cast<T>((self.grad[i] - self.value[i] * gy) / norms[p]);
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Window statistics on [H,W] maps (used by the peaky baseline loss)
// ---------------------------------------------------------------------------

struct Window {
  std::size_t row, col, size;
};

/// Square windows of side `size` with the given stride; only windows fully
/// inside the map. At least one window exists when size <= min(H,W).
inline std::vector<Window> tile_windows(std::size_t h, std::size_t w, std::size_t size, std::size_t stride) {
  if (size == 0 || size > h || size > w)
    throw std::invalid_argument("tile_windows: window " + std::to_string(size) + " does not fit " +
                                std::to_string(h) + "x" + std::to_string(w));
  stride = std::max<std::size_t>(1, stride);
  std::vector<Window> out;
  for (std::size_t r = 0; r + size <= h; r += stride)
    for (std::size_t c = 0; c + size <= w; c += stride) out.push_back({r, c, size});
  return out;
}

/// Max of x inside each window; result shape [n_windows].
template <class T>
Tensor<T> window_max(const Tensor<T>& x, const std::vector<Window>& windows) {
  if (x.rank() != 2) throw ShapeError("window_max: needs [H,W], got " + shape_str(x.shape()));
  const std::size_t w = x.dim(1);
  std::vector<T> out(windows.size());
  std::vector<std::size_t> arg(windows.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& win = windows[i];
    std::size_t best = win.row * w + win.col;
    for (std::size_t r = win.row; r < win.row + win.size; ++r)
      for (std::size_t c = win.col; c < win.col + win.size; ++c)
        if (xv[r * w + c] > xv[best]) best = r * w + c;
    out[i] = xv[best];
    arg[i] = best;
  }
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{windows.size()}, std::move(out), {x}, [xn, arg = std::move(arg)](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[arg[i]] += self.grad[i];
  });
}

/// Mean of x inside each window; result shape [n_windows].
template <class T>
Tensor<T> window_mean(const Tensor<T>& x, const std::vector<Window>& windows) {
  if (x.rank() != 2) throw ShapeError("window_mean: needs [H,W], got " + shape_str(x.shape()));
  const std::size_t w = x.dim(1);
  std::vector<T> out(windows.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& win = windows[i];
    double acc = 0.0;
    for (std::size_t r = win.row; r < win.row + win.size; ++r)
      for (std::size_t c = win.col; c < win.col + win.size; ++c) acc += xv[r * w + c];
    out[i] = static_cast<T>(acc / static_cast<double>(win.size * win.size));
  }
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{windows.size()}, std::move(out), {x}, [xn, windows, w](detail::Node<T>& self) {
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const auto& win = windows[i];
      const T g = self.grad[i] / static_cast<T>(win.size * win.size);
      for (std::size_t r = win.row; r < win.row + win.size; ++r)
        for (std::size_t c = win.col; c < win.col + win.size; ++c) xn->grad[r * w + c] += g;
    }
  });
}

}  // namespace strek
