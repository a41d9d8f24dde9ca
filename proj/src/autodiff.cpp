#include "slmt/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace slmt::ad {

namespace {

thread_local bool tls_grad_enabled = true;
std::atomic<std::uint64_t> next_node_id{1};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
std::shared_ptr<Node<T>> new_node(std::string kind, Shape shape, std::vector<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->kind = std::move(kind);
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

template <typename T>
bool any_tracked(std::initializer_list<const Tensor<T>*> inputs) {
  if (!tls_grad_enabled) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds the result node and, when any input is tracked, wires its backward.
template <typename T>
Tensor<T> record(std::string kind, Shape shape, std::vector<T> value,
                 std::vector<std::shared_ptr<Node<T>>> inputs, bool tracked,
                 std::function<void(Node<T>&)> backward_fn) {
  auto node = new_node<T>(std::move(kind), std::move(shape), std::move(value));
  if (tracked) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

void require_same(const std::string& kind, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(kind, {a, b});
}

void require_defined(bool defined, const std::string& kind) {
  if (!defined) throw ShapeError(kind, {}, "undefined tensor operand");
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::string shape_message(const std::string& kind, const std::vector<Shape>& shapes,
                          const std::string& detail) {
  std::string msg = kind + ": shape mismatch";
  for (const auto& s : shapes) msg += " " + to_string(s);
  if (!detail.empty()) msg += " (" + detail + ")";
  return msg;
}
}  // namespace

ShapeError::ShapeError(const std::string& kind, const std::vector<Shape>& shapes,
                       const std::string& detail)
    : std::invalid_argument(shape_message(kind, shapes, detail)), kind_(kind), shapes_(shapes) {}

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(ad::numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (ad::numel(shape) != data.size()) {
    throw ShapeError("from_data", {shape}, "data holds " + std::to_string(data.size()) + " values");
  }
  auto node = new_node<T>("leaf", std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("dim", {shape()}, "axis " + std::to_string(axis));
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf()) throw GraphError("mutable_data on a non-leaf tensor");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item", {shape()}, "expected one element");
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(shape(), node_->value, false);
}

// ---- backward --------------------------------------------------------------

template <typename T>
BackwardReport backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw GraphError("backward: loss is not tracked");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  Node<T>* root = loss.node().get();
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (Node<T>* node : order) {
    if (node->consumed) {
      throw GraphError("backward: graph already differentiated (node " + node->kind + ")");
    }
    if (node->is_leaf() && !node->grad.empty()) {
      throw GraphError("backward: leaf holds a gradient from an earlier pass; call zero_grad()");
    }
  }

  root->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf()) continue;
    node->consumed = true;
    if (!node->grad.empty() && node->backward_fn) node->backward_fn(*node);
    // Saved activations are no longer needed.
    node->backward_fn = nullptr;
    if (node != root) std::vector<T>().swap(node->grad);
  }
  return {order.size()};
}

// ---- primitives ------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_defined(a.defined() && b.defined(), "matmul");
  if (a.rank() < 1 || b.rank() != 2) throw ShapeError("matmul", {a.shape(), b.shape()});
  const std::size_t k = a.shape().back();
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) throw ShapeError("matmul", {a.shape(), b.shape()}, "inner dimensions differ");
  const std::size_t m = k == 0 ? 0 : a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(m * n);
  ConstMapMat<T> A(a.data().data(), m, k);
  MapMat<T> C(out.data(), m, n);
  if (transpose_b) {
    ConstMapMat<T> B(b.data().data(), n, k);
    C.noalias() = A * B.transpose();
  } else {
    ConstMapMat<T> B(b.data().data(), k, n);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  return record<T>("matmul", std::move(out_shape), std::move(out), {an, bn}, any_tracked<T>({&a, &b}),
                   [an, bn, m, k, n, transpose_b](Node<T>& self) {
                     ConstMapMat<T> dC(self.grad.data(), m, n);
                     ConstMapMat<T> A(an->value.data(), m, k);
                     if (an->requires_grad) {
                       MapMat<T> dA(an->ensure_grad().data(), m, k);
                       if (transpose_b) {
                         dA.noalias() += dC * ConstMapMat<T>(bn->value.data(), n, k);
                       } else {
                         dA.noalias() += dC * ConstMapMat<T>(bn->value.data(), k, n).transpose();
                       }
                     }
                     if (bn->requires_grad) {
                       if (transpose_b) {
                         MapMat<T> dB(bn->ensure_grad().data(), n, k);
                         dB.noalias() += dC.transpose() * A;
                       } else {
                         MapMat<T> dB(bn->ensure_grad().data(), k, n);
                         dB.noalias() += A.transpose() * dC;
                       }
                     }
                   });
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_defined(a.defined() && b.defined(), "batched_matmul");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("batched_matmul", {a.shape(), b.shape()});
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (k != kb) {
    throw ShapeError("batched_matmul", {a.shape(), b.shape()}, "inner dimensions differ");
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMapMat<T> A(a.data().data() + i * m * k, m, k);
    MapMat<T> C(out.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * ConstMapMat<T>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * ConstMapMat<T>(b.data().data() + i * k * n, k, n);
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return record<T>(
      "batched_matmul", {batch, m, n}, std::move(out), {an, bn}, any_tracked<T>({&a, &b}),
      [an, bn, batch, m, k, n, transpose_b](Node<T>& self) {
        T* da = an->requires_grad ? an->ensure_grad().data() : nullptr;
        T* db = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMapMat<T> dC(self.grad.data() + i * m * n, m, n);
          ConstMapMat<T> A(an->value.data() + i * m * k, m, k);
          if (transpose_b) {
            ConstMapMat<T> B(bn->value.data() + i * n * k, n, k);
            if (da) MapMat<T>(da + i * m * k, m, k).noalias() += dC * B;
            if (db) MapMat<T>(db + i * n * k, n, k).noalias() += dC.transpose() * A;
          } else {
            ConstMapMat<T> B(bn->value.data() + i * k * n, k, n);
            if (da) MapMat<T>(da + i * m * k, m, k).noalias() += dC * B.transpose();
            if (db) MapMat<T>(db + i * k * n, k, n).noalias() += A.transpose() * dC;
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a.defined() && b.defined(), "add");
  require_same("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  return record<T>("add", a.shape(), std::move(out), {an, bn}, any_tracked<T>({&a, &b}),
                   [an, bn](Node<T>& self) {
                     for (auto* in : {an.get(), bn.get()}) {
                       if (!in->requires_grad) continue;
                       auto& g = in->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     }
                   });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a.defined() && b.defined(), "sub");
  require_same("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  auto an = a.node();
  auto bn = b.node();
  return record<T>("sub", a.shape(), std::move(out), {an, bn}, any_tracked<T>({&a, &b}),
                   [an, bn](Node<T>& self) {
                     if (an->requires_grad) {
                       auto& g = an->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     }
                     if (bn->requires_grad) {
                       auto& g = bn->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                     }
                   });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a.defined() && b.defined(), "mul");
  require_same("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  return record<T>("mul", a.shape(), std::move(out), {an, bn}, any_tracked<T>({&a, &b}),
                   [an, bn](Node<T>& self) {
                     if (an->requires_grad) {
                       auto& g = an->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
                     }
                     if (bn->requires_grad) {
                       auto& g = bn->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
                     }
                   });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_defined(x.defined() && bias.defined(), "add_bias");
  if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.shape().back()) {
    throw ShapeError("add_bias", {x.shape(), bias.shape()});
  }
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.data().begin(), x.data().end());
  const T* pb = bias.data().data();
  for (std::size_t row = 0; row < out.size(); row += n) {
    for (std::size_t j = 0; j < n; ++j) out[row + j] += pb[j];
  }
  auto xn = x.node();
  auto bn = bias.node();
  return record<T>("add_bias", x.shape(), std::move(out), {xn, bn}, any_tracked<T>({&x, &bias}),
                   [xn, bn, n](Node<T>& self) {
                     if (xn->requires_grad) {
                       auto& g = xn->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     }
                     if (bn->requires_grad) {
                       auto& g = bn->ensure_grad();
                       for (std::size_t row = 0; row < self.grad.size(); row += n) {
                         for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[row + j];
                       }
                     }
                   });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  require_defined(x.defined(), "scale");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto xn = x.node();
  return record<T>("scale", x.shape(), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, factor](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  require_defined(x.defined(), "relu");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto xn = x.node();
  return record<T>("relu", x.shape(), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       if (xn->value[i] > T(0)) g[i] += self.grad[i];
                     }
                   });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require_defined(x.defined(), "softmax");
  if (x.rank() < 1 || x.shape().back() == 0) {
    throw ShapeError("softmax", {x.shape()}, "empty softmax axis");
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * n;
    T* o = out.data() + r * n;
    T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  auto xn = x.node();
  return record<T>("softmax", x.shape(), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, n, rows](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* y = self.value.data() + r * n;
                       const T* dy = self.grad.data() + r * n;
                       T dot = 0;
                       for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                       for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
                     }
                   });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_defined(x.defined() && gain.defined() && bias.defined(), "layer_norm");
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.shape().back() ||
      bias.dim(0) != x.shape().back() || x.shape().back() == 0) {
    throw ShapeError("layer_norm", {x.shape(), gain.shape(), bias.shape()});
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> normed(x.numel());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T xh = (in[j] - mu) * is;
      normed[r * n + j] = xh;
      out[r * n + j] = xh * pg[j] + pb[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return record<T>(
      "layer_norm", x.shape(), std::move(out), {xn, gn, bn}, any_tracked<T>({&x, &gain, &bias}),
      [xn, gn, bn, n, rows, normed = std::move(normed), inv_std = std::move(inv_std)](Node<T>& self) {
        const T* dy = self.grad.data();
        if (gn->requires_grad || bn->requires_grad) {
          T* dg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
          T* db = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              if (dg) dg[j] += dy[r * n + j] * normed[r * n + j];
              if (db) db[j] += dy[r * n + j];
            }
          }
        }
        if (xn->requires_grad) {
          auto& g = xn->ensure_grad();
          const T* pg = gn->value.data();
          std::vector<T> dxh(n);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dxh[j] = dy[r * n + j] * pg[j];
              mean_d += dxh[j];
              mean_dx += dxh[j] * normed[r * n + j];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              g[r * n + j] += inv_std[r] * (dxh[j] - mean_d - normed[r * n + j] * mean_dx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    const Shape& index_shape) {
  require_defined(table.defined(), "embedding");
  if (table.rank() != 2 || numel(index_shape) != ids.size()) {
    throw ShapeError("embedding", {table.shape(), index_shape},
                     "ids hold " + std::to_string(ids.size()) + " entries");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  const T* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  auto tn = table.node();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return record<T>("embedding", std::move(out_shape), std::move(out), {tn}, any_tracked<T>({&table}),
                   [tn, d, saved = std::move(saved)](Node<T>& self) {
                     auto& g = tn->ensure_grad();
                     for (std::size_t i = 0; i < saved.size(); ++i) {
                       T* row = g.data() + static_cast<std::size_t>(saved[i]) * d;
                       for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
                     }
                   });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", {}, "no operands");
  std::vector<Shape> shapes;
  for (const auto& p : parts) {
    require_defined(p.defined(), "concat");
    shapes.push_back(p.shape());
  }
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", shapes, "axis " + std::to_string(axis));
  std::size_t total = 0;
  for (const auto& s : shapes) {
    if (s.size() != first.size()) throw ShapeError("concat", shapes, "rank differs");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) throw ShapeError("concat", shapes);
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * w, w, out.data() + o * total * inner + offset);
    }
    offset += w;
  }
  std::vector<std::shared_ptr<Node<T>>> inputs;
  bool tracked = false;
  for (const auto& p : parts) {
    inputs.push_back(p.node());
    tracked = tracked || p.requires_grad();
  }
  tracked = tracked && tls_grad_enabled;
  auto saved_inputs = inputs;
  return record<T>("concat", std::move(out_shape), std::move(out), std::move(inputs), tracked,
                   [saved_inputs, widths, outer, total, inner](Node<T>& self) {
                     std::size_t off = 0;
                     for (std::size_t p = 0; p < saved_inputs.size(); ++p) {
                       const std::size_t w = widths[p];
                       if (saved_inputs[p]->requires_grad) {
                         auto& g = saved_inputs[p]->ensure_grad();
                         for (std::size_t o = 0; o < outer; ++o) {
                           const T* src = self.grad.data() + o * total * inner + off;
                           T* dst = g.data() + o * w;
                           for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                         }
                       }
                       off += w;
                     }
                   });
}

template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, std::span<const std::uint8_t> mask, std::size_t axis) {
  require_defined(x.defined(), "masked_mean");
  if (axis >= x.rank()) throw ShapeError("masked_mean", {x.shape()}, "axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  if (mask.size() != outer * n) {
    throw ShapeError("masked_mean", {x.shape(), {mask.size()}}, "mask size");
  }
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  std::vector<T> out(outer * inner, T(0));
  std::vector<T> counts(outer, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < n; ++t) {
      if (!mask[o * n + t]) continue;
      counts[o] += T(1);
      const T* row = px + (o * n + t) * inner;
      for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += row[j];
    }
    if (counts[o] == T(0)) {
      throw std::invalid_argument("masked_mean: group " + std::to_string(o) + " is fully masked");
    }
    for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] /= counts[o];
  }
  auto xn = x.node();
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return record<T>("masked_mean", std::move(out_shape), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, outer, inner, n, saved = std::move(saved), counts = std::move(counts)](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t t = 0; t < n; ++t) {
                         if (!saved[o * n + t]) continue;
                         T* row = g.data() + (o * n + t) * inner;
                         for (std::size_t j = 0; j < inner; ++j) row[j] += self.grad[o * inner + j] / counts[o];
                       }
                     }
                   });
}

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  require_defined(x.defined(), "l2_norm");
  if (x.rank() < 1) throw ShapeError("l2_norm", {x.shape()}, "needs a leading axis");
  const std::size_t b = x.dim(0);
  const std::size_t w = b == 0 ? 0 : x.numel() / b;
  std::vector<T> out(b);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < b; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < w; ++j) s += px[i * w + j] * px[i * w + j];
    out[i] = std::sqrt(s);
  }
  auto xn = x.node();
  return record<T>("l2_norm", {b}, std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, b, w](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t i = 0; i < b; ++i) {
                       const T norm = self.value[i];
                       if (norm == T(0)) continue;
                       const T coef = self.grad[i] / norm;
                       for (std::size_t j = 0; j < w; ++j) g[i * w + j] += coef * xn->value[i * w + j];
                     }
                   });
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a.defined() && b.defined(), "cosine_similarity");
  require_same("cosine_similarity", a.shape(), b.shape());
  if (a.rank() != 1 && a.rank() != 2) throw ShapeError("cosine_similarity", {a.shape(), b.shape()});
  const bool vector_form = a.rank() == 1;
  const std::size_t n = vector_form ? 1 : a.dim(0);
  const std::size_t d = vector_form ? a.dim(0) : a.dim(1);
  constexpr T kEps = T(1e-8);
  std::vector<T> out(n), dots(n), na(n), nb(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T dot = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += pa[i * d + j] * pb[i * d + j];
      sa += pa[i * d + j] * pa[i * d + j];
      sb += pb[i * d + j] * pb[i * d + j];
    }
    dots[i] = dot;
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    out[i] = dot / ((na[i] + kEps) * (nb[i] + kEps));
  }
  Shape out_shape = vector_form ? Shape{} : Shape{n};
  auto an = a.node();
  auto bn = b.node();
  return record<T>(
      "cosine_similarity", std::move(out_shape), std::move(out), {an, bn}, any_tracked<T>({&a, &b}),
      [an, bn, n, d, na = std::move(na), nb = std::move(nb)](Node<T>& self) {
        // d cos / d a = b / p - cos * a / (|a| (|a| + eps)), p = (|a|+eps)(|b|+eps)
        auto grad_side = [&](Node<T>* self_side, Node<T>* other, const std::vector<T>& ns,
                             const std::vector<T>& no) {
          auto& g = self_side->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            const T p = (ns[i] + kEps) * (no[i] + kEps);
            const T c = self.value[i];
            const T up = self.grad[i];
            const T radial = ns[i] > T(0) ? c / (ns[i] * (ns[i] + kEps)) : T(0);
            for (std::size_t j = 0; j < d; ++j) {
              g[i * d + j] += up * (other->value[i * d + j] / p - radial * self_side->value[i * d + j]);
            }
          }
        };
        if (an->requires_grad) grad_side(an.get(), bn.get(), na, nb);
        if (bn->requires_grad) grad_side(bn.get(), an.get(), nb, na);
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng) {
  require_defined(x.defined(), "dropout");
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> keep(x.numel());
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < keep.size(); ++i) {
    // 53-bit uniform draw, independent of the standard library's distributions.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    keep[i] = u >= p ? keep_scale : T(0);
    out[i] = px[i] * keep[i];
  }
  auto xn = x.node();
  return record<T>("dropout", x.shape(), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, keep = std::move(keep)](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
                   });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  require_defined(x.defined(), "transpose");
  const std::size_t r = x.rank();
  std::vector<bool> used(r, false);
  if (perm.size() != r) throw ShapeError("transpose", {x.shape()}, "permutation rank");
  for (auto p : perm) {
    if (p >= r || used[p]) throw ShapeError("transpose", {x.shape()}, "invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[perm[i]];
  const std::size_t inner = r == 0 ? 1 : out_shape[r - 1];
  const std::size_t inner_stride = r == 0 ? 1 : strides[r - 1];
  // Visits destination rows (runs over the last output axis) with the matching
  // source offset; the source is read with stride inner_stride along the run.
  auto for_each_run = [out_shape, strides, inner, r](auto&& fn) {
    const std::size_t total = numel(out_shape);
    if (total == 0) return;
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t dst = 0; dst < total; dst += inner) {
      std::size_t off = 0;
      for (std::size_t i = 0; i + 1 < r; ++i) off += idx[i] * strides[i];
      fn(dst, off);
      for (std::size_t i = r - 1; i-- > 0;) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  };
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for_each_run([&](std::size_t dst, std::size_t src) {
    for (std::size_t k = 0; k < inner; ++k) out[dst + k] = px[src + k * inner_stride];
  });
  auto xn = x.node();
  return record<T>("transpose", std::move(out_shape), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, for_each_run, inner, inner_stride](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     const T* pg = self.grad.data();
                     for_each_run([&](std::size_t dst, std::size_t src) {
                       for (std::size_t k = 0; k < inner; ++k) g[src + k * inner_stride] += pg[dst + k];
                     });
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined(x.defined(), "reshape");
  if (numel(shape) != x.numel()) throw ShapeError("reshape", {x.shape(), shape});
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return record<T>("reshape", std::move(shape), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                   });
}

template <typename T>
Tensor<T> label_smoothed_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                       std::span<const std::uint8_t> weight, T eps) {
  require_defined(logits.defined(), "label_smoothed_cross_entropy");
  if (logits.rank() != 2 || targets.size() != logits.dim(0) || weight.size() != logits.dim(0)) {
    throw ShapeError("label_smoothed_cross_entropy", {logits.shape(), {targets.size()}, {weight.size()}});
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (vocab == 0) throw ShapeError("label_smoothed_cross_entropy", {logits.shape()}, "empty softmax axis");
  std::size_t count = 0;
  for (auto w : weight) count += w ? 1 : 0;
  if (count == 0) throw std::invalid_argument("label_smoothed_cross_entropy: every target is padding");
  const T uniform = eps / T(vocab);
  std::vector<T> probs(logits.numel());
  T total = 0;
  const T* px = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (!weight[r]) continue;
    const auto target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw std::out_of_range("label_smoothed_cross_entropy: target " + std::to_string(target));
    }
    const T* in = px + r * vocab;
    const T mx = *std::max_element(in, in + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(in[j] - mx);
    const T lse = mx + std::log(z);
    T sum_logp = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const T logp = in[j] - lse;
      sum_logp += logp;
      probs[r * vocab + j] = std::exp(logp);
    }
    const T logp_target = in[target] - lse;
    total += -((T(1) - eps) * logp_target + uniform * sum_logp);
  }
  const T inv_count = T(1) / T(count);
  auto ln = logits.node();
  std::vector<std::int32_t> saved_targets(targets.begin(), targets.end());
  std::vector<std::uint8_t> saved_weight(weight.begin(), weight.end());
  return record<T>("label_smoothed_cross_entropy", {}, {total * inv_count}, {ln}, any_tracked<T>({&logits}),
                   [ln, rows, vocab, eps, uniform, inv_count, probs = std::move(probs),
                    saved_targets = std::move(saved_targets),
                    saved_weight = std::move(saved_weight)](Node<T>& self) {
                     auto& g = ln->ensure_grad();
                     const T up = self.grad[0] * inv_count;
                     for (std::size_t r = 0; r < rows; ++r) {
                       if (!saved_weight[r]) continue;
                       for (std::size_t j = 0; j < vocab; ++j) {
                         T q = uniform;
                         if (static_cast<std::int32_t>(j) == saved_targets[r]) q += T(1) - eps;
                         g[r * vocab + j] += up * (probs[r * vocab + j] - q);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x.defined(), "sum");
  T total = 0;
  for (T v : x.data()) total += v;
  auto xn = x.node();
  return record<T>("sum", {}, {total}, {xn}, any_tracked<T>({&x}), [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x.defined(), "mean");
  if (x.numel() == 0) throw ShapeError("mean", {x.shape()}, "empty tensor");
  T total = 0;
  for (T v : x.data()) total += v;
  const T inv = T(1) / T(x.numel());
  auto xn = x.node();
  return record<T>("mean", {}, {total * inv}, {xn}, any_tracked<T>({&x}), [xn, inv](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  require_defined(x.defined(), "gather_rows");
  if (x.rank() < 1) throw ShapeError("gather_rows", {x.shape()});
  const std::size_t n = x.dim(0);
  const std::size_t w = n == 0 ? 0 : x.numel() / n;
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<T> out(indices.size() * w);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) {
      throw std::out_of_range("gather_rows: row " + std::to_string(indices[i]) + " of " + std::to_string(n));
    }
    std::copy_n(x.data().data() + indices[i] * w, w, out.data() + i * w);
  }
  auto xn = x.node();
  std::vector<std::size_t> saved(indices.begin(), indices.end());
  return record<T>("gather_rows", std::move(out_shape), std::move(out), {xn}, any_tracked<T>({&x}),
                   [xn, w, saved = std::move(saved)](Node<T>& self) {
                     auto& g = xn->ensure_grad();
                     for (std::size_t i = 0; i < saved.size(); ++i) {
                       for (std::size_t j = 0; j < w; ++j) g[saved[i] * w + j] += self.grad[i * w + j];
                     }
                   });
}

// ---- grad_check ------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, const GradCheckOptions& options) {
  if (!x.requires_grad() || !x.node()->is_leaf()) {
    throw GraphError("grad_check: x must be a tracked leaf");
  }
  x.zero_grad();
  Tensor<double> y = f(x);
  if (y.numel() != 1) throw GraphError("grad_check: f must return a scalar");
  std::vector<double> analytic(x.numel(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
  }
  x.zero_grad();

  GradCheckReport report;
  if (options.max_coords == 0 || options.max_coords >= x.numel()) {
    report.coords.resize(x.numel());
    std::iota(report.coords.begin(), report.coords.end(), std::size_t{0});
  } else {
    std::vector<std::size_t> all(x.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::mt19937_64 rng(options.seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(options.max_coords);
    std::sort(all.begin(), all.end());
    report.coords = std::move(all);
  }

  NoGradGuard no_grad;
  auto values = x.mutable_data();
  for (std::size_t c : report.coords) {
    const double original = values[c];
    values[c] = original + options.step;
    const double plus = f(x).item();
    values[c] = original - options.step;
    const double minus = f(x).item();
    values[c] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw std::domain_error("grad_check: f is not finite at coordinate " + std::to_string(c));
    }
    const double numeric = (plus - minus) / (2.0 * options.step);
    const double a = analytic[c];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    const double rel = std::abs(a - numeric) / denom;
    report.analytic.push_back(a);
    report.numeric.push_back(numeric);
    report.rel_error.push_back(rel);
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

// ---- instantiations --------------------------------------------------------

#define SLMT_INSTANTIATE(T)                                                                        \
  template class Tensor<T>;                                                                        \
  template BackwardReport backward(const Tensor<T>&);                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                             \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, bool);                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> softmax(const Tensor<T>&);                                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, const Shape&);     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                           \
  template Tensor<T> masked_mean(const Tensor<T>&, std::span<const std::uint8_t>, std::size_t);    \
  template Tensor<T> l2_norm(const Tensor<T>&);                                                    \
  template Tensor<T> cosine_similarity(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64&);                    \
  template Tensor<T> transpose(const Tensor<T>&, const std::vector<std::size_t>&);                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> label_smoothed_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, \
                                                  std::span<const std::uint8_t>, T);               \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);

SLMT_INSTANTIATE(float)
SLMT_INSTANTIATE(double)

#undef SLMT_INSTANTIATE

}  // namespace slmt::ad
