#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A Tensor is a handle onto a graph node. Operations on tracked inputs record
// a node holding whatever activations the backward rule needs; backward()
// walks the graph once in reverse topological order. There is no general
// broadcasting: every binary op requires identical shapes, except add_bias
// which broadcasts a vector over the last axis.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace slmt::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Raised when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& kind, const std::vector<Shape>& shapes,
             const std::string& detail = {});

  const std::string& kind() const noexcept { return kind_; }
  const std::vector<Shape>& shapes() const noexcept { return shapes_; }

 private:
  std::string kind_;
  std::vector<Shape> shapes_;
};

// Misuse of the graph: non-scalar loss, untracked loss, repeated backward.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  std::uint64_t id = 0;
  std::string kind;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }
  const std::string& kind() const { return node_->kind; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->value; }
  // Direct write access for leaves (parameter updates, test perturbations).
  std::span<T> mutable_data();
  T item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

struct BackwardReport {
  std::size_t nodes_visited = 0;
};

// Populates grad on every tracked node reachable from `loss`. The loss must be
// a tracked scalar. Calling it twice on the same graph, or while a reachable
// leaf still holds a gradient from an earlier pass (no zero_grad), throws.
template <typename T>
BackwardReport backward(const Tensor<T>& loss);

// ---- primitives ------------------------------------------------------------

// a: [..., k]; b: [k, n] (or [n, k] when transpose_b). Result [..., n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// a: [B, m, k]; b: [B, k, n] (or [B, n, k] when transpose_b). Result [B, m, n].
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// x: [..., n]; bias: [n].
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Softmax over the last axis. Each row has its max subtracted first.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

// Normalizes each vector along the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

// table: [V, d]. Result shape is index_shape + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    const Shape& index_shape);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// Mean along `axis` over positions whose mask entry is nonzero. The mask is
// laid out as shape[0..axis] (row-major). Every reduced group needs at least
// one unmasked position.
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, std::span<const std::uint8_t> mask, std::size_t axis);

// x: [b, ...] -> [b], Euclidean norm of each leading slice. The gradient at a
// zero slice is taken as zero.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x);

// Row-wise cosine of [n, d] operands -> [n]; rank-1 operands give a scalar.
// Each norm is offset by 1e-8.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b);

// Inverted dropout. Identity (the same tensor) when !training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng);

// Axis permutation; result axis i is input axis perm[i].
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::size_t>& perm);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Mean over rows with weight[r] != 0 of the smoothed cross-entropy
// -sum_c q_c log softmax(logits_r)_c with q = (1 - eps) one_hot + eps / V.
template <typename T>
Tensor<T> label_smoothed_cross_entropy(const Tensor<T>& logits,
                                       std::span<const std::int32_t> targets,
                                       std::span<const std::uint8_t> weight, T eps);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// x: [n, ...] -> [indices.size(), ...].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);

// ---- gradient verification -------------------------------------------------

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are compared absolutely below this magnitude.
  double floor = 1e-4;
  // 0 checks every coordinate; otherwise a seeded subset of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::vector<std::size_t> coords;
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Compares backward() against central differences of `f` around `x`. `x` must
// be a tracked leaf; f must be deterministic. Throws if f is non-finite at a
// probe point.
GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, const GradCheckOptions& options = {});

}  // namespace slmt::ad
