#pragma once

// Dense row-major tensors with reverse-mode gradient accumulation.
//
// Every op returns a fresh Tensor whose node remembers its inputs and a
// backward rule. Nodes carry a monotonically increasing sequence number, so
// creation order is a valid topological order of the graph; backward()
// replays the reachable nodes in reverse sequence order exactly once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace domix {
class Rng;
}

namespace domix::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t numel_of(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward_fn;

  // Allocates (zeroed) gradient storage on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; meant for parameters and test fixtures only.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  // Gradient of a leaf after backward(); empty if none was accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  const char* op() const;
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Reverse topological record of everything reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root);
  std::span<Node* const> nodes() const { return nodes_; }

 private:
  std::vector<Node*> nodes_;
};

// Accumulates d(loss)/d(leaf) into every requires-grad leaf. Interior
// gradients are reset on each call; leaf gradients add up until zero_grad().
void backward(const Tensor& loss);

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Record/replay of stop_gradient and scale_gradient inputs. Finite
// differences evaluated under Replay treat detached values as the constants
// they are for the analytic gradient, which makes surrogate gradients
// checkable.
class FrozenValues {
 public:
  enum class Mode { record, replay };

  explicit FrozenValues(Mode mode) : mode_(mode) {}
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) {
    mode_ = mode;
    cursor_ = 0;
  }
  std::size_t size() const { return values_.size(); }

  void push(std::span<const double> value);
  const std::vector<double>& next(std::size_t expected_numel);

 private:
  Mode mode_;
  std::vector<std::vector<double>> values_;
  std::size_t cursor_ = 0;
};

class FreezeScope {
 public:
  explicit FreezeScope(FrozenValues& values);
  ~FreezeScope();
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;

 private:
  FrozenValues* previous_;
};

namespace debug {
// Negative-control hook: multiplies the incoming gradient of every node with
// the given op name by `factor` during backward. Empty name clears it.
void inject_fault(const std::string& op, double factor);
}  // namespace debug

// Threads used by the large matmul kernels (DOMIX_THREADS, default 1).
std::size_t intra_op_threads();
void set_intra_op_threads(std::size_t n);

// ---- primitives -----------------------------------------------------------

// a: [..., n, k]. b: [k, m] (shared weight) or [B, k, m] with a [B, n, k].
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// x: [..., m] plus bias b: [m] over all leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x: [N, m] times per-row weight w: [N] or [N, 1].
Tensor row_scale(const Tensor& x, const Tensor& weights);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reductions over the last axis: [..., m] -> [...].
Tensor sum_last(const Tensor& x);
Tensor mean_last(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
// table: [V, d]; returns [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// Entries where mask != 0 are replaced by `value` and receive no gradient.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value);
// x: [N, m]; returns [N] with x[i, index[i]].
Tensor pick(const Tensor& x, std::span<const int> index);
// Normalizes each row of x: [N, d]; gain and bias are [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// Forward copy with no backward edge.
Tensor stop_gradient(const Tensor& x);
// Forward identity; backward multiplies the gradient by `factor`.
Tensor scale_gradient(const Tensor& x, double factor);
// Per-coordinate variant: factors[j] scales coordinate j of the last axis.
Tensor scale_gradient(const Tensor& x, std::span<const double> factors);

}  // namespace domix::ad
