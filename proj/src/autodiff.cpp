#include "domix/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "domix/rng.hpp"

namespace domix::ad {

namespace {

std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;
thread_local FrozenValues* t_frozen = nullptr;
thread_local std::string t_fault_op;
thread_local double t_fault_factor = 1.0;

std::size_t threads_from_env() {
  if (const char* env = std::getenv("DOMIX_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

std::atomic<std::size_t> g_threads{threads_from_env()};

// Splits [0, n) into contiguous chunks. Each output element is owned by one
// chunk and reduced in a fixed order, so results do not depend on the
// thread count.
template <typename F>
void parallel_rows(std::size_t n, std::size_t work_per_row, F&& body) {
  std::size_t threads = g_threads.load(std::memory_order_relaxed);
  if (threads <= 1 || n < 2 || n * work_per_row < (1u << 15)) {
    body(std::size_t{0}, n);
    return;
  }
  threads = std::min(threads, n);
  const std::size_t chunk = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  for (std::size_t begin = chunk; begin < n; begin += chunk) {
    pool.emplace_back([&body, begin, end = std::min(n, begin + chunk)] { body(begin, end); });
  }
  body(std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

// c[n, m] += a[n, k] * b[k, m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  parallel_rows(n, k * m, [=](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double* __restrict ci = c + i * m;
      const double* ai = a + i * k;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
        const double* __restrict b0 = b + p * m;
        const double* __restrict b1 = b0 + m;
        const double* __restrict b2 = b1 + m;
        const double* __restrict b3 = b2 + m;
        for (std::size_t j = 0; j < m; ++j) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
      for (; p < k; ++p) {
        const double av = ai[p];
        const double* __restrict bp = b + p * m;
        for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
      }
    }
  });
}

// c[n, k] += g[n, m] * b[k, m]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t m,
             std::size_t k) {
  parallel_rows(n, k * m, [=](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* __restrict gi = g + i * m;
      double* ci = c + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double* __restrict bp = b + p * m;
        double acc[4] = {0.0, 0.0, 0.0, 0.0};
        std::size_t j = 0;
        for (; j + 4 <= m; j += 4) {
          acc[0] += gi[j] * bp[j];
          acc[1] += gi[j + 1] * bp[j + 1];
          acc[2] += gi[j + 2] * bp[j + 2];
          acc[3] += gi[j + 3] * bp[j + 3];
        }
        for (; j < m; ++j) acc[0] += gi[j] * bp[j];
        ci[p] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
      }
    }
  });
}

// c[k, m] += a[n, k]^T * g[n, m]
void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  parallel_rows(k, n * m, [=](std::size_t lo, std::size_t hi) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      const double* __restrict g0 = g + i * m;
      const double* __restrict g1 = g0 + m;
      const double* __restrict g2 = g1 + m;
      const double* __restrict g3 = g2 + m;
      for (std::size_t p = lo; p < hi; ++p) {
        const double a0 = a[i * k + p], a1 = a[(i + 1) * k + p], a2 = a[(i + 2) * k + p],
                     a3 = a[(i + 3) * k + p];
        double* __restrict cp = c + p * m;
        for (std::size_t j = 0; j < m; ++j) cp[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
      }
    }
    for (; i < n; ++i) {
      const double* __restrict gi = g + i * m;
      for (std::size_t p = lo; p < hi; ++p) {
        const double av = a[i * k + p];
        double* __restrict cp = c + p * m;
        for (std::size_t j = 0; j < m; ++j) cp[j] += av * gi[j];
      }
    }
  });
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<Node>> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(shape, std::vector<double>(numel_of(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from(shape, std::vector<double>(numel_of(shape), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

const char* Tensor::op() const { return node_->op; }

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node()};
  seen.insert(root.node());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    tape.nodes_.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const Tape tape = Tape::record(loss);
  for (Node* n : tape.nodes()) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (Node* n : tape.nodes()) {
    if (n->is_leaf || !n->backward_fn) continue;
    if (!t_fault_op.empty() && t_fault_op == n->op) {
      for (double& g : n->grad) g *= t_fault_factor;
    }
    n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void FrozenValues::push(std::span<const double> value) {
  values_.emplace_back(value.begin(), value.end());
}

const std::vector<double>& FrozenValues::next(std::size_t expected_numel) {
  if (cursor_ >= values_.size() || values_[cursor_].size() != expected_numel) {
    throw std::logic_error("frozen replay diverged from the recorded graph");
  }
  return values_[cursor_++];
}

FreezeScope::FreezeScope(FrozenValues& values) : previous_(t_frozen) { t_frozen = &values; }
FreezeScope::~FreezeScope() { t_frozen = previous_; }

void debug::inject_fault(const std::string& op, double factor) {
  t_fault_op = op;
  t_fault_factor = factor;
}

std::size_t intra_op_threads() { return g_threads.load(); }
void set_intra_op_threads(std::size_t n) { g_threads.store(std::max<std::size_t>(1, n)); }

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2) mismatch("matmul", as, bs);
  const std::size_t n = as[as.size() - 2];
  const std::size_t k = as.back();
  if (bs.size() == 2) {
    if (bs[0] != k) mismatch("matmul", as, bs);
    const std::size_t m = bs[1];
    const std::size_t rows = a.numel() / k;
    Shape out_shape = as;
    out_shape.back() = m;
    std::vector<double> out(rows * m, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, m);
    return make_op("matmul", std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                   [rows, k, m](Node& self) {
                     Node& na = *self.inputs[0];
                     Node& nb = *self.inputs[1];
                     if (na.requires_grad) {
                       gemm_nt(self.grad.data(), nb.value.data(), na.grad_buffer().data(), rows,
                               m, k);
                     }
                     if (nb.requires_grad) {
                       gemm_tn(na.value.data(), self.grad.data(), nb.grad_buffer().data(), rows,
                               k, m);
                     }
                   });
  }
  if (bs.size() != 3 || as.size() != 3 || bs[0] != as[0] || bs[1] != k) mismatch("matmul", as, bs);
  const std::size_t batch = as[0];
  const std::size_t m = bs[2];
  std::vector<double> out(batch * n * m, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(a.data().data() + t * n * k, b.data().data() + t * k * m, out.data() + t * n * m, n,
            k, m);
  }
  return make_op("matmul", {batch, n, m}, std::move(out), {a.node_ptr(), b.node_ptr()},
                 [batch, n, k, m](Node& self) {
                   Node& na = *self.inputs[0];
                   Node& nb = *self.inputs[1];
                   for (std::size_t t = 0; t < batch; ++t) {
                     const double* g = self.grad.data() + t * n * m;
                     if (na.requires_grad) {
                       gemm_nt(g, nb.value.data() + t * k * m, na.grad_buffer().data() + t * n * k,
                               n, m, k);
                     }
                     if (nb.requires_grad) {
                       gemm_tn(na.value.data() + t * n * k, g, nb.grad_buffer().data() + t * k * m,
                               n, k, m);
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw ShapeError("transpose expects rank 2 or 3, got " + shape_str(s));
  }
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s.back();
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = in[t * r * c + i * c + j];
    }
  }
  return make_op("transpose", std::move(out_shape), std::move(out), {a.node_ptr()},
                 [batch, r, c](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t t = 0; t < batch; ++t) {
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         g[t * r * c + i * c + j] += self.grad[t * r * c + j * r + i];
                       }
                     }
                   }
                 });
}

namespace {

Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, double sign_b) {
  if (a.shape() != b.shape()) mismatch(op, a.shape(), b.shape());
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sign_b > 0 ? x[i] + y[i] : x[i] - y[i];
  return make_op(op, a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                 [sign_b](Node& self) {
                   if (self.inputs[0]->requires_grad) add_into(self.inputs[0]->grad_buffer(), self.grad);
                   if (self.inputs[1]->requires_grad) {
                     auto& g = self.inputs[1]->grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign_b * self.grad[i];
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, 1.0); }

Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op("mul", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_op("scale", a.shape(), std::move(out), {a.node_ptr()}, [factor](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  return make_op("add_scalar", a.shape(), std::move(out), {a.node_ptr()}, [](Node& self) {
    add_into(self.inputs[0]->grad_buffer(), self.grad);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0)) {
    mismatch("add_bias", x.shape(), bias.shape());
  }
  const std::size_t m = bias.dim(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % m];
  return make_op("add_bias", x.shape(), std::move(out), {x.node_ptr(), bias.node_ptr()},
                 [m](Node& self) {
                   if (self.inputs[0]->requires_grad) add_into(self.inputs[0]->grad_buffer(), self.grad);
                   if (self.inputs[1]->requires_grad) {
                     auto& g = self.inputs[1]->grad_buffer();
                     for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % m] += self.grad[i];
                   }
                 });
}

Tensor row_scale(const Tensor& x, const Tensor& weights) {
  if (x.rank() != 2 || weights.numel() != x.dim(0) ||
      (weights.rank() == 2 && weights.dim(1) != 1) || weights.rank() > 2) {
    mismatch("row_scale", x.shape(), weights.shape());
  }
  const std::size_t rows = x.dim(0);
  const std::size_t m = x.dim(1);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto w = weights.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = xv[i * m + j] * w[i];
  }
  return make_op("row_scale", x.shape(), std::move(out), {x.node_ptr(), weights.node_ptr()},
                 [rows, m](Node& self) {
                   Node& nx = *self.inputs[0];
                   Node& nw = *self.inputs[1];
                   if (nx.requires_grad) {
                     auto& g = nx.grad_buffer();
                     for (std::size_t i = 0; i < rows; ++i) {
                       for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * nw.value[i];
                     }
                   }
                   if (nw.requires_grad) {
                     auto& g = nw.grad_buffer();
                     for (std::size_t i = 0; i < rows; ++i) {
                       double acc = 0.0;
                       for (std::size_t j = 0; j < m; ++j) acc += self.grad[i * m + j] * nx.value[i * m + j];
                       g[i] += acc;
                     }
                   }
                 });
}

// NaN wins, so a poisoned row propagates instead of reading as fully masked.
static double nan_max(double a, double b) { return std::isnan(a) || b <= a ? a : b; }

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * len * inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = nan_max(mx, in[base + i * inner]);
      if (mx == -std::numeric_limits<double>::infinity()) {
        throw std::domain_error("softmax over a fully masked row");
      }
      double total = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
    }
  }
  return make_op("softmax", s, std::move(out), {x.node_ptr()}, [outer, inner, len](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = o * len * inner + q;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += self.grad[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t at = base + i * inner;
          g[at] += y[at] * (self.grad[at] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax on scalar");
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = nan_max(mx, row[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::domain_error("log_softmax over a fully masked row");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = row[j] - lse;
  }
  return make_op("log_softmax", x.shape(), std::move(out), {x.node_ptr()}, [rows, m](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) total += self.grad[r * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        g[r * m + j] += self.grad[r * m + j] - std::exp(self.value[r * m + j]) * total;
      }
    }
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(in[i]);
  return make_op("log", x.shape(), std::move(out), {x.node_ptr()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& in = self.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / in[i];
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(in[i]);
  return make_op("exp", x.shape(), std::move(out), {x.node_ptr()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return make_op("relu", x.shape(), std::move(out), {x.node_ptr()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& in = self.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op("sum", {}, {total}, {x.node_ptr()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  const double n = static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op("mean", {}, {total / n}, {x.node_ptr()}, [n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0] / n;
  });
}

namespace {

Tensor reduce_last(const char* op, const Tensor& x, bool average) {
  if (x.rank() < 1) throw ShapeError(std::string(op) + " on scalar");
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows, 0.0);
  const auto in = x.data();
  const double div = average ? static_cast<double>(m) : 1.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += in[r * m + j];
    out[r] = acc / div;
  }
  return make_op(op, std::move(out_shape), std::move(out), {x.node_ptr()},
                 [rows, m, div](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double v = self.grad[r] / div;
                     for (std::size_t j = 0; j < m; ++j) g[r * m + j] += v;
                   }
                 });
}

}  // namespace

Tensor sum_last(const Tensor& x) { return reduce_last("sum_last", x, false); }

Tensor mean_last(const Tensor& x) { return reduce_last("mean_last", x, true); }

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) mismatch("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) mismatch("concat", first, s);
    }
    lens.push_back(s[ax]);
    total += s[ax];
  }
  Shape out_shape = first;
  out_shape[ax] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto in = parts[p].data();
    const std::size_t block = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(in.data() + o * block, block, out.data() + o * total * inner + offset * inner);
    }
    offset += lens[p];
    inputs.push_back(parts[p].node_ptr());
  }
  return make_op("concat", std::move(out_shape), std::move(out), std::move(inputs),
                 [outer, inner, total, lens](Node& self) {
                   std::size_t off = 0;
                   for (std::size_t p = 0; p < lens.size(); ++p) {
                     Node& in = *self.inputs[p];
                     const std::size_t block = lens[p] * inner;
                     if (in.requires_grad) {
                       auto& g = in.grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = self.grad.data() + o * total * inner + off * inner;
                         for (std::size_t i = 0; i < block; ++i) g[o * block + i] += src[i];
                       }
                     }
                     off += lens[p];
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  if (begin > end || end > s[ax]) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for shape " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  const std::size_t width = end - begin;
  Shape out_shape = s;
  out_shape[ax] = width;
  std::vector<double> out(outer * width * inner);
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.data() + o * len * inner + begin * inner, width * inner,
                out.data() + o * width * inner);
  }
  return make_op("slice", std::move(out_shape), std::move(out), {x.node_ptr()},
                 [outer, inner, len, begin, width](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t o = 0; o < outer; ++o) {
                     double* dst = g.data() + o * len * inner + begin * inner;
                     const double* src = self.grad.data() + o * width * inner;
                     for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) mismatch("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x.node_ptr()}, [](Node& self) {
    add_into(self.inputs[0]->grad_buffer(), self.grad);
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op("embedding_lookup", {ids.size(), d}, std::move(out), {table.node_ptr()},
                 [idx = std::move(idx), d](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     double* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
                     for (std::size_t j = 0; j < d; ++j) dst[j] += self.grad[i * d + j];
                   }
                 });
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value) {
  if (mask.size() != x.numel()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) +
                     " entries for tensor of shape " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  return make_op("masked_fill", x.shape(), std::move(out), {x.node_ptr()},
                 [keep = std::move(keep)](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     if (!keep[i]) g[i] += self.grad[i];
                   }
                 });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  if (x.rank() != 2 || x.dim(0) != index.size()) {
    throw ShapeError("pick: tensor " + shape_str(x.shape()) + " with " +
                     std::to_string(index.size()) + " indices");
  }
  const std::size_t m = x.dim(1);
  std::vector<double> out(index.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= m) {
      throw std::out_of_range("pick: index " + std::to_string(index[i]) + " outside [0, " +
                              std::to_string(m) + ")");
    }
    out[i] = in[i * m + static_cast<std::size_t>(index[i])];
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_op("pick", {index.size()}, std::move(out), {x.node_ptr()},
                 [idx = std::move(idx), m](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     g[i * m + static_cast<std::size_t>(idx[i])] += self.grad[i];
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2 || gain.shape() != Shape{x.dim(1)} || bias.shape() != gain.shape()) {
    mismatch("layer_norm", x.shape(), gain.shape());
  }
  const std::size_t rows = x.dim(0);
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  const auto in = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out),
                 {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
                 [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                   Node& nx = *self.inputs[0];
                   Node& ng = *self.inputs[1];
                   Node& nb = *self.inputs[2];
                   if (ng.requires_grad) {
                     auto& g = ng.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * xhat[r * d + j];
                     }
                   }
                   if (nb.requires_grad) {
                     auto& g = nb.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
                     }
                   }
                   if (nx.requires_grad) {
                     auto& g = nx.grad_buffer();
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double mean_dx = 0.0, mean_dx_xhat = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dxh = self.grad[r * d + j] * ng.value[j];
                         mean_dx += dxh;
                         mean_dx_xhat += dxh * xhat[r * d + j];
                       }
                       mean_dx *= inv_d;
                       mean_dx_xhat *= inv_d;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dxh = self.grad[r * d + j] * ng.value[j];
                         g[r * d + j] += rstd[r] * (dxh - mean_dx - xhat[r * d + j] * mean_dx_xhat);
                       }
                     }
                   }
                 });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
  return make_op("dropout", x.shape(), std::move(out), {x.node_ptr()},
                 [mask = std::move(mask)](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                 });
}

Tensor stop_gradient(const Tensor& x) {
  if (t_frozen != nullptr) {
    if (t_frozen->mode() == FrozenValues::Mode::record) {
      t_frozen->push(x.data());
    } else {
      return Tensor::from(x.shape(), t_frozen->next(x.numel()));
    }
  }
  return Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
}

Tensor scale_gradient(const Tensor& x, std::span<const double> factors) {
  const std::size_t m = x.rank() == 0 ? 1 : x.shape().back();
  if (factors.size() != m) {
    throw ShapeError("scale_gradient: " + std::to_string(factors.size()) +
                     " factors for tensor of shape " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  if (t_frozen != nullptr) {
    if (t_frozen->mode() == FrozenValues::Mode::record) {
      t_frozen->push(x.data());
    } else {
      // Same local derivative as the backward rule, with the remainder held
      // at the recorded value.
      const auto& frozen = t_frozen->next(x.numel());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double c = factors[i % m];
        out[i] = c * out[i] + (1.0 - c) * frozen[i];
      }
    }
  }
  std::vector<double> f(factors.begin(), factors.end());
  return make_op("scale_gradient", x.shape(), std::move(out), {x.node_ptr()},
                 [f = std::move(f), m](Node& self) {
                   auto& g = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += f[i % m] * self.grad[i];
                 });
}

Tensor scale_gradient(const Tensor& x, double factor) {
  const std::size_t m = x.rank() == 0 ? 1 : x.shape().back();
  std::vector<double> f(m, factor);
  return scale_gradient(x, f);
}

}  // namespace domix::ad
