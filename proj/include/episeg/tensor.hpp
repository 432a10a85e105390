#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace episeg {

class Rng;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense float64 tensor. A Tensor is a shared handle onto its storage; copies
// alias the same buffer. Gradients live in a same-shape buffer that exists
// exactly when requires_grad() is true. Every op validates that its output is
// finite and throws std::runtime_error otherwise.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t rank() const;
  std::int64_t size() const;
  std::int64_t extent(std::int64_t dim) const;

  // Handle semantics follow std::shared_ptr: a const Tensor is a const
  // handle, not const storage, so these stay callable on const handles.
  std::span<double> data() const;
  std::span<double> grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  void zero_grad() const;

  // Value of a single-element tensor.
  double item() const;

  // Stable identity of the underlying storage, for keying optimizer state.
  const void* id() const;

  bool is_leaf() const;
  Tensor clone() const;  // deep copy, detached (leaf), keeps requires_grad

 private:
  struct Node;
  friend class Tape;
  friend Tensor op_output(class Tape&, Shape, bool);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Records the forward pass of a computation so it can be replayed backwards.
// Steps are appended in execution order; backward() walks them in exact
// reverse order and accumulates gradients additively into every tensor that
// requires them. A Tape and the tensors recorded on it are confined to one
// thread; independent tapes may run concurrently.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t num_steps() const { return steps_.size(); }

  void record_step(std::function<void()> backward_step);
  void register_output(const Tensor& t);
  bool owns(const Tensor& t) const;

  // Seeds d(loss)/d(loss) = 1 and replays all recorded steps in reverse.
  // Gradients add into whatever is already in each grad buffer.
  void backward(const Tensor& loss);

  // Folds a branch decision (relu sign, pool argmax, ...) into a running
  // hash. Two forward passes through the same piecewise-linear region of a
  // network produce the same hash; tests use this to reject finite-difference
  // probes that straddle a kink.
  void note_decision(std::uint64_t bits) {
    decision_hash_ = (decision_hash_ ^ bits) * 0x100000001b3ull;
  }
  std::uint64_t decision_hash() const { return decision_hash_; }

 private:
  bool recording_;
  std::vector<std::function<void()>> steps_;
  std::unordered_set<const void*> outputs_;
  std::uint64_t decision_hash_ = 0xcbf29ce484222325ull;
};

void backward(Tape& tape, const Tensor& loss);

// Helpers for defining ops outside this translation unit (weight hashing
// records its own backward rule).
Tensor op_output(Tape& tape, Shape shape, bool grad_needed);
void check_finite(const Tensor& t, const char* op_name);
void check_same_tape(Tape& tape, const Tensor& input, const char* op_name);

// ---- Differentiable operations -------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);  // -> shape {1}

// x: [m], weight: [n, m], bias: [n] -> [n]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

// input: [C_in, H, W], kernel: [C_out, C_in, kh, kw], bias: [C_out].
// Output spatial size: floor((H + 2*pad - kh) / stride) + 1.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad);

// 2x2 max pooling with stride 2; trailing odd row/column is dropped.
Tensor maxpool2(Tape& tape, const Tensor& x);

Tensor global_avg_pool(Tape& tape, const Tensor& x);  // [C,H,W] -> [C]

// Align-corners bilinear interpolation; corner pixels of the input map
// exactly onto corner pixels of the output. Upsampling only (H >= h, W >= w).
Tensor bilinear_upsample(Tape& tape, const Tensor& x, std::int64_t out_h, std::int64_t out_w);

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);
Tensor slice1d(Tape& tape, const Tensor& x, std::int64_t start, std::int64_t len);

// features: [C,H,W], positions: (row, col) pairs -> [C, P]
Tensor gather_columns(Tape& tape, const Tensor& features,
                      const std::vector<std::pair<std::int64_t, std::int64_t>>& positions);

// [C,P_0], [C,P_1], ... -> [C, sum P_i], columns in argument order.
Tensor concat_columns(Tape& tape, const std::vector<Tensor>& parts);

// Sum of per-element binary cross-entropy between probabilities and a {0,1}
// target (not differentiated through). Probabilities are clamped to
// [eps, 1-eps] so the result stays finite.
Tensor bce_loss_sum(Tape& tape, const Tensor& prob, const Tensor& target, double eps = 1e-12);

// Mean binary cross-entropy of sigmoid(z) against a {0,1} target, computed in
// logit space: softplus(z) - y*z per element. Unlike the probability form the
// gradient is (sigmoid(z) - y)/n, which stays informative even when the
// sigmoid has saturated to an exact 0 or 1 in floating point.
Tensor bce_with_logits_mean(Tape& tape, const Tensor& logits, const Tensor& target);

// Mean softmax cross-entropy over pixels. logits: [K,h,w], labels: h*w class
// indices in [0, K).
Tensor softmax_xent_mean(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

// Normalizes each row of x [C, P] to zero mean / unit variance over the P
// columns (biased variance, eps added under the sqrt). Gradients flow through
// the statistics.
Tensor batchnorm_columns(Tape& tape, const Tensor& x, double eps = 1e-8);

// Mean binary cross-entropy of sigmoid(sum_c alpha[c]*|a[c,p]-b[c,q]| + beta)
// against labels[p*Q+q] over all P*Q column pairs. Computed in logit space.
Tensor l1_similarity_bce(Tape& tape, const Tensor& a, const Tensor& b, const Tensor& alpha,
                         const Tensor& beta, const std::vector<std::uint8_t>& labels);

// ---- SGD with momentum -----------------------------------------------------

// Update rule, applied per parameter p with gradient g:
//   v <- momentum * v + g
//   p <- p - lr * lr_multiplier(p) * v
// followed by zeroing g.
struct SgdState {
  struct Slot {
    Tensor param;
    double lr_multiplier = 1.0;
    std::vector<double> velocity;
  };
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::vector<Slot> slots;
};

SgdState make_sgd(const std::vector<std::pair<Tensor, double>>& params_with_multiplier,
                  double learning_rate, double momentum);
void sgd_step(SgdState& state);

}  // namespace episeg
