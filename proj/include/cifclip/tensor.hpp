// Copyright 2026 The cifclip Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cifclip/error.hpp"
#include "cifclip/random.hpp"

namespace cifclip {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

// Receives the output value and the adjoint of the output; accumulates into
// the captured inputs' grads.
using BackwardFn =
    std::function<void(std::span<const double> value, std::span<const double> grad)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major array of doubles taking part in reverse-mode
/// differentiation. Copies share storage (handle semantics); use clone() for
/// a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  /// Builds the result of a differentiable operation. The graph edge is only
  /// recorded when grad mode is on and some input requires grad.
  static Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                        detail::BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutation is reserved for leaves (parameters, optimizer updates, tests).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  // Zero-filled on first access; used by backward closures.
  std::span<double> grad_mut() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  /// Reverse-mode sweep from a scalar. Grads accumulate on every reachable
  /// tensor that requires grad.
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend class Tape;
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the nodes reachable from a root, used to
/// replay adjoints in reverse.
class Tape {
 public:
  explicit Tape(const Tensor& root);
  std::size_t size() const { return order_.size(); }
  void replay() const;

 private:
  std::vector<detail::Node*> order_;
};

bool grad_mode_enabled();

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise / shaping -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// x * s where s is a one-element tensor.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
// x + b with b broadcast over the last axis.
Tensor add_bias(const Tensor& x, const Tensor& b);
// x * m where m is a constant mask broadcast over the last axis of x
// (m has shape equal to x.shape() without its last axis).
Tensor mask_rows(const Tensor& x, std::span<const double> row_mask);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
// Softmax along the last axis.
Tensor softmax(const Tensor& x);
// Inverted dropout: identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Rows of x (viewed as [N, rest...]) at the given indices.
Tensor index_select(const Tensor& x, std::span<const std::size_t> rows);
Tensor transpose(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[in, out] (+ b[out]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());
// Rows of x[..., d] scaled to unit L2 norm. Zero rows are a numeric error.
Tensor l2_normalize(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Same-padded 1-D convolution.
/// x: [T, d_in] or [B, T, d_in]; kernel: [w, d_in, d_out]; bias: [d_out] or
/// undefined. `lengths` (batched only) bounds each sequence: frames at or past
/// the length are read as zero and written as zero. Output length is
/// ceil(T / stride).
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::span<const std::size_t> lengths = {});

/// Multi-head scaled dot-product self-attention over packed projections.
/// qkv: [B, T, 3d]; key_mask: [B*T] with 1 where a position may be attended
/// to. Every sequence needs at least one attendable key.
Tensor multi_head_attention(const Tensor& qkv, std::size_t n_heads,
                            std::span<const std::uint8_t> key_mask);

// ---- statistic matching -----------------------------------------------------

struct RunningStats {
  Tensor mean;  // [d]
  Tensor var;   // [d]
  double momentum = 0.1;
  double eps = 1e-5;

  static RunningStats init(std::size_t dim);
};

/// Batch normalization whose output statistics are moved onto target
/// mean/std. Training mode normalizes with batch statistics and updates the
/// running estimates; evaluation mode uses the running estimates only.
Tensor normalize_to_stats(const Tensor& x, RunningStats& stats, const Tensor& target_mean,
                          const Tensor& target_std, bool training);

// ---- gradient checking -----------------------------------------------------

struct GradCheckOptions {
  double h = 1e-6;
  // Added to |analytic| in the denominator.
  double atol = 1e-8;
};

/// Max over all coordinates of max(0, |analytic - central difference| - noise) /
/// (|analytic| + atol), where noise = 8 eps max(|f(x+h)|, |f(x-h)|) / h bounds
/// the rounding error of the difference quotient itself. Without it, gradients
/// that are exactly zero (e.g. attention key biases) read as large relative
/// errors. f must rebuild its graph from `params` on each call.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  GradCheckOptions opts = {});

}  // namespace cifclip
