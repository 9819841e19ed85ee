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

#include "cifclip/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstdlib>
#include <new>
#include <numeric>
#include <unordered_set>

// Eigen peels and vectorizes according to the address of each buffer, which
// changes the order of floating-point sums. Giving every heap block the same
// 64-byte alignment makes results independent of where the allocator happens
// to place tensors, so fixed-seed runs repeat bit for bit.
void* operator new(std::size_t n) {
  const std::size_t rounded = ((n ? n : 1) + 63) / 64 * 64;
  if (void* p = std::aligned_alloc(64, rounded)) return p;
  throw std::bad_alloc();
}
void* operator new[](std::size_t n) { return ::operator new(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }

namespace cifclip {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::statistics: return "statistics";
    case ErrorKind::contract: return "contract";
    case ErrorKind::data: return "data";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::vocabulary: return "vocabulary";
    case ErrorKind::degenerate_input: return "degenerate-input";
    case ErrorKind::internal_consistency: return "internal-consistency";
    case ErrorKind::mask: return "mask";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::parse: return "parse";
    case ErrorKind::size: return "size";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

namespace {

thread_local bool g_grad_mode = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Strided = Eigen::OuterStride<>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Strided>;
using MutStridedMap = Eigen::Map<RowMat, 0, Strided>;

void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.defined() || !t.requires_grad()) return;
  auto dst = t.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

std::size_t last_dim(const Tensor& x) {
  require(x.rank() >= 1, ErrorKind::dimension, "expected rank >= 1");
  return x.shape().back();
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) require(d > 0, ErrorKind::dimension, "zero-sized dimension in " + shape_str(shape));
  require(shape_numel(shape) == data.size(), ErrorKind::dimension,
          "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng) * stddev;
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                       detail::BackwardFn backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_mode) {
    bool any = false;
    for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto& t : inputs)
        if (t.defined() && t.requires_grad()) node->inputs.push_back(t.node_);
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  require(defined(), ErrorKind::contract, "use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < rank(), ErrorKind::dimension, "axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  require(numel() == 1, ErrorKind::contract, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  require(index.size() == rank(), ErrorKind::dimension, "index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    require(i < node_->shape[axis], ErrorKind::dimension, "index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_mut() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone() const { return from(shape(), node_->data, requires_grad()); }

void Tensor::backward() const {
  require(defined() && numel() == 1, ErrorKind::contract,
          "backward() requires a scalar loss, got " + (defined() ? shape_str(shape()) : "undefined"));
  if (!requires_grad()) return;
  grad_mut()[0] += 1.0;
  Tape(*this).replay();
}

Tape::Tape(const Tensor& root) {
  // Iterative post-order DFS; order_ ends up inputs-before-outputs.
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  detail::Node* r = root.node_.get();
  if (!r || !r->requires_grad) return;
  stack.emplace_back(r, 0);
  seen.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::replay() const {
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->data, node->grad);
  }
  // Interior adjoints are consumed; only leaves keep their grads.
  for (detail::Node* node : order_)
    if (node->backward) node->grad.clear();
}

bool grad_mode_enabled() { return g_grad_mode; }
NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const double>, std::span<const double> g) {
                           accumulate(a, g);
                           accumulate(b, g);
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const double>, std::span<const double> g) {
                           accumulate(a, g);
                           if (b.requires_grad()) {
                             auto gb = b.grad_mut();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const double>, std::span<const double> g) {
                           auto x = a.data(), y = b.data();
                           if (a.requires_grad()) {
                             auto ga = a.grad_mut();
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                           }
                           if (b.requires_grad()) {
                             auto gb = b.grad_mut();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                           }
                         });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= c;
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x, c](std::span<const double>, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
                         });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, ErrorKind::dimension, "mul_scalar: scale must have one element");
  const double c = s.item();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= c;
  return Tensor::make_op(x.shape(), std::move(out), {x, s},
                         [x, s](std::span<const double>, std::span<const double> g) {
                           const double c = s.item();
                           auto xd = x.data();
                           if (x.requires_grad()) {
                             auto gx = x.grad_mut();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
                           }
                           if (s.requires_grad()) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
                             s.grad_mut()[0] += acc;
                           }
                         });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t d = last_dim(x);
  require(b.numel() == d, ErrorKind::dimension,
          "add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % d];
  return Tensor::make_op(x.shape(), std::move(out), {x, b},
                         [x, b, d](std::span<const double>, std::span<const double> g) {
                           accumulate(x, g);
                           if (b.requires_grad()) {
                             auto gb = b.grad_mut();
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                           }
                         });
}

Tensor mask_rows(const Tensor& x, std::span<const double> row_mask) {
  const std::size_t d = last_dim(x);
  require(row_mask.size() * d == x.numel(), ErrorKind::dimension, "mask_rows: mask size mismatch");
  std::vector<double> mask(row_mask.begin(), row_mask.end());
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i / d];
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x, d, mask = std::move(mask)](std::span<const double>,
                                                        std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i / d];
                         });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    if (v >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x](std::span<const double> y, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
                         });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0 ? v : 0.0;
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x](std::span<const double>, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           auto xd = x.data();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (xd[i] > 0) gx[i] += g[i];
                         });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x](std::span<const double> y, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
                         });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(xd[i] > 0, ErrorKind::numeric, "log of non-positive value");
    out[i] = std::log(xd[i]);
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x](std::span<const double>, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           auto xd = x.data();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xd[i];
                         });
}

Tensor abs(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::fabs(v);
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x](std::span<const double>, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           auto xd = x.data();
                           // Subgradient 0 at the kink.
                           for (std::size_t i = 0; i < g.size(); ++i)
                             gx[i] += xd[i] > 0 ? g[i] : (xd[i] < 0 ? -g[i] : 0.0);
                         });
}

Tensor softmax(const Tensor& x) {
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double* o = out.data() + r * d;
    const double m = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x, d, rows](std::span<const double> y, std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                             for (std::size_t j = 0; j < d; ++j)
                               gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
                           }
                         });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  require(p >= 0.0 && p < 1.0, ErrorKind::parameter, "dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = uniform01(rng) >= p ? keep_scale : 0.0;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x, mask = std::move(mask)](std::span<const double>,
                                                     std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                         });
}

// ---- shaping -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), ErrorKind::dimension,
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_op(std::move(shape), std::move(out), {x},
                         [x](std::span<const double>, std::span<const double> g) { accumulate(x, g); });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorKind::dimension, "concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  require(axis < s0.size(), ErrorKind::dimension, "concat axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == s0.size(), ErrorKind::dimension, "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      require(i == axis || s[i] == s0[i], ErrorKind::dimension,
              "concat shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pd = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return Tensor::make_op(std::move(out_shape), std::move(out), parts,
                         [parts, widths, outer, row](std::span<const double>, std::span<const double> g) {
                           std::size_t offset = 0;
                           for (std::size_t k = 0; k < parts.size(); ++k) {
                             if (parts[k].requires_grad()) {
                               auto gp = parts[k].grad_mut();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                   gp[o * widths[k] + j] += g[o * row + offset + j];
                             }
                             offset += widths[k];
                           }
                         });
}

Tensor index_select(const Tensor& x, std::span<const std::size_t> rows) {
  require(x.rank() >= 1 && !rows.empty(), ErrorKind::dimension, "index_select: empty selection");
  const std::size_t n = x.dim(0);
  const std::size_t width = x.numel() / n;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * width);
  auto xd = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < n, ErrorKind::dimension, "index_select: row out of range");
    std::copy_n(xd.data() + idx[r] * width, width, out.data() + r * width);
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  return Tensor::make_op(std::move(shape), std::move(out), {x},
                         [x, idx = std::move(idx), width](std::span<const double>,
                                                          std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < width; ++j) gx[idx[r] * width + j] += g[r * width + j];
                         });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, ErrorKind::dimension, "transpose expects rank 2");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  return Tensor::make_op({n, m}, std::move(out), {x},
                         [x, m, n](std::span<const double>, std::span<const double> g) {
                           MutMap(x.grad_mut().data(), m, n) += ConstMap(g.data(), n, m).transpose();
                         });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_op({1}, {s}, {x}, [x](std::span<const double>, std::span<const double> g) {
    auto gx = x.grad_mut();
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::dimension, "matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::dimension,
          "matmul inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return Tensor::make_op({m, n}, std::move(out), {a, b},
                         [a, b, m, k, n](std::span<const double>, std::span<const double> g) {
                           ConstMap G(g.data(), m, n);
                           if (a.requires_grad())
                             MutMap(a.grad_mut().data(), m, k).noalias() +=
                                 G * ConstMap(b.data().data(), k, n).transpose();
                           if (b.requires_grad())
                             MutMap(b.grad_mut().data(), k, n).noalias() +=
                                 ConstMap(a.data().data(), m, k).transpose() * G;
                         });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2, ErrorKind::dimension, "linear: weight must be rank 2");
  const std::size_t in = w.dim(0), outd = w.dim(1);
  require(last_dim(x) == in, ErrorKind::dimension,
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  require(!b.defined() || b.numel() == outd, ErrorKind::dimension, "linear: bias size mismatch");
  const std::size_t rows = x.numel() / in;
  std::vector<double> out(rows * outd);
  MutMap O(out.data(), rows, outd);
  O.noalias() = ConstMap(x.data().data(), rows, in) * ConstMap(w.data().data(), in, outd);
  if (b.defined()) O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), outd);
  Shape shape = x.shape();
  shape.back() = outd;
  return Tensor::make_op(std::move(shape), std::move(out), {x, w, b},
                         [x, w, b, rows, in, outd](std::span<const double>, std::span<const double> g) {
                           ConstMap G(g.data(), rows, outd);
                           if (x.requires_grad())
                             MutMap(x.grad_mut().data(), rows, in).noalias() +=
                                 G * ConstMap(w.data().data(), in, outd).transpose();
                           if (w.requires_grad())
                             MutMap(w.grad_mut().data(), in, outd).noalias() +=
                                 ConstMap(x.data().data(), rows, in).transpose() * G;
                           if (b.defined() && b.requires_grad())
                             Eigen::Map<Eigen::RowVectorXd>(b.grad_mut().data(), outd) += G.colwise().sum();
                         });
}

Tensor l2_normalize(const Tensor& x) {
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> norms(rows);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xd[r * d + j] * xd[r * d + j];
    const double n = std::sqrt(s);
    require(n > 0.0 && std::isfinite(n), ErrorKind::numeric, "l2_normalize: zero-norm row");
    norms[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] / n;
  }
  return Tensor::make_op(x.shape(), std::move(out), {x},
                         [x, d, rows, norms = std::move(norms)](std::span<const double> y,
                                                                std::span<const double> g) {
                           auto gx = x.grad_mut();
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                             for (std::size_t j = 0; j < d; ++j)
                               gx[r * d + j] += (g[r * d + j] - dot * y[r * d + j]) / norms[r];
                           }
                         });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_dim(x);
  require(gamma.numel() == d && beta.numel() == d, ErrorKind::dimension, "layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv(rows);
  auto xd = x.data();
  auto gd = gamma.data(), bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * inv[r];
      out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv = std::move(inv)](
          std::span<const double>, std::span<const double> g) {
        auto gd = gamma.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          std::vector<double> gg(d, 0.0), gb(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xhat[r * d + j];
              gb[j] += g[r * d + j];
            }
          accumulate(gamma, gg);
          accumulate(beta, gb);
        }
        if (!x.requires_grad()) return;
        auto gx = x.grad_mut();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * gd[j];
            m1 += gh;
            m2 += gh * xhat[r * d + j];
          }
          m1 *= inv_d;
          m2 *= inv_d;
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += inv[r] * (g[r * d + j] * gd[j] - m1 - xhat[r * d + j] * m2);
        }
      });
}

// ---- convolution ---------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t batch, in_len, out_len, d_in, d_out, width, pad, stride;
  std::vector<std::size_t> lengths;      // valid input lengths
  std::vector<std::size_t> out_lengths;  // valid output lengths
};

// Gathers the rows read by kernel tap k into a [batch*out_len, d_in] buffer.
void gather_tap(const ConvGeometry& geo, std::span<const double> x, std::size_t k,
                std::vector<double>& buf) {
  std::fill(buf.begin(), buf.end(), 0.0);
  for (std::size_t b = 0; b < geo.batch; ++b)
    for (std::size_t t = 0; t < geo.out_lengths[b]; ++t) {
      const auto src = static_cast<std::ptrdiff_t>(t * geo.stride + k) - static_cast<std::ptrdiff_t>(geo.pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(geo.lengths[b])) continue;
      std::copy_n(x.data() + (b * geo.in_len + static_cast<std::size_t>(src)) * geo.d_in, geo.d_in,
                  buf.data() + (b * geo.out_len + t) * geo.d_in);
    }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::span<const std::size_t> lengths) {
  require(stride > 0, ErrorKind::parameter, "conv1d: stride must be positive");
  require(kernel.rank() == 3, ErrorKind::dimension, "conv1d: kernel must be [w, d_in, d_out]");
  require(kernel.dim(0) % 2 == 1, ErrorKind::parameter, "conv1d: same padding needs an odd kernel width");
  require(x.rank() == 2 || x.rank() == 3, ErrorKind::dimension, "conv1d: input must be [T,d] or [B,T,d]");
  const bool batched = x.rank() == 3;
  ConvGeometry geo;
  geo.batch = batched ? x.dim(0) : 1;
  geo.in_len = x.dim(batched ? 1 : 0);
  geo.d_in = x.shape().back();
  geo.width = kernel.dim(0);
  geo.pad = geo.width / 2;
  geo.stride = stride;
  geo.d_out = kernel.dim(2);
  require(kernel.dim(1) == geo.d_in, ErrorKind::dimension,
          "conv1d: kernel " + shape_str(kernel.shape()) + " vs input " + shape_str(x.shape()));
  require(!bias.defined() || bias.numel() == geo.d_out, ErrorKind::dimension, "conv1d: bias size mismatch");
  geo.out_len = (geo.in_len + stride - 1) / stride;
  if (lengths.empty()) {
    geo.lengths.assign(geo.batch, geo.in_len);
  } else {
    require(lengths.size() == geo.batch, ErrorKind::dimension, "conv1d: lengths size mismatch");
    geo.lengths.assign(lengths.begin(), lengths.end());
    for (auto l : geo.lengths) require(l <= geo.in_len, ErrorKind::dimension, "conv1d: length exceeds T");
  }
  for (auto l : geo.lengths) geo.out_lengths.push_back((l + stride - 1) / stride);

  const std::size_t rows = geo.batch * geo.out_len;
  std::vector<double> out(rows * geo.d_out, 0.0);
  std::vector<double> buf(rows * geo.d_in);
  MutMap O(out.data(), rows, geo.d_out);
  for (std::size_t k = 0; k < geo.width; ++k) {
    gather_tap(geo, x.data(), k, buf);
    O.noalias() += ConstMap(buf.data(), rows, geo.d_in) *
                   ConstMap(kernel.data().data() + k * geo.d_in * geo.d_out, geo.d_in, geo.d_out);
  }
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t b = 0; b < geo.batch; ++b)
      for (std::size_t t = 0; t < geo.out_lengths[b]; ++t)
        for (std::size_t o = 0; o < geo.d_out; ++o) out[(b * geo.out_len + t) * geo.d_out + o] += bd[o];
  }
  Shape shape = batched ? Shape{geo.batch, geo.out_len, geo.d_out} : Shape{geo.out_len, geo.d_out};
  return Tensor::make_op(
      std::move(shape), std::move(out), {x, kernel, bias},
      [x, kernel, bias, geo](std::span<const double>, std::span<const double> g) {
        const std::size_t rows = geo.batch * geo.out_len;
        // Outputs past each valid length are constant zero.
        std::vector<double> gm(g.begin(), g.end());
        for (std::size_t b = 0; b < geo.batch; ++b)
          for (std::size_t t = geo.out_lengths[b]; t < geo.out_len; ++t)
            std::fill_n(gm.data() + (b * geo.out_len + t) * geo.d_out, geo.d_out, 0.0);
        ConstMap G(gm.data(), rows, geo.d_out);
        std::vector<double> buf(rows * geo.d_in);
        for (std::size_t k = 0; k < geo.width; ++k) {
          const double* kk = kernel.data().data() + k * geo.d_in * geo.d_out;
          if (kernel.requires_grad()) {
            gather_tap(geo, x.data(), k, buf);
            MutMap(kernel.grad_mut().data() + k * geo.d_in * geo.d_out, geo.d_in, geo.d_out).noalias() +=
                ConstMap(buf.data(), rows, geo.d_in).transpose() * G;
          }
          if (x.requires_grad()) {
            MutMap(buf.data(), rows, geo.d_in).noalias() = G * ConstMap(kk, geo.d_in, geo.d_out).transpose();
            auto gx = x.grad_mut();
            for (std::size_t b = 0; b < geo.batch; ++b)
              for (std::size_t t = 0; t < geo.out_lengths[b]; ++t) {
                const auto src =
                    static_cast<std::ptrdiff_t>(t * geo.stride + k) - static_cast<std::ptrdiff_t>(geo.pad);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(geo.lengths[b])) continue;
                double* dst = gx.data() + (b * geo.in_len + static_cast<std::size_t>(src)) * geo.d_in;
                const double* s = buf.data() + (b * geo.out_len + t) * geo.d_in;
                for (std::size_t i = 0; i < geo.d_in; ++i) dst[i] += s[i];
              }
          }
        }
        if (bias.defined() && bias.requires_grad()) {
          Eigen::Map<Eigen::RowVectorXd>(bias.grad_mut().data(), geo.d_out) += G.colwise().sum();
        }
      });
}

// ---- attention ---------------------------------------------------------------

Tensor multi_head_attention(const Tensor& qkv, std::size_t n_heads, std::span<const std::uint8_t> key_mask) {
  require(qkv.rank() == 3, ErrorKind::dimension, "attention: qkv must be [B, T, 3d]");
  const std::size_t batch = qkv.dim(0), len = qkv.dim(1), d3 = qkv.dim(2);
  require(d3 % 3 == 0, ErrorKind::dimension, "attention: packed width must be a multiple of 3");
  const std::size_t d = d3 / 3;
  require(n_heads > 0 && d % n_heads == 0, ErrorKind::configuration, "attention: d_model not divisible by heads");
  require(key_mask.size() == batch * len, ErrorKind::dimension, "attention: key mask size mismatch");
  const std::size_t dh = d / n_heads;
  std::vector<std::vector<std::size_t>> keys(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t)
      if (key_mask[b * len + t]) keys[b].push_back(t);
    require(!keys[b].empty(), ErrorKind::mask, "attention: sequence without attendable keys");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[b*H+h] is [len, |keys[b]|].
  std::vector<std::vector<double>> probs(batch * n_heads);
  std::vector<double> out(batch * len * d);
  const double* base = qkv.data().data();
  RowMat Kc, Vc;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t nk = keys[b].size();
    Kc.resize(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(dh));
    Vc.resize(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(dh));
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* q = base + b * len * d3 + h * dh;
      for (std::size_t j = 0; j < nk; ++j) {
        const double* row = q + keys[b][j] * d3;
        for (std::size_t i = 0; i < dh; ++i) {
          Kc(j, i) = row[d + i];
          Vc(j, i) = row[2 * d + i];
        }
      }
      ConstStridedMap Q(q, len, dh, Strided(d3));
      auto& p = probs[b * n_heads + h];
      p.resize(len * nk);
      MutMap P(p.data(), len, nk);
      P.noalias() = (Q * Kc.transpose()) * inv_sqrt;
      // Plain loops: Eigen reductions pick packet paths from the runtime
      // alignment of each row, which would make results allocation-dependent.
      for (std::size_t t = 0; t < len; ++t) {
        double* row = p.data() + t * nk;
        double mx = row[0];
        for (std::size_t j = 1; j < nk; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < nk; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < nk; ++j) row[j] /= z;
      }
      MutStridedMap(out.data() + b * len * d + h * dh, len, dh, Strided(d)).noalias() = P * Vc;
    }
  }
  return Tensor::make_op(
      {batch, len, d}, std::move(out), {qkv},
      [qkv, batch, len, d, d3, dh, n_heads, keys = std::move(keys), inv_sqrt, probs = std::move(probs)](
          std::span<const double>, std::span<const double> g) {
        const double* base = qkv.data().data();
        double* gbase = qkv.grad_mut().data();
        RowMat Kc, Vc, gP, gS, gK, gV;
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t nk = keys[b].size();
          Kc.resize(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(dh));
          Vc.resize(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(dh));
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = b * len * d3 + h * dh;
            for (std::size_t j = 0; j < nk; ++j) {
              const double* row = base + off + keys[b][j] * d3;
              for (std::size_t i = 0; i < dh; ++i) {
                Kc(j, i) = row[d + i];
                Vc(j, i) = row[2 * d + i];
              }
            }
            ConstStridedMap Q(base + off, len, dh, Strided(d3));
            ConstMap P(probs[b * n_heads + h].data(), len, nk);
            ConstStridedMap G(g.data() + b * len * d + h * dh, len, dh, Strided(d));
            gP.noalias() = G * Vc.transpose();
            gS.resize(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(nk));
            for (std::size_t t = 0; t < len; ++t) {
              double dot = 0.0;
              for (std::size_t j = 0; j < nk; ++j) dot += gP(t, j) * P(t, j);
              for (std::size_t j = 0; j < nk; ++j) gS(t, j) = P(t, j) * (gP(t, j) - dot) * inv_sqrt;
            }
            MutStridedMap(gbase + off, len, dh, Strided(d3)).noalias() += gS * Kc;
            gK.noalias() = gS.transpose() * Q;
            gV.noalias() = P.transpose() * G;
            for (std::size_t j = 0; j < nk; ++j) {
              double* row = gbase + off + keys[b][j] * d3;
              for (std::size_t i = 0; i < dh; ++i) {
                row[d + i] += gK(j, i);
                row[2 * d + i] += gV(j, i);
              }
            }
          }
        }
      });
}

// ---- statistic matching ------------------------------------------------------

RunningStats RunningStats::init(std::size_t dim) {
  return RunningStats{Tensor::zeros({dim}), Tensor::full({dim}, 1.0)};
}

Tensor normalize_to_stats(const Tensor& x, RunningStats& stats, const Tensor& target_mean,
                          const Tensor& target_std, bool training) {
  const std::size_t d = last_dim(x);
  const std::size_t n = x.numel() / d;
  require(target_mean.numel() == d && target_std.numel() == d && stats.mean.numel() == d,
          ErrorKind::dimension, "normalize_to_stats: statistic size mismatch");
  for (double s : target_std.data()) require(s > 0.0, ErrorKind::parameter, "normalize_to_stats: target std must be positive");
  auto xd = x.data();
  auto tm = target_mean.data(), ts = target_std.data();
  std::vector<double> mu(d, 0.0), inv(d);
  if (training) {
    require(n >= 2, ErrorKind::statistics, "normalize_to_stats: batch statistics need at least 2 rows");
    std::vector<double> var(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) mu[j] += xd[r * d + j];
    for (auto& m : mu) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xd[r * d + j] - mu[j];
        var[j] += c * c;
      }
    auto rm = stats.mean.mutable_data(), rv = stats.var.mutable_data();
    for (std::size_t j = 0; j < d; ++j) {
      const double biased = var[j] / static_cast<double>(n);
      inv[j] = 1.0 / std::sqrt(biased + stats.eps);
      rm[j] = (1.0 - stats.momentum) * rm[j] + stats.momentum * mu[j];
      rv[j] = (1.0 - stats.momentum) * rv[j] + stats.momentum * var[j] / static_cast<double>(n - 1);
    }
  } else {
    auto rm = stats.mean.data(), rv = stats.var.data();
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = rm[j];
      inv[j] = 1.0 / std::sqrt(rv[j] + stats.eps);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xd[r * d + j] - mu[j]) * inv[j];
      out[r * d + j] = xhat[r * d + j] * ts[j] + tm[j];
    }
  std::vector<double> tsv(ts.begin(), ts.end());
  return Tensor::make_op(
      x.shape(), std::move(out), {x},
      [x, d, n, training, inv = std::move(inv), xhat = std::move(xhat), tsv = std::move(tsv)](
          std::span<const double>, std::span<const double> g) {
        auto gx = x.grad_mut();
        if (!training) {
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * tsv[i % d] * inv[i % d];
          return;
        }
        std::vector<double> m1(d, 0.0), m2(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = g[r * d + j] * tsv[j];
            m1[j] += gh;
            m2[j] += gh * xhat[r * d + j];
          }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] +=
                inv[j] * (g[r * d + j] * tsv[j] - m1[j] * inv_n - xhat[r * d + j] * m2[j] * inv_n);
      });
}

// ---- gradient check ----------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  GradCheckOptions opts) {
  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : ps) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.numel(), 0.0);
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto data = ps[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + opts.h;
      const double fp = f().item();
      data[i] = orig - opts.h;
      const double fm = f().item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double noise =
          8.0 * std::numeric_limits<double>::epsilon() * std::max(std::fabs(fp), std::fabs(fm)) / opts.h;
      const double err =
          std::max(0.0, std::fabs(analytic[k][i] - numeric) - noise) / (std::fabs(analytic[k][i]) + opts.atol);
      worst = std::max(worst, err);
    }
  }
  for (auto& p : ps) p.zero_grad();
  return worst;
}

}  // namespace cifclip
