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

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cifclip/optim.hpp"
#include "cifclip/params.hpp"
#include "cifclip/tensor.hpp"

using namespace cifclip;

namespace {

Tensor rand_param(Shape shape, Rng& rng, double sd = 1.0) { return Tensor::randn(std::move(shape), rng, sd, true); }

// Keeps every coordinate at least `margin` away from zero so relu and abs
// kinks stay outside the finite-difference stencil.
void push_off_kinks(Tensor& t, double margin) {
  for (auto& v : t.mutable_data())
    if (std::fabs(v) < margin) v = v < 0 ? -margin : margin;
}

std::vector<std::uint8_t> prefix_mask(std::size_t batch, std::size_t len, std::vector<std::size_t> valid) {
  std::vector<std::uint8_t> m(batch * len, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < valid[b]; ++t) m[b * len + t] = 1;
  return m;
}

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  auto i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto c = matmul(i2, i2);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Matmul, HandProduct) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 1}, {1, 1});
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.at({0, 0}), 3.0);
  EXPECT_EQ(c.at({1, 0}), 7.0);
}

TEST(Matmul, GradientWithOnesIsOnes) {
  Rng rng(1);
  auto a = rand_param({3, 4}, rng);
  auto b = Tensor::full({4, 2}, 1.0);
  sum(matmul(a, b)).backward();
  for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 2.0);  // row sums of B: 2 columns of ones
  a.zero_grad();
  auto b1 = Tensor::full({4, 1}, 1.0);
  sum(matmul(a, b1)).backward();
  for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected throw";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

TEST(Conv1d, HandConvolutionWithZeroPadding) {
  auto x = Tensor::from({3, 1}, {1, 2, 3});
  auto k = Tensor::from({3, 1, 1}, {1, 1, 1});
  auto y = conv1d(x, k, Tensor(), 1);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3, 6, 5}));
}

TEST(Conv1d, IdentityAndZeroKernels) {
  Rng rng(2);
  auto x = Tensor::randn({5, 2}, rng, 1.0);
  std::vector<double> kid(3 * 2 * 2, 0.0);
  kid[1 * 4 + 0] = 1.0;  // centre tap, identity channel map
  kid[1 * 4 + 3] = 1.0;
  auto y = conv1d(x, Tensor::from({3, 2, 2}, kid), Tensor(), 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  auto z = conv1d(x, Tensor::zeros({3, 2, 2}), Tensor(), 1);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv1d, StrideValidation) {
  auto x = Tensor::zeros({4, 1});
  try {
    conv1d(x, Tensor::zeros({3, 1, 1}), Tensor(), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parameter);
  }
  EXPECT_EQ(conv1d(x, Tensor::zeros({3, 1, 1}), Tensor(), 2).dim(0), 2u);
}

TEST(Conv1d, BatchedRespectsLengths) {
  Rng rng(3);
  auto x = Tensor::randn({2, 6, 3}, rng, 1.0);
  auto k = Tensor::randn({3, 3, 4}, rng, 1.0);
  auto bias = Tensor::randn({4}, rng, 1.0);
  std::vector<std::size_t> lengths{6, 4};
  auto y = conv1d(x, k, bias, 1, lengths);
  // Second sequence, computed alone at its true length.
  std::vector<double> second(x.data().begin() + 18, x.data().begin() + 18 + 12);
  auto y2 = conv1d(Tensor::from({4, 3}, second), k, bias, 1);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y.data()[24 + i], y2.data()[i], 1e-12);
  for (std::size_t i = 40; i < 48; ++i) EXPECT_EQ(y.data()[i], 0.0);
}

TEST(Elementwise, SigmoidSoftmaxDropoutBasics) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  auto s = softmax(Tensor::from({2}, {0.0, 0.0}));
  EXPECT_EQ(s.data()[0], 0.5);
  EXPECT_EQ(s.data()[1], 0.5);
  Rng rng(4);
  auto x = Tensor::randn({10}, rng, 1.0);
  auto d = dropout(x, 0.0, true, rng);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(d.data()[i], x.data()[i]);
}

TEST(Elementwise, DropoutTrainingScalesSurvivors) {
  Rng rng(5);
  auto x = Tensor::full({10000}, 1.0);
  auto d = dropout(x, 0.5, true, rng);
  std::size_t zeros = 0;
  for (double v : d.data()) {
    if (v == 0.0)
      ++zeros;
    else
      EXPECT_DOUBLE_EQ(v, 2.0);
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 10000.0, 0.5, 0.03);
  EXPECT_THROW(dropout(x, 1.0, true, rng), Error);
}

TEST(Elementwise, EvalModeConsumesNoRandomness) {
  Rng rng(6);
  Rng before = rng;
  auto x = Tensor::full({8}, 1.0);
  auto d = dropout(x, 0.5, false, rng);
  EXPECT_EQ(rng, before);
  for (double v : d.data()) EXPECT_EQ(v, 1.0);
  auto stats = RunningStats::init(8);
  normalize_to_stats(reshape(x, {1, 8}), stats, Tensor::zeros({8}), Tensor::full({8}, 1.0), false);
  EXPECT_EQ(rng, before);
}

TEST(Properties, SoftmaxRowsSumToOneAndSigmoidInOpenInterval) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = Tensor::randn({5, 9}, rng, 20.0);
    auto s = softmax(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 9; ++j) acc += s.at({r, j});
      EXPECT_NEAR(acc, 1.0, 1e-12);
    }
    auto sg = sigmoid(scale(x, 0.5));
    for (double v : sg.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(NormalizeToStats, MatchesTargetMoments) {
  Rng rng(8);
  const std::size_t n = 64, d = 3;
  auto x = Tensor::randn({n, d}, rng, 1.0);
  // Exactly zero mean / unit (biased) std per column.
  {
    auto xd = x.mutable_data();
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0, var = 0;
      for (std::size_t r = 0; r < n; ++r) mu += xd[r * d + j];
      mu /= n;
      for (std::size_t r = 0; r < n; ++r) var += (xd[r * d + j] - mu) * (xd[r * d + j] - mu);
      var /= n;
      for (std::size_t r = 0; r < n; ++r) xd[r * d + j] = (xd[r * d + j] - mu) / std::sqrt(var);
    }
  }
  auto tm = Tensor::from({d}, {1.5, -2.0, 0.25});
  auto ts = Tensor::from({d}, {0.5, 3.0, 1.0});
  auto stats = RunningStats::init(d);
  auto y = normalize_to_stats(x, stats, tm, ts, true);
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0, var = 0;
    for (std::size_t r = 0; r < n; ++r) mu += y.at({r, j});
    mu /= n;
    for (std::size_t r = 0; r < n; ++r) var += (y.at({r, j}) - mu) * (y.at({r, j}) - mu);
    var /= n;
    EXPECT_NEAR(mu, tm.data()[j], 1e-12);
    // eps = 1e-5 in the denominator shrinks the std by sqrt(1/(1+eps)).
    EXPECT_NEAR(std::sqrt(var), ts.data()[j] / std::sqrt(1.0 + 1e-5), 1e-12);
  }
  // Running statistics moved by momentum 0.1 towards the batch statistics.
  EXPECT_NEAR(stats.mean.data()[0], 0.0, 1e-12);
  EXPECT_NEAR(stats.var.data()[0], 0.9 + 0.1 * n / (n - 1.0), 1e-12);
}

TEST(NormalizeToStats, ConstantColumnUsesVarianceFloor) {
  auto x = Tensor::from({4, 2}, {3, 1, 3, 2, 3, 3, 3, 4});
  auto stats = RunningStats::init(2);
  auto y = normalize_to_stats(x, stats, Tensor::from({2}, {0.7, 0.0}), Tensor::full({2}, 1.0), true);
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_TRUE(std::isfinite(y.at({r, 0})));
    EXPECT_EQ(y.at({r, 0}), 0.7);
  }
}

TEST(NormalizeToStats, SingleRowTrainingIsStatisticsError) {
  auto stats = RunningStats::init(2);
  try {
    normalize_to_stats(Tensor::zeros({1, 2}), stats, Tensor::zeros({2}), Tensor::full({2}, 1.0), true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::statistics);
  }
}

TEST(Backward, SimpleAdjoints) {
  auto x = Tensor::from({3}, {1, -2, 5}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  auto y = Tensor::from({1}, {3.0}, true);
  sum(mul(y, y)).backward();
  EXPECT_EQ(y.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::from({2}, {1, 2}, true);
  try {
    x.backward();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(Backward, TensorUsedTwiceAccumulates) {
  Rng rng(9);
  auto x = rand_param({4}, rng);
  auto f = [&] { return sum(add(mul(x, x), sigmoid(mul(x, scale(x, 0.3))))); };
  EXPECT_LT(grad_check(f, {x}), 1e-6);
  x.zero_grad();
  auto w = Tensor::from({1}, {2.0}, true);
  sum(add(w, w)).backward();
  EXPECT_EQ(w.grad()[0], 2.0);
}

TEST(Backward, CompositeConvReluMatchesFiniteDifferences) {
  Rng rng(10);
  auto x = rand_param({6, 2}, rng);
  auto k = rand_param({3, 2, 3}, rng, 0.5);
  auto b = rand_param({3}, rng, 0.1);
  auto f = [&] { return sum(relu(conv1d(x, k, b, 1))); };
  // Shift so no pre-activation sits within 1e-3 of the relu kink.
  {
    NoGradGuard ng;
    auto pre = conv1d(x, k, b, 1);
    double closest = 1e9;
    for (double v : pre.data()) closest = std::min(closest, std::fabs(v));
    ASSERT_GT(closest, 1e-3) << "reseed: pre-activation too close to kink";
  }
  EXPECT_LT(grad_check(f, {x, k, b}), 1e-6);
}

TEST(GradCheck, DetectsWrongGradientsAndToleratesExactZeros) {
  Rng rng(12);
  auto x = rand_param({5}, rng);
  auto w = rand_param({5}, rng);
  // Detaching one factor halves the analytic gradient of x^2.
  EXPECT_GT(grad_check([&] { return sum(mul(w, mul(x, x.detach()))); }, {x}), 0.4);
  // A 1e-3 relative slip in a large-valued function is still visible.
  auto big = Tensor::full({5}, 1e3);
  EXPECT_GT(grad_check([&] { return add(sum(big), sum(mul(w, add(x, scale(x.detach(), 1e-3))))); }, {x}), 5e-4);
  // A parameter the output does not depend on has an exactly-zero gradient.
  auto unused = rand_param({3}, rng);
  EXPECT_EQ(grad_check([&] { return add(sum(mul(x, w)), scale(sum(mul(unused, Tensor::full({3}, 0.0))), 1.0)); },
                       {unused}),
            0.0);
}

TEST(GradCheck, QuadraticAndSigmoidAffine) {
  auto x = Tensor::from({1}, {3.0}, true);
  EXPECT_LT(grad_check([&] { return sum(mul(x, x)); }, {x}), 1e-6);
  Rng rng(11);
  auto w = rand_param({3, 2}, rng);
  auto in = Tensor::randn({4, 3}, rng, 1.0);
  auto bias = rand_param({2}, rng);
  EXPECT_LT(grad_check([&] { return sum(sigmoid(linear(in, w, bias))); }, {w, bias}), 1e-5);
}

TEST(GradCheck, EveryDifferentiableOpOnRandomSmoothInputs) {
  Rng rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    auto a = rand_param({3, 4}, rng);
    auto b = rand_param({4, 2}, rng);
    push_off_kinks(a, 1e-3);
    auto weights = Tensor::randn({3, 2}, rng, 1.0);
    auto weights4 = Tensor::randn({3, 4}, rng, 1.0);
    EXPECT_LT(grad_check([&] { return sum(mul(matmul(a, b), weights)); }, {a, b}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(mul(softmax(a), weights4)); }, {a}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(mul(l2_normalize(a), weights4)); }, {a}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(mul(transpose(transpose(a)), weights4)); }, {a}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(abs(a)); }, {a}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(mul(exp(scale(a, 0.5)), weights4)); }, {a}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(log(add(mul(a, a), Tensor::full({3, 4}, 1.0)))); }, {a}), 1e-4);
    auto g = rand_param({4}, rng);
    auto be = rand_param({4}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(layer_norm(a, g, be), weights4)); }, {a, g, be}), 1e-4);
    auto s = rand_param({1}, rng);
    EXPECT_LT(grad_check([&] { return sum(mul(mul_scalar(add_bias(a, g), s), weights4)); }, {a, g, s}), 1e-4);
    std::vector<std::size_t> rows{2, 0, 2};
    EXPECT_LT(grad_check([&] { return sum(mul(index_select(a, rows), weights4)); }, {a}), 1e-4);
    auto c = rand_param({3, 2}, rng);
    auto w6 = Tensor::randn({3, 6}, rng, 1.0);
    EXPECT_LT(grad_check([&] { return sum(mul(concat({a, c}, 1), w6)); }, {a, c}), 1e-4);
    auto stats = RunningStats::init(4);
    auto tm = Tensor::randn({4}, rng, 1.0);
    auto ts = Tensor::full({4}, 0.7);
    EXPECT_LT(grad_check([&] { return sum(mul(normalize_to_stats(a, stats, tm, ts, true), weights4)); }, {a}), 1e-4);
    EXPECT_LT(grad_check([&] { return sum(mul(normalize_to_stats(a, stats, tm, ts, false), weights4)); }, {a}), 1e-4);
  }
}

TEST(GradCheck, ConvolutionBatchedAndStrided) {
  Rng rng(13);
  auto x = rand_param({2, 7, 3}, rng);
  auto k = rand_param({3, 3, 4}, rng, 0.5);
  auto b = rand_param({4}, rng, 0.5);
  std::vector<std::size_t> lengths{7, 5};
  auto w = Tensor::randn({2, 7, 4}, rng, 1.0);
  EXPECT_LT(grad_check([&] { return sum(mul(conv1d(x, k, b, 1, lengths), w)); }, {x, k, b}), 1e-4);
  auto x1 = rand_param({7, 3}, rng);
  auto w2 = Tensor::randn({4, 4}, rng, 1.0);
  EXPECT_LT(grad_check([&] { return sum(mul(conv1d(x1, k, b, 2), w2)); }, {x1, k, b}), 1e-4);
}

TEST(GradCheck, MaskedAttention) {
  Rng rng(14);
  auto qkv = rand_param({2, 5, 12}, rng);
  auto mask = prefix_mask(2, 5, {5, 3});
  auto w = Tensor::randn({2, 5, 4}, rng, 1.0);
  EXPECT_LT(grad_check([&] { return sum(mul(multi_head_attention(qkv, 2, mask), w)); }, {qkv}), 1e-4);
}

TEST(Attention, MaskedKeysHaveNoInfluence) {
  Rng rng(15);
  auto qkv = Tensor::randn({1, 6, 12}, rng, 1.0);
  auto mask = prefix_mask(1, 6, {4});
  auto y1 = multi_head_attention(qkv, 2, mask);
  auto perturbed = qkv.clone();
  for (std::size_t i = 4 * 12; i < 6 * 12; ++i) perturbed.mutable_data()[i] += 10.0;
  auto y2 = multi_head_attention(perturbed, 2, mask);
  for (std::size_t i = 0; i < 4 * 4; ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);
}

TEST(Adam, FirstStepClosedForm) {
  auto p = Tensor::from({1}, {0.0}, true);
  AdamState opt(AdamConfig{}, {{"p", p}});
  p.grad_mut()[0] = 1.0;
  opt.step();
  EXPECT_NEAR(p.data()[0], -1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto p = Tensor::from({3}, {1, 2, 3}, true);
  AdamState opt(AdamConfig{}, {{"p", p}});
  p.grad_mut();
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, 2, 3}));
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(16);
    auto w = rand_param({4, 2}, rng);
    auto x = Tensor::randn({8, 4}, rng, 1.0);
    AdamConfig cfg;
    cfg.warmup_steps = 3;
    AdamState opt(cfg, {{"w", w}});
    for (int s = 0; s < 10; ++s) {
      w.zero_grad();
      sum(sigmoid(matmul(x, w))).backward();
      opt.step();
    }
    return std::vector<double>(w.data().begin(), w.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, NanGradientNamesParameter) {
  auto p = Tensor::from({1}, {0.0}, true);
  AdamState opt(AdamConfig{}, {{"enc/w", p}});
  p.grad_mut()[0] = std::nan("");
  try {
    opt.step();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("enc/w"), std::string::npos);
  }
}

TEST(Adam, WarmupRampsLearningRate) {
  AdamConfig cfg;
  cfg.warmup_steps = 4;
  auto p = Tensor::from({1}, {0.0}, true);
  AdamState opt(cfg, {{"p", p}});
  p.grad_mut()[0] = 1.0;
  opt.step();
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.25e-3);
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_DOUBLE_EQ(opt.current_lr(), 1e-3);
}

TEST(Checkpoint, RoundTripIsExactAndLayoutIsLittleEndian) {
  Rng rng(17);
  std::vector<NamedTensor> ts{{"spc/w", Tensor::randn({2, 3}, rng, 1.0)},
                              {"img/b", Tensor::randn({5}, rng, 1.0)}};
  auto p = ts[0].tensor;
  p.set_requires_grad(true);
  AdamState opt(AdamConfig{}, {ts[0]});
  p.grad_mut()[1] = 0.5;
  opt.step();
  auto all = ts;
  for (auto& s : opt.state_tensors()) all.push_back(s);
  std::stringstream buf;
  write_checkpoint(buf, all);
  const std::string bytes = buf.str();
  ASSERT_EQ(bytes.substr(0, 5), "CIFG1");
  // First entry: name length 5 as u64 little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 5u);
  for (int i = 6; i < 13; ++i) EXPECT_EQ(bytes[i], '\0');
  EXPECT_EQ(bytes.substr(13, 5), "spc/w");
  auto back = read_checkpoint(buf);
  ASSERT_EQ(back.size(), all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(back[i].name, all[i].name);
    EXPECT_EQ(back[i].tensor.shape(), all[i].tensor.shape());
    for (std::size_t j = 0; j < all[i].tensor.numel(); ++j)
      EXPECT_EQ(back[i].tensor.data()[j], all[i].tensor.data()[j]);
  }
  AdamState restored(AdamConfig{}, {ts[0]});
  restored.load_state(back);
  EXPECT_EQ(restored.step_count(), 1u);
}

TEST(Checkpoint, TruncatedAndForeignInputsAreParseErrors) {
  std::stringstream junk("NOTCK");
  EXPECT_THROW(read_checkpoint(junk), Error);
  std::stringstream buf;
  write_checkpoint(buf, {{"x", Tensor::full({3}, 1.0)}});
  std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 4));
  try {
    read_checkpoint(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
  }
}
