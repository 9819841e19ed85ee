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

#include "cifclip/losses.hpp"

using namespace cifclip;

namespace {

std::vector<std::uint8_t> eye(std::size_t B) {
  std::vector<std::uint8_t> m(B * B, 0);
  for (std::size_t i = 0; i < B; ++i) m[i * B + i] = 1;
  return m;
}

// Direct evaluation of the stated formula with plain loops.
double reference_loss(const Tensor& a, const Tensor& im, const std::vector<std::uint8_t>& m, double tau) {
  const std::size_t B = a.dim(0), d = a.dim(1);
  auto cosine = [&](std::size_t i, std::size_t j) {
    double dot = 0, na = 0, ni = 0;
    for (std::size_t k = 0; k < d; ++k) {
      dot += a.at({i, k}) * im.at({j, k});
      na += a.at({i, k}) * a.at({i, k});
      ni += im.at({j, k}) * im.at({j, k});
    }
    return dot / std::sqrt(na * ni);
  };
  double a2i = 0, i2a = 0;
  for (std::size_t i = 0; i < B; ++i) {
    double num = 0, den = 0, num_t = 0, den_t = 0;
    for (std::size_t j = 0; j < B; ++j) {
      const double e = std::exp(cosine(i, j) / tau), et = std::exp(cosine(j, i) / tau);
      (m[i * B + j] ? num : den) += e;
      (m[j * B + i] ? num_t : den_t) += et;
    }
    a2i -= std::log(num / den);
    i2a -= std::log(num_t / den_t);
  }
  return (a2i / static_cast<double>(B) + i2a / static_cast<double>(B)) / 2.0;
}

// Identity plus random extra positives, keeping a negative in every row and column.
std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t B) {
  for (;;) {
    auto m = eye(B);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = i + 1; j < B; ++j)
        if (uniform01(rng) < 0.25) m[i * B + j] = m[j * B + i] = 1;
    bool ok = true;
    for (std::size_t i = 0; i < B && ok; ++i) {
      std::size_t r = 0;
      for (std::size_t j = 0; j < B; ++j) r += m[i * B + j];
      ok = r < B;
    }
    if (ok) return m;
  }
}

Tensor inv(double tau, bool grad = false) { return Tensor::from({1}, {1.0 / tau}, grad); }

}  // namespace

TEST(CosineMatrix, Examples) {
  auto e = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto c = cosine_matrix(e, e);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{1, 0, 0, 1}));
  auto scaled = Tensor::from({2, 2}, {5, 0, 0, 1});
  auto c2 = cosine_matrix(scaled, e);
  EXPECT_EQ(std::vector<double>(c2.data().begin(), c2.data().end()), (std::vector<double>{1, 0, 0, 1}));
  auto anti = cosine_matrix(Tensor::from({1, 3}, {1, 2, 3}), Tensor::from({1, 3}, {-2, -4, -6}));
  EXPECT_NEAR(anti.item(), -1.0, 1e-15);
  try {
    cosine_matrix(Tensor::from({1, 2}, {0, 0}), e);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.kind(), ErrorKind::numeric);
  }
}

TEST(MaskedContrastive, OrthonormalPairsGiveMinusOne) {
  auto e = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_DOUBLE_EQ(masked_contrastive(e, e, eye(2), inv(1.0)).item(), -1.0);
}

TEST(MaskedContrastive, EqualCosinesGiveCountRatio) {
  auto same = Tensor::from({3, 2}, {1, 1, 2, 2, 3, 3});
  EXPECT_NEAR(masked_contrastive(same, same, eye(2 + 1), inv(0.5)).item(), -std::log(1.0 / 2.0), 1e-12);
  auto two = Tensor::from({2, 2}, {1, 1, 2, 2});
  EXPECT_NEAR(masked_contrastive(two, two, eye(2), inv(0.3)).item(), 0.0, 1e-12);
}

TEST(MaskedContrastive, MatchesDirectFormula) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = static_cast<std::size_t>(uniform_int(rng, 2, 8));
    auto a = Tensor::randn({B, 5}, rng, 1.0), im = Tensor::randn({B, 5}, rng, 1.0);
    auto m = random_mask(rng, B);
    const double tau = 0.05 + uniform01(rng);
    EXPECT_NEAR(masked_contrastive(a, im, m, inv(tau)).item(), reference_loss(a, im, m, tau), 1e-10);
  }
}

TEST(MaskedContrastive, GradCheck) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = Tensor::randn({4, 6}, rng, 1.0, true), im = Tensor::randn({4, 6}, rng, 1.0, true);
    auto s = inv(0.2 + uniform01(rng), true);
    auto m = random_mask(rng, 4);
    EXPECT_LT(grad_check([&] { return masked_contrastive(a, im, m, s); }, {a, im, s}), 1e-4);
  }
}

TEST(MaskedContrastive, DegenerateMaskRows) {
  auto e = Tensor::from({2, 2}, {1, 0, 0, 1});
  for (auto m : {std::vector<std::uint8_t>{1, 1, 0, 1}, std::vector<std::uint8_t>{0, 0, 0, 1}}) {
    try {
      masked_contrastive(e, e, m, inv(1.0));
      FAIL();
    } catch (const Error& err) {
      EXPECT_EQ(err.kind(), ErrorKind::mask);
    }
  }
}

TEST(MaskedContrastive, RowRescalingInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = Tensor::randn({5, 4}, rng, 1.0), im = Tensor::randn({5, 4}, rng, 1.0);
    auto m = random_mask(rng, 5);
    const double base = masked_contrastive(a, im, m, inv(0.1)).item();
    auto a2 = a.clone();
    const std::size_t r = static_cast<std::size_t>(uniform_int(rng, 0, 4));
    const double c = 0.1 + 10 * uniform01(rng);
    for (std::size_t k = 0; k < 4; ++k) a2.mutable_data()[r * 4 + k] *= c;
    EXPECT_NEAR(masked_contrastive(a2, im, m, inv(0.1)).item(), base, 1e-10);
  }
}

TEST(MaskedContrastive, SwappingRolesIsSymmetric) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = 6;
    auto a = Tensor::randn({B, 4}, rng, 1.0), im = Tensor::randn({B, 4}, rng, 1.0);
    auto m = random_mask(rng, B);
    // Make the mask asymmetric to exercise the transpose.
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j)
        if (i != j && uniform01(rng) < 0.1) m[i * B + j] = 1;
    std::vector<std::uint8_t> mt(B * B);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < B; ++j) mt[j * B + i] = m[i * B + j];
    try {
      const double x = masked_contrastive(a, im, m, inv(0.2)).item();
      EXPECT_NEAR(masked_contrastive(im, a, mt, inv(0.2)).item(), x, 1e-12);
    } catch (const Error&) {
      // A row may have lost its last negative; skip that draw.
    }
  }
}

TEST(MaskedContrastive, MonotoneInPairCosines) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 5;
    auto m = random_mask(rng, B);
    std::vector<double> c(B * B);
    for (auto& v : c) v = 2 * uniform01(rng) - 1;
    const std::size_t k = static_cast<std::size_t>(uniform_int(rng, 0, B * B - 1));
    const double base = masked_contrastive_from_cosines(Tensor::from({B, B}, c), m, inv(0.1)).item();
    auto up = c;
    up[k] += 0.1 * uniform01(rng);
    const double moved = masked_contrastive_from_cosines(Tensor::from({B, B}, up), m, inv(0.1)).item();
    if (m[k])
      EXPECT_LE(moved, base);
    else
      EXPECT_GE(moved, base);
  }
}

TEST(CombinedLosses, Examples) {
  EXPECT_EQ(loss_cascaded_plus(1.0, 0.0), 1.0);
  EXPECT_EQ(loss_cascaded_plus(2.0, 4.0), 3.0);
  EXPECT_EQ(loss_cascaded_plus(2.0, 4.0, {0.0, 0.0, 0.0}), 0.0);
  EXPECT_EQ(loss_hybrid(1.0, 1.0), 2.0);
  EXPECT_EQ(loss_hybrid(0.0, 0.0), 0.0);
  EXPECT_EQ(loss_hybrid(1.7, 3.1, {1.0, 0.0, 0.25}), 1.7);
  EXPECT_EQ(loss_hybrid_plus(1.0, 1.0, 4.0), 3.0);
  EXPECT_EQ(loss_hybrid_plus(0.0, 0.0, 0.0), 0.0);
  LossWeights defaults;
  EXPECT_EQ(defaults.lambda_c, 1.0);
  EXPECT_EQ(defaults.lambda_p, 1.0);
  EXPECT_EQ(defaults.lambda_q, 0.25);
}

TEST(CombinedLosses, LinearInComponents) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    LossWeights w{uniform01(rng), uniform01(rng), uniform01(rng)};
    const double p = normal(rng), c = normal(rng), q = normal(rng), k = normal(rng);
    EXPECT_NEAR(loss_hybrid_plus(p, c, q, w), loss_hybrid(p, c, w) + w.lambda_q * q, 1e-12);
    EXPECT_NEAR(loss_hybrid_plus(k * p, k * c, k * q, w), k * loss_hybrid_plus(p, c, q, w), 1e-12);
    EXPECT_NEAR(loss_cascaded_plus(c + k, q, w) - loss_cascaded_plus(c, q, w), w.lambda_c * k, 1e-12);
    auto tp = Tensor::scalar(p), tc = Tensor::scalar(c), tq = Tensor::scalar(q);
    EXPECT_EQ(loss_hybrid_plus(tp, tc, tq, w).item(), loss_hybrid_plus(p, c, q, w));
    EXPECT_EQ(loss_hybrid(tp, tc, w).item(), loss_hybrid(p, c, w));
    EXPECT_EQ(loss_cascaded_plus(tc, tq, w).item(), loss_cascaded_plus(c, q, w));
  }
}
