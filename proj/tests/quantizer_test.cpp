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

#include <algorithm>
#include <cmath>

#include "cifclip/quantizer.hpp"

using namespace cifclip;

namespace {

Codebook random_codebook(Rng& rng, std::size_t V, std::size_t d) {
  std::vector<std::string> tokens;
  for (std::size_t v = 0; v < V; ++v) tokens.push_back("t" + std::to_string(v));
  return Codebook::build(Tensor::randn({V, d}, rng, 1.0), tokens, std::vector<bool>(V, false),
                         std::vector<bool>(V, true));
}

Codebook identity_codebook(std::size_t V) {
  std::vector<double> e(V * V, 0.0);
  for (std::size_t v = 0; v < V; ++v) e[v * V + v] = 1.0;
  std::vector<std::string> tokens;
  for (std::size_t v = 0; v < V; ++v) tokens.push_back("e" + std::to_string(v));
  return Codebook::build(Tensor::from({V, V}, e), tokens, std::vector<bool>(V, false), std::vector<bool>(V, true));
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.shape().back();
  return {t.data().begin() + static_cast<std::ptrdiff_t>(i * d), t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

}  // namespace

TEST(Codebook, StatisticsAndValidation) {
  auto cb = Codebook::build(Tensor::from({2, 2}, {1, 0, 3, 2}), {"a", "b"}, {false, true}, {true, false});
  EXPECT_EQ(cb.mean.at({0}), 2.0);
  EXPECT_EQ(cb.std.at({0}), 1.0);
  EXPECT_EQ(cb.std.at({1}), 1.0);
  EXPECT_EQ(cb.find("b"), std::optional<std::size_t>(1));
  EXPECT_FALSE(cb.find("c"));
  try {
    Codebook::build(Tensor::from({2, 2}, {1, 0, 1, 2}), {"a", "b"}, {false, false}, {true, true});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::statistics);
  }
  EXPECT_THROW(Codebook::build(Tensor::from({2, 2}, {1, 0, 3, 2}), {"a", "a"}, {false, false}, {true, true}), Error);
  EXPECT_THROW(Codebook::build(Tensor::from({2, 2}, {1, 0, 3, 2}), {"a", "b"}, {false}, {true, true}), Error);
}

TEST(VectorQuantize, ExactRowMatches) {
  Rng rng(1);
  auto cb = random_codebook(rng, 12, 5);
  auto z = Tensor::from({1, 1, 5}, row(cb.embeddings, 7));
  auto r = vector_quantize(z, cb);
  EXPECT_EQ(r.ids, (std::vector<std::size_t>{7}));
  EXPECT_EQ(row(r.q, 0), row(cb.embeddings, 7));
  EXPECT_EQ(r.probs.shape(), (Shape{1, 1, 12}));
}

TEST(VectorQuantize, NearestByCosine) {
  auto cb = Codebook::build(Tensor::from({2, 2}, {1, 0, 0, 1}), {"x", "y"}, {false, false}, {true, true});
  auto r = vector_quantize(Tensor::from({1, 2}, {0.9, 0.1}), cb);
  EXPECT_EQ(r.ids, (std::vector<std::size_t>{0}));
}

TEST(VectorQuantize, StraightThroughGradientEqualsSoftPath) {
  Rng rng(2);
  auto cb = random_codebook(rng, 9, 4);
  for (int trial = 0; trial < 10; ++trial) {
    auto z = Tensor::randn({2, 3, 4}, rng, 1.0, true);
    auto w = Tensor::randn({2, 3, 4}, rng, 1.0);
    sum(mul(vector_quantize(z, cb, 0.3).q, w)).backward();
    std::vector<double> st(z.grad().begin(), z.grad().end());
    z.zero_grad();
    sum(mul(soft_quantize(z, cb, 0.3), w)).backward();
    for (std::size_t i = 0; i < st.size(); ++i) EXPECT_NEAR(st[i], z.grad()[i], 1e-12 * (1 + std::fabs(st[i])));
    z.zero_grad();
    EXPECT_LT(grad_check([&] { return sum(mul(soft_quantize(z, cb, 0.3), w)); }, {z}), 1e-4);
  }
}

TEST(VectorQuantize, InvalidTemperature) {
  Rng rng(3);
  auto cb = random_codebook(rng, 4, 3);
  for (double t : {0.0, -1.0}) {
    try {
      vector_quantize(Tensor::randn({2, 3}, rng, 1.0), cb, t);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::parameter);
    }
  }
}

TEST(VectorQuantize, IdempotentAndConsistentWithTopOne) {
  Rng rng(4);
  auto cb = random_codebook(rng, 20, 6);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = Tensor::randn({5, 6}, rng, 1.0);
    auto r = vector_quantize(z, cb);
    EXPECT_EQ(vector_quantize(r.q, cb).ids, r.ids);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(nearest_topk(row(z, i), cb, 1)[0].id, r.ids[i]);
  }
}

TEST(NearestTopk, FullRankingIsPermutation) {
  Rng rng(5);
  auto cb = random_codebook(rng, 15, 4);
  auto z = row(Tensor::randn({1, 4}, rng, 1.0), 0);
  auto all = nearest_topk(z, cb, 15);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < all.size(); ++i) {
    ids.push_back(all[i].id);
    if (i > 0) EXPECT_GE(all[i - 1].cosine, all[i].cosine);
  }
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(ids[i], i);
}

TEST(NearestTopk, SelfIsFirst) {
  Rng rng(6);
  auto cb = random_codebook(rng, 10, 5);
  auto top = nearest_topk(row(cb.embeddings, 3), cb, 5);
  EXPECT_EQ(top[0].id, 3u);
  EXPECT_NEAR(top[0].cosine, 1.0, 1e-15);
}

TEST(NearestTopk, OrthonormalMixture) {
  auto cb = identity_codebook(4);
  std::vector<double> z = {0.0, 0.6, 0.8, 0.0};
  auto top = nearest_topk(z, cb, 2);
  EXPECT_EQ(top[0].id, 2u);
  EXPECT_NEAR(top[0].cosine, 0.8, 1e-15);
  EXPECT_EQ(top[1].id, 1u);
}

TEST(NearestTopk, TiesBreakByLowerId) {
  auto cb = identity_codebook(4);
  std::vector<double> z = {0.0, 1.0, 0.0, 1.0};
  auto top = nearest_topk(z, cb, 4);
  EXPECT_EQ(top[0].id, 1u);
  EXPECT_EQ(top[1].id, 3u);
  EXPECT_EQ(top[2].id, 0u);
  EXPECT_EQ(top[3].id, 2u);
}

TEST(NearestTopk, ScaleInvariant) {
  Rng rng(7);
  auto cb = random_codebook(rng, 25, 6);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = row(Tensor::randn({1, 6}, rng, 1.0), 0);
    auto scaled = z;
    const double c = std::exp(4.0 * uniform01(rng) - 2.0);
    for (auto& v : scaled) v *= c;
    auto a = nearest_topk(z, cb, 5), b = nearest_topk(scaled, cb, 5);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i].id, b[i].id);
  }
}

TEST(NearestTopk, KOutOfRange) {
  auto cb = identity_codebook(3);
  std::vector<double> z = {1, 0, 0};
  EXPECT_THROW(nearest_topk(z, cb, 0), Error);
  EXPECT_THROW(nearest_topk(z, cb, 4), Error);
}
