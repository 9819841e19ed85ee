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

#include "cifclip/cif.hpp"

using namespace cifclip;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

FrameBatch frames(std::vector<std::vector<std::vector<double>>> seqs) { return pack_frames(seqs); }

Tensor alpha_of(std::vector<std::vector<double>> rows) {
  std::size_t T = 0;
  for (auto& r : rows) T = std::max(T, r.size());
  std::vector<double> data(rows.size() * T, 0.0);
  for (std::size_t b = 0; b < rows.size(); ++b) std::copy(rows[b].begin(), rows[b].end(), data.begin() + b * T);
  return Tensor::from({rows.size(), T}, std::move(data));
}

std::vector<double> segment(const SegmentBatch& s, std::size_t b, std::size_t k) {
  const std::size_t L = s.segments.dim(1), d = s.segments.dim(2);
  auto v = s.segments.data();
  return {v.begin() + static_cast<std::ptrdiff_t>((b * L + k) * d),
          v.begin() + static_cast<std::ptrdiff_t>((b * L + k + 1) * d)};
}

void expect_vec_near(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

// Sequential reference: an accumulator that spills a frame's weight over the
// threshold, written independently of the production cumulative-mass form.
struct OracleResult {
  std::vector<std::vector<double>> segments;
  std::vector<std::size_t> fires;
};

OracleResult oracle(const std::vector<std::vector<double>>& x, const std::vector<double>& a, double beta, double tail,
                    std::optional<std::size_t> expected) {
  const std::size_t d = x.front().size();
  // Pass 1: weights per (segment, frame).
  std::vector<std::vector<std::pair<std::size_t, double>>> weights(1);
  std::vector<std::size_t> fires;
  double acc = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (acc + a[t] < beta - 1e-10) {
      acc += a[t];
      weights.back().push_back({t, a[t]});
      continue;
    }
    const double r = beta - acc;
    weights.back().push_back({t, r});
    fires.push_back(t + 1);
    double rem = a[t] - r;
    while (rem >= beta - 1e-10) {
      weights.push_back({{t, beta}});
      fires.push_back(t + 1);
      rem -= beta;
    }
    weights.push_back({{t, rem}});
    acc = rem;
  }
  std::size_t count = fires.size();
  bool tail_out = acc > tail;
  if (tail_out) ++count;
  if (expected) {
    if (count + 1 == *expected && !tail_out) {
      tail_out = true;
      ++count;
    } else if (count == *expected + 1) {
      if (tail_out)
        tail_out = false;
      else
        fires.pop_back();
      --count;
    }
  }
  if (tail_out) fires.push_back(a.size());
  // Pass 2: weighted sums.
  OracleResult out;
  out.fires = fires;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<double> s(d, 0.0);
    for (auto [t, w] : weights[k])
      for (std::size_t j = 0; j < d; ++j) s[j] += w * x[t][j];
    out.segments.push_back(s);
  }
  return out;
}

std::vector<std::vector<double>> random_seq(Rng& rng, std::size_t T, std::size_t d) {
  std::vector<std::vector<double>> s(T, std::vector<double>(d));
  for (auto& f : s)
    for (auto& v : f) v = normal(rng);
  return s;
}

// Cumulative sums and the residual stay at least `margin` from every firing
// threshold and from the tail threshold.
bool away_from_boundaries(const std::vector<double>& a, double margin, double tail) {
  double cum = 0.0;
  for (double v : a) {
    cum += v;
    if (std::fabs(cum - std::round(cum)) < margin) return false;
  }
  return std::fabs((cum - std::floor(cum)) - tail) >= margin;
}

}  // namespace

TEST(ComputeAlpha, ZeroWeightsGiveOneHalf) {
  ParamSet ps;
  CifHead head("spc/cif/", {8, 3, 0.5}, ps, 1);
  for (const auto& [name, t] : ps.items())
    for (auto& v : const_cast<Tensor&>(t).mutable_data()) v = 0.0;
  Rng rng(1);
  auto fb = frames({random_seq(rng, 4, 8), random_seq(rng, 2, 8)});
  auto a = head.compute_alpha(fb, false, rng);
  EXPECT_EQ(values(a), (std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0, 0}));
}

TEST(ComputeAlpha, RangeAndPadding) {
  ParamSet ps;
  CifHead head("spc/cif/", {8, 3, 0.5}, ps, 2);
  Rng rng(2);
  auto fb = frames({random_seq(rng, 6, 8), random_seq(rng, 3, 8)});
  for (bool training : {false, true}) {
    auto a = head.compute_alpha(fb, training, rng);
    for (std::size_t t = 0; t < 6; ++t) {
      EXPECT_GT(a.at({0, t}), 0.0);
      EXPECT_LT(a.at({0, t}), 1.0);
    }
    for (std::size_t t = 3; t < 6; ++t) EXPECT_EQ(a.at({1, t}), 0.0);
  }
}

TEST(ComputeAlpha, KernelGradientMatchesFiniteDifferences) {
  ParamSet ps;
  CifHead head("spc/cif/", {6, 3, 0.5}, ps, 3);
  Rng rng(3);
  auto fb = frames({random_seq(rng, 5, 6), random_seq(rng, 3, 6)});
  std::vector<Tensor> params = {ps.get("spc/cif/kernel"), ps.get("spc/cif/w")};
  auto f = [&] { return sum(mul(head.compute_alpha(fb, false, rng), head.compute_alpha(fb, false, rng))); };
  EXPECT_LT(grad_check(f, params), 1e-4);
}

TEST(ScaleAlpha, Examples) {
  std::vector<double> L = {2.0};
  auto s = scale_alpha(alpha_of({{0.2, 0.4, 0.4}}), L);
  expect_vec_near(values(s), {0.4, 0.8, 0.8}, 1e-15);
  std::vector<double> L3 = {1.5};
  auto fixed = alpha_of({{0.5, 0.25, 0.75}});
  EXPECT_EQ(values(scale_alpha(fixed, L3)), values(fixed));
}

TEST(ScaleAlpha, SumsToTargetOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 1, 30));
    std::vector<double> row(T + 3, 0.0);  // padded tail stays zero
    for (std::size_t t = 0; t < T; ++t) row[t] = 0.001 + 0.998 * uniform01(rng);
    std::vector<double> L = {1.0 + 9.0 * uniform01(rng)};
    auto s = scale_alpha(alpha_of({row}), L);
    double total = 0;
    for (double v : s.data()) total += v;
    ASSERT_NEAR(total, L[0], 1e-9) << "seed " << seed;
    for (std::size_t t = T; t < T + 3; ++t) ASSERT_EQ(s.at({0, t}), 0.0);
  }
}

TEST(ScaleAlpha, ZeroSumIsDegenerate) {
  std::vector<double> L = {1.0};
  try {
    scale_alpha(alpha_of({{0.0, 0.0}}), L);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_input);
  }
}

TEST(ScaleAlpha, GradCheck) {
  Rng rng(4);
  auto a = Tensor::from({2, 3}, {0.2, 0.5, 0.9, 0.3, 0.3, 0.6}, true);
  auto r = Tensor::randn({2, 3}, rng, 1.0);
  std::vector<double> L = {2.0, 3.5};
  EXPECT_LT(grad_check([&] { return sum(mul(scale_alpha(a, L), r)); }, {a}), 1e-6);
}

TEST(QuantityLoss, Examples) {
  std::vector<double> L = {2.0};
  EXPECT_EQ(quantity_loss(alpha_of({{0.5, 0.5, 0.5, 0.5}}), L).item(), 0.0);
  EXPECT_NEAR(quantity_loss(alpha_of({{0.9, 0.9, 0.9}}), L).item(), 0.7, 1e-15);
}

TEST(QuantityLoss, GradientIsSignOfExcess) {
  auto over = Tensor::from({1, 3}, {0.9, 0.9, 0.9}, true);
  std::vector<double> L = {2.0};
  quantity_loss(over, L).backward();
  EXPECT_EQ(values(Tensor::from({3}, {over.grad().begin(), over.grad().end()})), (std::vector<double>{1, 1, 1}));
  auto under = Tensor::from({1, 2}, {0.2, 0.3}, true);
  quantity_loss(under, L).backward();
  EXPECT_EQ(under.grad()[0], -1.0);
  EXPECT_EQ(under.grad()[1], -1.0);
}

TEST(QuantityLoss, AveragesOverBatch) {
  std::vector<double> L = {1.0, 1.0};
  EXPECT_NEAR(quantity_loss(alpha_of({{0.5, 1.0}, {0.5}}), L).item(), 0.5 * (0.5 + 0.5), 1e-15);
}

TEST(IntegrateAndFire, EachFrameFillsThreshold) {
  auto fb = frames({{{1, 2}, {3, 4}}});
  auto s = integrate_and_fire(fb, alpha_of({{1.0, 1.0}}));
  ASSERT_EQ(s.counts[0], 2u);
  EXPECT_EQ(segment(s, 0, 0), (std::vector<double>{1, 2}));
  EXPECT_EQ(segment(s, 0, 1), (std::vector<double>{3, 4}));
  EXPECT_EQ(s.firing_frames[0], (std::vector<std::size_t>{1, 2}));
}

TEST(IntegrateAndFire, HandTracedSplit) {
  auto fb = frames({{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}});
  auto s = integrate_and_fire(fb, alpha_of({{0.7, 0.6, 0.7}}));
  ASSERT_EQ(s.counts[0], 2u);
  expect_vec_near(segment(s, 0, 0), {0.7, 0.3, 0.0}, 1e-12);
  expect_vec_near(segment(s, 0, 1), {0.0, 0.3, 0.7}, 1e-12);
  EXPECT_EQ(s.firing_frames[0], (std::vector<std::size_t>{2, 3}));
}

TEST(IntegrateAndFire, MultiFireWithinOneFrame) {
  auto fb = frames({{{2, -1}}});
  auto s = integrate_and_fire(fb, alpha_of({{2.5}}));
  ASSERT_EQ(s.counts[0], 2u);
  EXPECT_EQ(segment(s, 0, 0), (std::vector<double>{2, -1}));
  EXPECT_EQ(segment(s, 0, 1), (std::vector<double>{2, -1}));
  EXPECT_EQ(s.firing_frames[0], (std::vector<std::size_t>{1, 1}));
}

TEST(IntegrateAndFire, TailAboveThresholdIsEmitted) {
  auto fb = frames({{{1}, {1}}});
  auto s = integrate_and_fire(fb, alpha_of({{0.4, 0.3}}));
  ASSERT_EQ(s.counts[0], 1u);
  EXPECT_NEAR(segment(s, 0, 0)[0], 0.7, 1e-15);
  EXPECT_EQ(s.firing_frames[0], (std::vector<std::size_t>{2}));
  auto none = integrate_and_fire(fb, alpha_of({{0.2, 0.3}}));
  EXPECT_EQ(none.counts[0], 0u);
  EXPECT_EQ(none.segments.dim(1), 1u);
}

TEST(IntegrateAndFire, ExpectedLengthCorrections) {
  auto fb = frames({{{1}, {2}, {3}}});
  CifOptions opts;
  opts.expected_lengths = std::vector<std::size_t>{2};
  // One fire plus a 0.4 residual: short by one, the residual is emitted.
  auto s = integrate_and_fire(fb, alpha_of({{0.5, 0.5, 0.4}}), opts);
  EXPECT_EQ(s.counts[0], 2u);
  EXPECT_NEAR(segment(s, 0, 1)[0], 0.4 * 3, 1e-12);
  EXPECT_EQ(s.firing_frames[0], (std::vector<std::size_t>{2, 3}));
  // Three segments against two expected: the last is dropped.
  opts.expected_lengths = std::vector<std::size_t>{2};
  auto t = integrate_and_fire(fb, alpha_of({{1.0, 1.0, 0.9}}), opts);
  EXPECT_EQ(t.counts[0], 2u);
  EXPECT_EQ(t.firing_frames[0], (std::vector<std::size_t>{1, 2}));
  opts.expected_lengths = std::vector<std::size_t>{5};
  try {
    integrate_and_fire(fb, alpha_of({{1.0, 1.0, 0.9}}), opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::internal_consistency);
  }
}

TEST(IntegrateAndFire, MatchesSequentialOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t B = static_cast<std::size_t>(uniform_int(rng, 1, 3)), d = 3;
    std::vector<std::vector<std::vector<double>>> seqs;
    std::vector<std::vector<double>> alphas;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 1, 12));
      seqs.push_back(random_seq(rng, T, d));
      std::vector<double> a(T);
      // Mix raw-range weights with occasional large scaled ones.
      for (auto& v : a) v = uniform01(rng) < 0.15 ? 3.0 * uniform01(rng) : uniform01(rng);
      alphas.push_back(a);
    }
    auto s = integrate_and_fire(frames(seqs), alpha_of(alphas));
    for (std::size_t b = 0; b < B; ++b) {
      auto ref = oracle(seqs[b], alphas[b], 1.0, 0.5, std::nullopt);
      ASSERT_EQ(s.counts[b], ref.segments.size()) << "trial " << trial;
      EXPECT_EQ(s.firing_frames[b], ref.fires);
      for (std::size_t k = 0; k < s.counts[b]; ++k) expect_vec_near(segment(s, b, k), ref.segments[k], 1e-12);
    }
  }
}

TEST(IntegrateAndFire, ScaledLengthIsExact) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 1, 40));
    std::vector<double> a(T);
    for (auto& v : a) v = 0.001 + 0.998 * uniform01(rng);
    const std::size_t L = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(T)));
    auto fb = frames({random_seq(rng, T, 2)});
    std::vector<double> target = {static_cast<double>(L)};
    CifOptions opts;
    opts.expected_lengths = std::vector<std::size_t>{L};
    auto s = integrate_and_fire(fb, scale_alpha(alpha_of({a}), target), opts);
    ASSERT_EQ(s.counts[0], L) << "trial " << trial;
    ASSERT_EQ(s.firing_frames[0].size(), L);
    auto ref = oracle(random_seq(rng, T, 2), values(scale_alpha(alpha_of({a}), target)), 1.0, 0.5, L);
    EXPECT_EQ(ref.fires, s.firing_frames[0]);
  }
}

TEST(IntegrateAndFire, MonotoneContiguousAndConservative) {
  Rng rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 1, 20));
    std::vector<double> a(T);
    for (auto& v : a) v = uniform01(rng) < 0.1 ? 2.5 * uniform01(rng) : uniform01(rng);
    // tail = 0 keeps every residual, so nothing is suppressed.
    CifOptions opts;
    opts.tail = 0.0;
    auto s = integrate_and_fire(frames({random_seq(rng, T, 2)}), alpha_of({a}), opts);
    const auto& f = s.firing_frames[0];
    for (std::size_t i = 1; i < f.size(); ++i) ASSERT_LE(f[i - 1], f[i]);
    double mass = 0, total = 0;
    for (double m : s.masses[0]) mass += m;
    for (double v : a) total += v;
    EXPECT_NEAR(mass, total, 1e-9);
  }
  // Contiguity: one-hot frames expose which frames feed each segment.
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 2, 10));
    std::vector<std::vector<double>> eye(T, std::vector<double>(T, 0.0));
    for (std::size_t t = 0; t < T; ++t) eye[t][t] = 1.0;
    std::vector<double> a(T);
    for (auto& v : a) v = 0.05 + 0.9 * uniform01(rng);
    auto s = integrate_and_fire(frames({eye}), alpha_of({a}));
    std::vector<int> uses(T, 0);
    std::size_t last_first = 0;
    for (std::size_t k = 0; k < s.counts[0]; ++k) {
      auto seg = segment(s, 0, k);
      std::size_t first = T, last = 0;
      for (std::size_t t = 0; t < T; ++t)
        if (seg[t] > 1e-12) {
          first = std::min(first, t);
          last = std::max(last, t);
          ++uses[t];
        }
      for (std::size_t t = first; t <= last; ++t) EXPECT_GT(seg[t], 1e-12);
      EXPECT_GE(first, last_first);
      last_first = first;
    }
    for (int u : uses) EXPECT_LE(u, 2);
  }
}

TEST(IntegrateAndFire, GradCheckOnFeaturesAndWeights) {
  Rng rng(14);
  int checked = 0;
  while (checked < 20) {
    const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 2, 9));
    std::vector<double> a(T);
    for (auto& v : a) v = 0.05 + 0.9 * uniform01(rng);
    if (!away_from_boundaries(a, 1e-3, 0.5)) continue;
    ++checked;
    auto x = Tensor::randn({1, T, 3}, rng, 1.0, true);
    auto alpha = Tensor::from({1, T}, a, true);
    FrameBatch fb{x, {T}};
    // Fixed readout per segment slot; the slot count is stable because sums stay
    // away from thresholds.
    const std::size_t slots = integrate_and_fire(fb, alpha).segments.dim(1);
    auto w = Tensor::randn({1, slots, 3}, rng, 1.0);
    auto g = [&] { return sum(mul(integrate_and_fire(fb, alpha).segments, w)); };
    EXPECT_LT(grad_check(g, {x, alpha}), 1e-4);
  }
}

TEST(IntegrateAndFire, GradCheckThroughScaling) {
  Rng rng(15);
  int checked = 0;
  while (checked < 20) {
    const std::size_t T = static_cast<std::size_t>(uniform_int(rng, 3, 10));
    std::vector<double> a(T);
    for (auto& v : a) v = 0.05 + 0.9 * uniform01(rng);
    const std::size_t L = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(T) - 1));
    std::vector<double> target = {static_cast<double>(L)};
    auto scaled = values(scale_alpha(alpha_of({a}), target));
    scaled.pop_back();  // the last cumulative sum sits on L by construction
    if (!away_from_boundaries(scaled, 1e-3, 2.0)) continue;
    ++checked;
    auto x = Tensor::randn({1, T, 2}, rng, 1.0, true);
    auto alpha = Tensor::from({1, T}, a, true);
    FrameBatch fb{x, {T}};
    CifOptions opts;
    opts.expected_lengths = std::vector<std::size_t>{L};
    auto w = Tensor::randn({1, L, 2}, rng, 1.0);
    auto g = [&] { return sum(mul(integrate_and_fire(fb, scale_alpha(alpha, target), opts).segments, w)); };
    EXPECT_LT(grad_check(g, {x, alpha}), 1e-4);
  }
}

TEST(TargetLength, Examples) {
  std::vector<std::size_t> lengths = {100, 3, 90, 110, 0};
  EXPECT_EQ(cif_target_length(lengths), (std::vector<double>{5, 1, 4, 6, 1}));
  EXPECT_THROW(cif_target_length(lengths, 0.0), Error);
}
