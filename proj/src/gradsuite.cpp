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

#include "cifclip/gradsuite.hpp"

#include <cmath>

#include "cifclip/cif.hpp"
#include "cifclip/encoders.hpp"
#include "cifclip/losses.hpp"
#include "cifclip/quantizer.hpp"

namespace cifclip {

namespace {

// Cumulative sums keep `margin` away from every integer threshold and from the
// tail rule's cut-off.
bool away_from_boundaries(const std::vector<double>& a, double margin, double tail) {
  double cum = 0.0;
  for (double v : a) {
    cum += v;
    if (std::fabs(cum - std::round(cum)) < margin) return false;
  }
  return std::fabs((cum - std::floor(cum)) - tail) >= margin;
}

}  // namespace

std::vector<GradCheckItem> run_gradient_suite(std::uint64_t seed, double threshold) {
  std::vector<GradCheckItem> out;
  auto record = [&](const std::string& name, double err) { out.push_back({name, err, err < threshold}); };
  Rng rng(mix_seed(seed, 0x67726164));  // "grad"

  {
    auto x = Tensor::randn({2, 7, 3}, rng, 1.0, true);
    auto k = Tensor::randn({3, 3, 4}, rng, 0.5, true);
    auto b = Tensor::randn({4}, rng, 0.5, true);
    auto w = Tensor::randn({2, 7, 4}, rng, 1.0);
    std::vector<std::size_t> lengths{7, 5};
    record("conv1d", grad_check([&] { return sum(mul(conv1d(x, k, b, 1, lengths), w)); }, {x, k, b}));
  }
  {
    ParamSet ps;
    TransformerEncoder enc("tf/", {1, 8, 2, 16, 32}, ps, seed, true);
    auto x = Tensor::randn({2, 5, 8}, rng, 1.0, true);
    std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    auto w = Tensor::randn({2, 5, 8}, rng, 1.0);
    std::vector<Tensor> params = {x};
    for (const auto& nt : ps.items()) params.push_back(nt.tensor);
    record("transformer_layer", grad_check([&] { return sum(mul(enc.forward(x, mask), w)); }, params));
  }
  {
    ParamSet ps;
    CifHead head("cif/", {6, 3, 0.5}, ps, seed);
    auto x = Tensor::randn({2, 5, 6}, rng, 1.0, true);
    FrameBatch fb{x, {5, 3}};
    auto w = Tensor::randn({2, 5}, rng, 1.0);
    std::vector<Tensor> params = {x};
    for (const auto& nt : ps.items()) params.push_back(nt.tensor);
    record("compute_alpha", grad_check([&] { return sum(mul(head.compute_alpha(fb, false, rng), w)); }, params));
  }
  {
    double worst = 0.0;
    for (int checked = 0; checked < 5;) {
      const auto T = static_cast<std::size_t>(uniform_int(rng, 3, 9));
      std::vector<double> a(T);
      for (auto& v : a) v = 0.05 + 0.9 * uniform01(rng);
      if (!away_from_boundaries(a, 1e-3, 0.5)) continue;
      ++checked;
      auto x = Tensor::randn({1, T, 3}, rng, 1.0, true);
      auto alpha = Tensor::from({1, T}, a, true);
      FrameBatch fb{x, {T}};
      const std::size_t slots = integrate_and_fire(fb, alpha).segments.dim(1);
      auto w = Tensor::randn({1, slots, 3}, rng, 1.0);
      worst = std::max(worst, grad_check([&] { return sum(mul(integrate_and_fire(fb, alpha).segments, w)); },
                                         {x, alpha}));
    }
    record("integrate_and_fire", worst);
  }
  {
    std::vector<std::string> tokens;
    for (int i = 0; i < 9; ++i) tokens.push_back("t" + std::to_string(i));
    auto cb = Codebook::build(Tensor::randn({9, 4}, rng, 1.0), tokens, std::vector<bool>(9, false),
                              std::vector<bool>(9, true));
    auto z = Tensor::randn({3, 4}, rng, 1.0, true);
    auto w = Tensor::randn({3, 4}, rng, 1.0);
    record("vector_quantize_soft", grad_check([&] { return sum(mul(soft_quantize(z, cb, 0.3), w)); }, {z}));
  }
  {
    auto x = Tensor::randn({6, 4}, rng, 1.0, true);
    auto stats = RunningStats::init(4);
    auto tm = Tensor::randn({4}, rng, 1.0);
    auto ts = Tensor::full({4}, 0.7);
    auto w = Tensor::randn({6, 4}, rng, 1.0);
    record("normalize_to_stats",
           grad_check([&] { return sum(mul(normalize_to_stats(x, stats, tm, ts, true), w)); }, {x}));
  }
  {
    auto a = Tensor::randn({4, 6}, rng, 1.0, true), im = Tensor::randn({4, 6}, rng, 1.0, true);
    auto s = Tensor::from({1}, {1.0 / (0.2 + uniform01(rng))}, true);
    std::vector<std::uint8_t> m = {1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1};
    record("masked_contrastive", grad_check([&] { return masked_contrastive(a, im, m, s); }, {a, im, s}));
  }
  return out;
}

}  // namespace cifclip
