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

#include "cifclip/cif.hpp"

#include <cfenv>
#include <cmath>

namespace cifclip {

namespace {

// Cumulative sums that land within this distance below a threshold still fire;
// without it 0.7 + 0.6 + 0.7 would miss its second boundary by one ulp.
constexpr double kFireSlack = 1e-10;

void check_alpha(const Tensor& alpha, std::size_t batch, std::size_t len) {
  if (alpha.rank() != 2 || alpha.dim(0) != batch || alpha.dim(1) != len)
    throw Error(ErrorKind::dimension, "alpha " + shape_str(alpha.shape()) + " does not match the frame batch");
}

// How a piece's weight depends on alpha (t is the piece's frame):
//   whole: alpha_t; split: k beta - S_{t-1}; head: S_t - (k-1) beta;
//   beta: the constant beta (a segment filled inside a single frame).
enum class Piece : std::uint8_t { whole, split, head, beta };

struct Contribution {
  std::size_t segment;  // 0-based
  std::size_t frame;
  double weight;
  Piece kind;
};

}  // namespace

CifHead::CifHead(const std::string& prefix, CifHeadConfig config, ParamSet& params, std::uint64_t seed)
    : config_(config) {
  const std::size_t d = config.d_model;
  kernel_ = init_param(params, prefix + "kernel", {config.kernel_width, d, d},
                       std::sqrt(2.0 / static_cast<double>(config.kernel_width * d)), seed, true);
  conv_bias_ = params.add(prefix + "conv_bias", Tensor::zeros({d}), true);
  w_ = init_param(params, prefix + "w", {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)), seed, true);
  b_ = params.add(prefix + "b", Tensor::zeros({1}), true);
}

Tensor CifHead::compute_alpha(const FrameBatch& fb, bool training, Rng& rng) const {
  if (fb.width() != config_.d_model) throw Error(ErrorKind::dimension, "CIF head expects width d_model");
  Tensor h = conv1d(fb.features, kernel_, conv_bias_, 1, fb.lengths);
  h = relu(dropout(h, config_.dropout, training, rng));
  Tensor a = sigmoid(linear(h, w_, b_));  // [B, T, 1]
  return reshape(mask_rows(a, fb.row_mask()), {fb.batch(), fb.max_len()});
}

Tensor scale_alpha(const Tensor& alpha, std::span<const double> targets) {
  if (alpha.rank() != 2 || targets.size() != alpha.dim(0))
    throw Error(ErrorKind::dimension, "scale_alpha: alpha must be [B, T] with B targets");
  const std::size_t B = alpha.dim(0), T = alpha.dim(1);
  auto a = alpha.data();
  std::vector<double> sums(B, 0.0), out(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) sums[b] += a[b * T + t];
    if (!(sums[b] > 0.0)) throw Error(ErrorKind::degenerate_input, "scale_alpha: weights sum to zero");
    for (std::size_t t = 0; t < T; ++t) out[b * T + t] = a[b * T + t] / sums[b] * targets[b];
  }
  std::vector<double> L(targets.begin(), targets.end());
  return Tensor::make_op({B, T}, std::move(out), {alpha},
                         [alpha, B, T, sums, L](std::span<const double>, std::span<const double> g) {
                           auto a = alpha.data();
                           auto ga = alpha.grad_mut();
                           for (std::size_t b = 0; b < B; ++b) {
                             double dot = 0.0;
                             for (std::size_t t = 0; t < T; ++t) dot += g[b * T + t] * a[b * T + t];
                             dot /= sums[b];
                             for (std::size_t t = 0; t < T; ++t)
                               ga[b * T + t] += L[b] / sums[b] * (g[b * T + t] - dot);
                           }
                         });
}

Tensor quantity_loss(const Tensor& alpha, std::span<const double> targets) {
  if (alpha.rank() != 2 || targets.size() != alpha.dim(0))
    throw Error(ErrorKind::dimension, "quantity_loss: alpha must be [B, T] with B targets");
  const std::size_t B = alpha.dim(0), T = alpha.dim(1);
  auto a = alpha.data();
  std::vector<double> sign(B);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) s += a[b * T + t];
    const double diff = s - targets[b];
    loss += std::fabs(diff);
    sign[b] = diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0;
  }
  return Tensor::make_op({}, {loss / static_cast<double>(B)}, {alpha},
                         [alpha, B, T, sign](std::span<const double>, std::span<const double> g) {
                           auto ga = alpha.grad_mut();
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t t = 0; t < T; ++t)
                               ga[b * T + t] += g[0] * sign[b] / static_cast<double>(B);
                         });
}

std::vector<double> cif_target_length(std::span<const std::size_t> lengths, double ratio) {
  if (!(ratio > 0.0)) throw Error(ErrorKind::parameter, "target length ratio must be positive");
  const int previous = std::fegetround();
  std::fesetround(FE_TONEAREST);
  std::vector<double> out;
  for (auto len : lengths) out.push_back(std::max(1.0, std::nearbyint(ratio * static_cast<double>(len))));
  std::fesetround(previous);
  return out;
}

SegmentBatch integrate_and_fire(const FrameBatch& fb, const Tensor& alpha, const CifOptions& options) {
  const std::size_t B = fb.batch(), T = fb.max_len(), d = fb.width();
  check_alpha(alpha, B, T);
  const double beta = options.beta;
  if (!(beta > 0.0)) throw Error(ErrorKind::parameter, "firing threshold must be positive");
  if (options.expected_lengths && options.expected_lengths->size() != B)
    throw Error(ErrorKind::dimension, "expected lengths size mismatch");
  auto a = alpha.data();

  SegmentBatch out;
  out.counts.resize(B);
  out.firing_frames.resize(B);
  out.masses.resize(B);
  std::vector<std::vector<Contribution>> pieces(B);

  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = fb.lengths[b];
    auto& list = pieces[b];
    auto& fires = out.firing_frames[b];
    double prev = 0.0;  // S_{t-1}
    std::size_t k = 1;  // open segment, 1-based
    for (std::size_t t = 0; t < len; ++t) {
      const double at = a[b * T + t];
      if (at < 0.0) throw Error(ErrorKind::numeric, "negative CIF weight");
      const double cum = prev + at;
      bool opened_here = false;
      while (cum >= static_cast<double>(k) * beta - kFireSlack) {
        if (opened_here)
          list.push_back({k - 1, t, beta, Piece::beta});
        else
          list.push_back({k - 1, t, static_cast<double>(k) * beta - prev, Piece::split});
        fires.push_back(t + 1);
        ++k;
        opened_here = true;
      }
      if (opened_here)
        list.push_back({k - 1, t, cum - static_cast<double>(k - 1) * beta, Piece::head});
      else
        list.push_back({k - 1, t, at, Piece::whole});
      prev = cum;
    }
    const std::size_t fired = k - 1;
    const double residual = prev - static_cast<double>(fired) * beta;
    std::size_t count = fired;
    bool tail_emitted = false;
    if (len > 0 && residual > options.tail) {
      ++count;
      tail_emitted = true;
    }
    if (options.expected_lengths) {
      const std::size_t want = (*options.expected_lengths)[b];
      if (count + 1 == want && !tail_emitted && len > 0) {
        ++count;
        tail_emitted = true;
      } else if (count == want + 1) {
        --count;
        if (tail_emitted)
          tail_emitted = false;
        else
          fires.pop_back();
      } else if (count != want) {
        throw Error(ErrorKind::internal_consistency,
                    "CIF produced " + std::to_string(count) + " segments, expected " + std::to_string(want));
      }
    }
    if (tail_emitted) fires.push_back(len);
    out.counts[b] = count;
    std::erase_if(list, [count](const Contribution& c) { return c.segment >= count; });
    out.masses[b].assign(count, 0.0);
    for (const auto& c : list) out.masses[b][c.segment] += c.weight;
  }

  std::size_t lmax = 1;
  for (auto c : out.counts) lmax = std::max(lmax, c);
  std::vector<double> seg(B * lmax * d, 0.0);
  auto x = fb.features.data();
  for (std::size_t b = 0; b < B; ++b)
    for (const auto& c : pieces[b]) {
      const double* xt = x.data() + (b * T + c.frame) * d;
      double* s = seg.data() + (b * lmax + c.segment) * d;
      for (std::size_t j = 0; j < d; ++j) s[j] += c.weight * xt[j];
    }

  Tensor features = fb.features;
  out.segments = Tensor::make_op(
      {B, lmax, d}, std::move(seg), {features, alpha},
      [features, alpha, pieces = std::move(pieces), B, T, d, lmax](std::span<const double>,
                                                                   std::span<const double> g) {
        auto x = features.data();
        const bool want_x = features.requires_grad();
        const bool want_a = alpha.requires_grad();
        std::span<double> gx = want_x ? features.grad_mut() : std::span<double>();
        std::span<double> ga = want_a ? alpha.grad_mut() : std::span<double>();
        std::vector<double> prefix(T);  // adds to every alpha_s with s <= t
        for (std::size_t b = 0; b < B; ++b) {
          std::fill(prefix.begin(), prefix.end(), 0.0);
          for (const auto& c : pieces[b]) {
            const double* gs = g.data() + (b * lmax + c.segment) * d;
            const std::size_t row = (b * T + c.frame) * d;
            if (want_x)
              for (std::size_t j = 0; j < d; ++j) gx[row + j] += c.weight * gs[j];
            if (!want_a) continue;
            double gw = 0.0;
            for (std::size_t j = 0; j < d; ++j) gw += gs[j] * x[row + j];
            switch (c.kind) {
              case Piece::whole: ga[b * T + c.frame] += gw; break;
              case Piece::split:
                if (c.frame > 0) prefix[c.frame - 1] -= gw;
                break;
              case Piece::head: prefix[c.frame] += gw; break;
              case Piece::beta: break;
            }
          }
          if (!want_a) continue;
          double run = 0.0;
          for (std::size_t t = T; t-- > 0;) {
            run += prefix[t];
            ga[b * T + t] += run;
          }
        }
      });
  return out;
}

}  // namespace cifclip
