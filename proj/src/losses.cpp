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

#include "cifclip/losses.hpp"

#include <cmath>
#include <limits>

namespace cifclip {

namespace {

// log sum_{j in set} exp(v_j); also leaves the normalized weights in `p`.
double logsumexp(const std::vector<double>& v, const std::vector<std::size_t>& set, std::vector<double>& p) {
  double mx = -std::numeric_limits<double>::infinity();
  for (auto j : set) mx = std::max(mx, v[j]);
  double z = 0.0;
  for (auto j : set) z += std::exp(v[j] - mx);
  for (auto j : set) p[j] = std::exp(v[j] - mx) / z;
  return mx + std::log(z);
}

}  // namespace

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw Error(ErrorKind::dimension, "cosine_matrix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

Tensor masked_contrastive_from_cosines(const Tensor& cos, std::span<const std::uint8_t> mask, const Tensor& inv_tau) {
  if (cos.rank() != 2 || cos.dim(0) != cos.dim(1)) throw Error(ErrorKind::dimension, "contrastive loss needs [B, B]");
  const std::size_t B = cos.dim(0);
  if (mask.size() != B * B) throw Error(ErrorKind::dimension, "relatedness mask must be [B, B]");
  if (inv_tau.numel() != 1) throw Error(ErrorKind::dimension, "temperature must be a scalar");
  const double s = inv_tau.item();
  auto c = cos.data();

  // Direction 0 walks rows (audio anchors), direction 1 walks columns.
  // pos/neg weights per entry, per direction.
  std::vector<double> wpos(2 * B * B, 0.0), wneg(2 * B * B, 0.0);
  double total = 0.0;
  std::vector<double> v(B), p(B);
  std::vector<std::size_t> pos, neg;
  for (int dir = 0; dir < 2; ++dir)
    for (std::size_t i = 0; i < B; ++i) {
      pos.clear();
      neg.clear();
      for (std::size_t j = 0; j < B; ++j) {
        const std::size_t idx = dir == 0 ? i * B + j : j * B + i;
        v[j] = c[idx] * s;
        (mask[idx] ? pos : neg).push_back(j);
      }
      if (pos.empty() || neg.empty())
        throw Error(ErrorKind::mask, std::string(dir == 0 ? "row " : "column ") + std::to_string(i) +
                                         " of the relatedness mask needs both a positive and a negative");
      const double lp = logsumexp(v, pos, p);
      for (auto j : pos) wpos[dir * B * B + (dir == 0 ? i * B + j : j * B + i)] = p[j];
      const double ln = logsumexp(v, neg, p);
      for (auto j : neg) wneg[dir * B * B + (dir == 0 ? i * B + j : j * B + i)] = p[j];
      total += ln - lp;
    }
  const double scale = 0.5 / static_cast<double>(B);
  return Tensor::make_op({}, {total * scale}, {cos, inv_tau},
                         [cos, inv_tau, B, s, scale, wpos = std::move(wpos), wneg = std::move(wneg)](
                             std::span<const double>, std::span<const double> g) {
                           auto c = cos.data();
                           const bool want_c = cos.requires_grad(), want_s = inv_tau.requires_grad();
                           std::span<double> gc = want_c ? cos.grad_mut() : std::span<double>();
                           double gs = 0.0;
                           for (std::size_t dir = 0; dir < 2; ++dir)
                             for (std::size_t k = 0; k < B * B; ++k) {
                               const double w = wneg[dir * B * B + k] - wpos[dir * B * B + k];
                               if (want_c) gc[k] += g[0] * scale * s * w;
                               gs += w * c[k];
                             }
                           if (want_s) inv_tau.grad_mut()[0] += g[0] * scale * gs;
                         });
}

Tensor masked_contrastive(const Tensor& audio, const Tensor& image, std::span<const std::uint8_t> mask,
                          const Tensor& inv_tau) {
  if (audio.rank() != 2 || image.rank() != 2 || audio.dim(0) != image.dim(0))
    throw Error(ErrorKind::dimension, "contrastive loss needs matching [B, d] batches");
  return masked_contrastive_from_cosines(cosine_matrix(audio, image), mask, inv_tau);
}

double loss_cascaded_plus(double cascaded, double quantity, const LossWeights& w) {
  return w.lambda_c * cascaded + w.lambda_q * quantity;
}
double loss_hybrid(double parallel, double cascaded, const LossWeights& w) {
  return w.lambda_p * parallel + w.lambda_c * cascaded;
}
double loss_hybrid_plus(double parallel, double cascaded, double quantity, const LossWeights& w) {
  return w.lambda_p * parallel + w.lambda_c * cascaded + w.lambda_q * quantity;
}

Tensor loss_cascaded_plus(const Tensor& cascaded, const Tensor& quantity, const LossWeights& w) {
  return add(scale(cascaded, w.lambda_c), scale(quantity, w.lambda_q));
}
Tensor loss_hybrid(const Tensor& parallel, const Tensor& cascaded, const LossWeights& w) {
  return add(scale(parallel, w.lambda_p), scale(cascaded, w.lambda_c));
}
Tensor loss_hybrid_plus(const Tensor& parallel, const Tensor& cascaded, const Tensor& quantity,
                        const LossWeights& w) {
  return add(add(scale(parallel, w.lambda_p), scale(cascaded, w.lambda_c)), scale(quantity, w.lambda_q));
}

}  // namespace cifclip
