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

#include <cstdint>
#include <span>
#include <vector>

#include "cifclip/tensor.hpp"

namespace cifclip {

struct LossWeights {
  double lambda_p = 1.0;
  double lambda_c = 1.0;
  double lambda_q = 0.25;
};

// Pairwise cosines of the rows of a [B, d] and b [N, d] -> [B, N].
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

/// Symmetric masked decoupled contrastive loss. For each anchor the positives
/// (mask 1) are scored against the negatives (mask 0) only:
///   -log( sum_pos exp(cos / tau) / sum_neg exp(cos / tau) ),
/// averaged over rows (audio -> image) and columns (image -> audio), then the
/// two directions are averaged. `mask` is [B*B] row-major; every row and column
/// needs a positive and a negative. `inv_tau` is a one-element tensor.
Tensor masked_contrastive(const Tensor& audio, const Tensor& image, std::span<const std::uint8_t> mask,
                          const Tensor& inv_tau);

// Same loss on a precomputed cosine matrix.
Tensor masked_contrastive_from_cosines(const Tensor& cos, std::span<const std::uint8_t> mask, const Tensor& inv_tau);

// lambda_c * cascaded + lambda_q * quantity
double loss_cascaded_plus(double cascaded, double quantity, const LossWeights& w = {});
// lambda_p * parallel + lambda_c * cascaded
double loss_hybrid(double parallel, double cascaded, const LossWeights& w = {});
// lambda_p * parallel + lambda_c * cascaded + lambda_q * quantity
double loss_hybrid_plus(double parallel, double cascaded, double quantity, const LossWeights& w = {});

Tensor loss_cascaded_plus(const Tensor& cascaded, const Tensor& quantity, const LossWeights& w = {});
Tensor loss_hybrid(const Tensor& parallel, const Tensor& cascaded, const LossWeights& w = {});
Tensor loss_hybrid_plus(const Tensor& parallel, const Tensor& cascaded, const Tensor& quantity,
                        const LossWeights& w = {});

}  // namespace cifclip
