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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cifclip/tensor.hpp"

namespace cifclip {

/// Frozen token inventory shared with the text encoder.
struct Codebook {
  Tensor embeddings;  // [V, d]
  std::vector<std::string> tokens;
  std::vector<bool> is_stop;
  std::vector<bool> is_word_initial;
  Tensor mean;  // [d], population statistics of the rows
  Tensor std;   // [d]

  // Validates uniqueness and flag sizes and precomputes statistics; a
  // dimension with zero spread is a statistics error.
  static Codebook build(Tensor embeddings, std::vector<std::string> tokens, std::vector<bool> is_stop,
                        std::vector<bool> is_word_initial);

  std::size_t size() const { return tokens.size(); }
  std::size_t dim() const { return embeddings.dim(1); }
  std::optional<std::size_t> find(const std::string& token) const;
  // Cosine of z against every row.
  std::vector<double> cosines(std::span<const double> z) const;
  // Rows scaled to unit length, [V * d].
  const std::vector<double>& unit_rows() const { return unit_rows_; }

 private:
  std::vector<double> unit_rows_;
};

struct Quantized {
  Tensor q;                      // same shape as z: selected rows, straight-through backward
  std::vector<std::size_t> ids;  // one per row of z
  Tensor probs;                  // [..., V], constant
};

/// Straight-through quantization: the forward value is the embedding of the
/// most similar token (cosine, ties to the lower id), the backward pass is that
/// of softmax(cos / temperature) · E.
Quantized vector_quantize(const Tensor& z, const Codebook& cb, double temperature = 0.1);

// Fully differentiable relaxation softmax(cos / temperature) · E.
Tensor soft_quantize(const Tensor& z, const Codebook& cb, double temperature = 0.1);

struct TokenScore {
  std::size_t id;
  double cosine;
};

// K most similar tokens, descending cosine, ties to the lower id.
std::vector<TokenScore> nearest_topk(std::span<const double> z, const Codebook& cb, std::size_t k);

}  // namespace cifclip
