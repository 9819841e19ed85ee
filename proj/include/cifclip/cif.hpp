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
#include <vector>

#include "cifclip/encoders.hpp"
#include "cifclip/params.hpp"
#include "cifclip/tensor.hpp"

namespace cifclip {

struct CifHeadConfig {
  std::size_t d_model = 64;
  std::size_t kernel_width = 3;
  double dropout = 0.5;
};

/// Weight predictor: conv1d -> dropout -> relu -> affine -> sigmoid.
class CifHead {
 public:
  CifHead() = default;
  CifHead(const std::string& prefix, CifHeadConfig config, ParamSet& params, std::uint64_t seed);

  // [B, T]; padded frames are exactly zero.
  Tensor compute_alpha(const FrameBatch& fb, bool training, Rng& rng) const;

  const CifHeadConfig& config() const { return config_; }

 private:
  CifHeadConfig config_;
  Tensor kernel_, conv_bias_, w_, b_;
};

// alpha * L_b / sum_t alpha_bt, row by row. A row summing to zero is a
// degenerate-input error.
Tensor scale_alpha(const Tensor& alpha, std::span<const double> targets);

// mean_b |sum_t alpha_bt - L_b|.
Tensor quantity_loss(const Tensor& alpha, std::span<const double> targets);

// max(1, round_half_even(ratio * length)) per utterance.
std::vector<double> cif_target_length(std::span<const std::size_t> lengths, double ratio = 0.05);

struct CifOptions {
  double beta = 1.0;
  double tail = 0.5;
  // Scaled mode: force exactly this many segments per utterance.
  std::optional<std::vector<std::size_t>> expected_lengths;
};

struct SegmentBatch {
  Tensor segments;  // [B, L_max, d], rows past counts[b] are zero; L_max >= 1
  std::vector<std::size_t> counts;
  // 1-based frame at which each emitted segment closed; a tail segment closes
  // at the last valid frame.
  std::vector<std::vector<std::size_t>> firing_frames;
  // Total alpha mass aggregated into each emitted segment.
  std::vector<std::vector<double>> masses;
};

/// Accumulate-and-fire over valid frames. Segment k collects the part of the
/// cumulative alpha mass lying in [(k-1)beta, k beta). The firing pattern is a
/// constant of the forward pass; gradients reach both features and alpha.
SegmentBatch integrate_and_fire(const FrameBatch& fb, const Tensor& alpha, const CifOptions& options = {});

}  // namespace cifclip
