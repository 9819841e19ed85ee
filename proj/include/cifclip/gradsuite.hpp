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
#include <string>
#include <vector>

namespace cifclip {

struct GradCheckItem {
  std::string name;
  double error = 0.0;  // max relative deviation from central differences
  bool passed = false;
};

/// Finite-difference checks of the trainable building blocks on small random
/// instances: conv1d, a transformer layer, the CIF weight head, accumulate-and-
/// fire away from firing thresholds, the soft quantization path, statistic
/// matching and the masked contrastive loss.
std::vector<GradCheckItem> run_gradient_suite(std::uint64_t seed, double threshold = 1e-4);

}  // namespace cifclip
