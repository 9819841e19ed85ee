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

#include "cifclip/params.hpp"

namespace cifclip {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Linear ramp of the learning rate over the first warmup_steps updates.
  std::uint64_t warmup_steps = 0;
};

/// Adam with bias correction over a fixed list of trainable parameters.
/// A parameter without a grad this step is updated as if its grad were zero.
class AdamState {
 public:
  AdamState(AdamConfig config, std::vector<NamedTensor> params);

  void step();
  std::uint64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }
  double current_lr() const;

  // Moments under "opt/m/<name>", "opt/v/<name>" and the counter as "opt/step".
  std::vector<NamedTensor> state_tensors() const;
  void load_state(const std::vector<NamedTensor>& tensors);

 private:
  AdamConfig config_;
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace cifclip
