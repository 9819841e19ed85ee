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

#include "cifclip/optim.hpp"

#include <algorithm>
#include <cmath>

namespace cifclip {

AdamState::AdamState(AdamConfig config, std::vector<NamedTensor> params)
    : config_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

double AdamState::current_lr() const {
  if (config_.warmup_steps == 0) return config_.lr;
  const double t = static_cast<double>(std::max<std::uint64_t>(step_, 1));
  return config_.lr * std::min(1.0, t / static_cast<double>(config_.warmup_steps));
}

void AdamState::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw Error(ErrorKind::numeric, "non-finite gradient in parameter " + p.name);
  }
  ++step_;
  const double lr = current_lr();
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    auto w = t.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    const bool has = t.has_grad();
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

std::vector<NamedTensor> AdamState::state_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.push_back({"opt/m/" + params_[k].name, Tensor::from(params_[k].tensor.shape(), m_[k])});
    out.push_back({"opt/v/" + params_[k].name, Tensor::from(params_[k].tensor.shape(), v_[k])});
  }
  out.push_back({"opt/step", Tensor::scalar(static_cast<double>(step_))});
  return out;
}

void AdamState::load_state(const std::vector<NamedTensor>& tensors) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto* m = find_tensor(tensors, "opt/m/" + params_[k].name);
    const auto* v = find_tensor(tensors, "opt/v/" + params_[k].name);
    if (!m || !v) throw Error(ErrorKind::data, "optimizer state missing for " + params_[k].name);
    if (m->tensor.numel() != m_[k].size() || v->tensor.numel() != v_[k].size())
      throw Error(ErrorKind::dimension, "optimizer state shape mismatch for " + params_[k].name);
    m_[k].assign(m->tensor.data().begin(), m->tensor.data().end());
    v_[k].assign(v->tensor.data().begin(), v->tensor.data().end());
  }
  const auto* s = find_tensor(tensors, "opt/step");
  if (!s) throw Error(ErrorKind::data, "optimizer step counter missing");
  step_ = static_cast<std::uint64_t>(s->tensor.item());
}

}  // namespace cifclip
