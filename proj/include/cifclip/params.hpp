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

#include "cifclip/tensor.hpp"

namespace cifclip {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered registry of named parameters. Frozen entries are stored with
/// requires_grad == false and never see an optimizer.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor tensor, bool trainable);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<NamedTensor>& items() const { return items_; }
  std::vector<NamedTensor> trainable() const;
  std::vector<Tensor> trainable_tensors() const;
  void zero_grad();

  // Values are copied into the existing tensors; every registered name must
  // be present in `source` with a matching shape.
  void assign_from(const std::vector<NamedTensor>& source, const std::string& prefix = "");

 private:
  std::vector<NamedTensor> items_;
};

// Checkpoint layout: "CIFG1", then per tensor
//   u64 name length, name bytes, u64 rank, rank x u64 dims, row-major f64
// all little-endian, repeated until end of file.
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);
void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

// Entries whose name starts with `prefix`, with the prefix stripped.
std::vector<NamedTensor> with_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix);
std::vector<NamedTensor> add_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix);
const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace cifclip
