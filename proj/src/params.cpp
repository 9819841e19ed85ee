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

#include "cifclip/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace cifclip {

namespace {

constexpr char kMagic[] = "CIFG1";
constexpr std::size_t kMagicLen = 5;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

bool get_u64(std::istream& in, std::uint64_t& v) {
  in.read(reinterpret_cast<char*>(&v), 8);
  return in.gcount() == 8;
}

}  // namespace

Tensor& ParamSet::add(const std::string& name, Tensor tensor, bool trainable) {
  if (contains(name)) throw Error(ErrorKind::configuration, "duplicate parameter name " + name);
  tensor.set_requires_grad(trainable);
  items_.push_back({name, std::move(tensor)});
  return items_.back().tensor;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& it : items_)
    if (it.name == name) return it.tensor;
  throw Error(ErrorKind::configuration, "unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& it : items_)
    if (it.name == name) return true;
  return false;
}

std::vector<NamedTensor> ParamSet::trainable() const {
  std::vector<NamedTensor> out;
  for (const auto& it : items_)
    if (it.tensor.requires_grad()) out.push_back(it);
  return out;
}

std::vector<Tensor> ParamSet::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& it : items_)
    if (it.tensor.requires_grad()) out.push_back(it.tensor);
  return out;
}

void ParamSet::zero_grad() {
  for (auto& it : items_) it.tensor.zero_grad();
}

void ParamSet::assign_from(const std::vector<NamedTensor>& source, const std::string& prefix) {
  for (auto& it : items_) {
    const NamedTensor* src = find_tensor(source, prefix + it.name);
    if (!src) throw Error(ErrorKind::data, "checkpoint is missing " + prefix + it.name);
    if (src->tensor.shape() != it.tensor.shape())
      throw Error(ErrorKind::dimension, "checkpoint shape mismatch for " + it.name + ": " +
                                            shape_str(src->tensor.shape()) + " vs " + shape_str(it.tensor.shape()));
    auto dst = it.tensor.mutable_data();
    auto s = src->tensor.data();
    std::copy(s.begin(), s.end(), dst.begin());
  }
}

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kMagic, kMagicLen);
  for (const auto& t : tensors) {
    put_u64(out, t.name.size());
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u64(out, t.tensor.rank());
    for (auto d : t.tensor.shape()) put_u64(out, d);
    auto data = t.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (in.gcount() != static_cast<std::streamsize>(kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw Error(ErrorKind::parse, "not a CIFG1 checkpoint");
  std::vector<NamedTensor> out;
  std::uint64_t name_len = 0;
  while (get_u64(in, name_len)) {
    if (name_len > 4096) throw Error(ErrorKind::parse, "checkpoint name length out of range");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    std::uint64_t rank = 0;
    if (in.gcount() != static_cast<std::streamsize>(name_len) || !get_u64(in, rank) || rank == 0 || rank > 8)
      throw Error(ErrorKind::parse, "truncated checkpoint header for " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!get_u64(in, v) || v == 0) throw Error(ErrorKind::parse, "bad dimension in checkpoint entry " + name);
      d = v;
    }
    std::vector<double> data(shape_numel(shape));
    const auto bytes = static_cast<std::streamsize>(data.size() * sizeof(double));
    in.read(reinterpret_cast<char*>(data.data()), bytes);
    if (in.gcount() != bytes) throw Error(ErrorKind::parse, "truncated checkpoint data for " + name);
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  return out;
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  write_checkpoint(out, tensors);
  if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  return read_checkpoint(in);
}

std::vector<NamedTensor> with_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors)
    if (t.name.rfind(prefix, 0) == 0) out.push_back({t.name.substr(prefix.size()), t.tensor});
  return out;
}

std::vector<NamedTensor> add_prefix(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors) out.push_back({prefix + t.name, t.tensor});
  return out;
}

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

}  // namespace cifclip
