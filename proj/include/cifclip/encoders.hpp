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
#include <utility>
#include <vector>

#include "cifclip/params.hpp"
#include "cifclip/tensor.hpp"

namespace cifclip {

// Deterministic per-parameter stream: initialization of one parameter does not
// depend on which other parameters exist.
Rng param_rng(std::uint64_t seed, const std::string& name);

// N(0, stddev^2) initialized parameter registered in `params`.
Tensor& init_param(ParamSet& params, const std::string& name, Shape shape, double stddev,
                   std::uint64_t seed, bool trainable);

// Sinusoidal positional table, [max_len, d] flattened.
std::vector<double> sinusoidal_table(std::size_t max_len, std::size_t d);

/// Padded frame-level features with per-utterance valid lengths. Padded rows
/// are zero.
struct FrameBatch {
  Tensor features;  // [B, T_max, d]
  std::vector<std::size_t> lengths;

  std::size_t batch() const { return features.dim(0); }
  std::size_t max_len() const { return features.dim(1); }
  std::size_t width() const { return features.dim(2); }
  // 1.0 for valid rows, 0.0 for padding; [B*T_max].
  std::vector<double> row_mask() const;
};

// Packs ragged [T_i, d] sequences into a zero-padded FrameBatch of constants.
FrameBatch pack_frames(const std::vector<std::vector<std::vector<double>>>& sequences);

struct TransformerConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_width = 128;
  std::size_t max_len = 512;
};

/// Pre-LN transformer encoder stack. Output shape equals input shape.
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(const std::string& prefix, TransformerConfig config, ParamSet& params,
                     std::uint64_t seed, bool trainable);

  // x: [B, T, d]; key_mask: [B*T], 1 where a position may be attended to.
  Tensor forward(const Tensor& x, std::span<const std::uint8_t> key_mask) const;
  const TransformerConfig& config() const { return config_; }

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
  };
  TransformerConfig config_;
  std::vector<Layer> layers_;
};

struct ExtractorConfig {
  std::size_t d_input = 20;
  std::size_t d_model = 64;
  std::size_t n_hidden = 4;
  std::size_t kernel_width = 3;
};

/// Frozen stack of conv1d+relu hidden layers standing in for a pretrained
/// speech model, read out through a learnable softmax-weighted layer sum.
class SpeechFeatureExtractor {
 public:
  SpeechFeatureExtractor() = default;
  SpeechFeatureExtractor(const std::string& prefix, ExtractorConfig config, ParamSet& params,
                         std::uint64_t seed);

  // Outputs of every frozen hidden layer; constants (no graph).
  std::vector<Tensor> hidden_states(const FrameBatch& raw) const;
  FrameBatch extract(const FrameBatch& raw) const;
  FrameBatch combine(const std::vector<Tensor>& hidden, const std::vector<std::size_t>& lengths) const;

  const Tensor& layer_logits() const { return layer_logits_; }
  Tensor& layer_logits() { return layer_logits_; }
  const ExtractorConfig& config() const { return config_; }

 private:
  ExtractorConfig config_;
  std::vector<Tensor> kernels_, biases_;
  Tensor layer_logits_;
};

/// Learnable CLS vectors: `n_parallel` (0 or 1) leading rows for the
/// utterance-level branch followed by `n_cascaded` rows for the keyword branch.
struct ClsBank {
  Tensor vectors;  // [n_parallel + n_cascaded, d] or undefined when empty
  std::size_t n_parallel = 0;
  std::size_t n_cascaded = 0;

  std::size_t size() const { return n_parallel + n_cascaded; }
  static ClsBank create(const std::string& name, std::size_t n_parallel, std::size_t n_cascaded,
                        std::size_t d_model, ParamSet& params, std::uint64_t seed);
};

struct ClsEncoding {
  Tensor cls_out;     // [B, n_cls, d], undefined when the bank is empty
  Tensor frames_out;  // [B, T, d], padded rows zero
};

/// Prepends the CLS bank to every utterance, encodes the whole sequence and
/// splits the result. Frames get sinusoidal positions; CLS vectors do not.
/// Cascaded CLS rows read from the sequence but are never attended to, so the
/// parallel CLS and the frames do not depend on them.
ClsEncoding encode_with_cls(const TransformerEncoder& encoder, const FrameBatch& fb, const ClsBank& cls);

struct TextEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_embed = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_width = 64;
  std::size_t max_len = 256;
};

/// Toy CLIP text tower: token table, positions, transformer, final norm,
/// pooling at the last valid position, linear projection.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const std::string& prefix, TextEncoderConfig config, ParamSet& params, std::uint64_t seed,
              bool trainable);

  Tensor encode_ids(const std::vector<std::vector<int>>& ids) const;
  // embs: [B, L, d_embed]; pooled at lengths[b] - 1.
  Tensor encode_embeddings(const Tensor& embs, std::span<const std::size_t> lengths) const;

  const Tensor& token_table() const { return token_table_; }
  const TextEncoderConfig& config() const { return config_; }

 private:
  TextEncoderConfig config_;
  Tensor token_table_;
  TransformerEncoder transformer_;
  Tensor ln_g_, ln_b_, proj_w_, proj_b_;
  std::vector<double> positions_;
};

struct ImageEncoderConfig {
  std::size_t d_image = 24;
  std::size_t d_hidden = 64;
  std::size_t d_embed = 32;
};

/// Toy CLIP image tower: affine, relu, affine.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const std::string& prefix, ImageEncoderConfig config, ParamSet& params, std::uint64_t seed,
               bool trainable);
  Tensor encode(const Tensor& images) const;  // [B, d_image] -> [B, d_embed]
  const ImageEncoderConfig& config() const { return config_; }

 private:
  ImageEncoderConfig config_;
  Tensor w1_, b1_, w2_, b2_;
};

}  // namespace cifclip
