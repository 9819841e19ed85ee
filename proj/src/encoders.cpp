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

#include "cifclip/encoders.hpp"

#include <cmath>

namespace cifclip {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor& ones_param(ParamSet& params, const std::string& name, std::size_t n, bool trainable) {
  return params.add(name, Tensor::full({n}, 1.0), trainable);
}

Tensor& zeros_param(ParamSet& params, const std::string& name, std::size_t n, bool trainable) {
  return params.add(name, Tensor::zeros({n}), trainable);
}

}  // namespace

Rng param_rng(std::uint64_t seed, const std::string& name) { return Rng(mix_seed(seed, fnv1a(name))); }

Tensor& init_param(ParamSet& params, const std::string& name, Shape shape, double stddev,
                   std::uint64_t seed, bool trainable) {
  Rng rng = param_rng(seed, name);
  return params.add(name, Tensor::randn(std::move(shape), rng, stddev), trainable);
}

std::vector<double> sinusoidal_table(std::size_t max_len, std::size_t d) {
  std::vector<double> table(max_len * d);
  for (std::size_t pos = 0; pos < max_len; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      table[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) table[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  return table;
}

std::vector<double> FrameBatch::row_mask() const {
  const std::size_t b = batch(), t = max_len();
  std::vector<double> mask(b * t, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < lengths[i]; ++j) mask[i * t + j] = 1.0;
  return mask;
}

FrameBatch pack_frames(const std::vector<std::vector<std::vector<double>>>& sequences) {
  if (sequences.empty()) throw Error(ErrorKind::data, "empty frame batch");
  std::size_t t_max = 0, d = 0;
  for (const auto& s : sequences) {
    if (s.empty()) throw Error(ErrorKind::data, "empty frame sequence");
    t_max = std::max(t_max, s.size());
    d = s.front().size();
  }
  std::vector<double> data(sequences.size() * t_max * d, 0.0);
  std::vector<std::size_t> lengths;
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    lengths.push_back(sequences[b].size());
    for (std::size_t t = 0; t < sequences[b].size(); ++t) {
      if (sequences[b][t].size() != d) throw Error(ErrorKind::dimension, "ragged frame width");
      std::copy(sequences[b][t].begin(), sequences[b][t].end(), data.begin() + (b * t_max + t) * d);
    }
  }
  return {Tensor::from({sequences.size(), t_max, d}, std::move(data)), std::move(lengths)};
}

// ---- transformer -------------------------------------------------------------

TransformerEncoder::TransformerEncoder(const std::string& prefix, TransformerConfig config, ParamSet& params,
                                       std::uint64_t seed, bool trainable)
    : config_(config) {
  if (config.d_model % config.n_heads != 0)
    throw Error(ErrorKind::configuration, "d_model must be divisible by n_heads");
  const std::size_t d = config.d_model, f = config.ffn_width;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + "/";
    Layer layer;
    layer.ln1_g = ones_param(params, p + "ln1_g", d, trainable);
    layer.ln1_b = zeros_param(params, p + "ln1_b", d, trainable);
    layer.w_qkv = init_param(params, p + "w_qkv", {d, 3 * d}, sd, seed, trainable);
    layer.b_qkv = zeros_param(params, p + "b_qkv", 3 * d, trainable);
    layer.w_o = init_param(params, p + "w_o", {d, d}, 0.5 * sd, seed, trainable);
    layer.b_o = zeros_param(params, p + "b_o", d, trainable);
    layer.ln2_g = ones_param(params, p + "ln2_g", d, trainable);
    layer.ln2_b = zeros_param(params, p + "ln2_b", d, trainable);
    layer.w_ff1 = init_param(params, p + "w_ff1", {d, f}, sd, seed, trainable);
    layer.b_ff1 = zeros_param(params, p + "b_ff1", f, trainable);
    layer.w_ff2 = init_param(params, p + "w_ff2", {f, d}, 0.5 / std::sqrt(static_cast<double>(f)), seed, trainable);
    layer.b_ff2 = zeros_param(params, p + "b_ff2", d, trainable);
    layers_.push_back(std::move(layer));
  }
}

Tensor TransformerEncoder::forward(const Tensor& x, std::span<const std::uint8_t> key_mask) const {
  if (x.rank() != 3 || x.dim(2) != config_.d_model)
    throw Error(ErrorKind::dimension, "transformer input " + shape_str(x.shape()));
  Tensor h = x;
  for (const auto& L : layers_) {
    Tensor a = layer_norm(h, L.ln1_g, L.ln1_b);
    Tensor att = multi_head_attention(linear(a, L.w_qkv, L.b_qkv), config_.n_heads, key_mask);
    h = add(h, linear(att, L.w_o, L.b_o));
    Tensor f = layer_norm(h, L.ln2_g, L.ln2_b);
    f = linear(relu(linear(f, L.w_ff1, L.b_ff1)), L.w_ff2, L.b_ff2);
    h = add(h, f);
  }
  return h;
}

// ---- speech feature extractor ------------------------------------------------

SpeechFeatureExtractor::SpeechFeatureExtractor(const std::string& prefix, ExtractorConfig config,
                                               ParamSet& params, std::uint64_t seed)
    : config_(config) {
  if (config.n_hidden == 0) throw Error(ErrorKind::configuration, "extractor needs at least one hidden layer");
  for (std::size_t l = 0; l < config.n_hidden; ++l) {
    const std::size_t d_in = l == 0 ? config.d_input : config.d_model;
    const double sd = std::sqrt(2.0 / static_cast<double>(config.kernel_width * d_in));
    const std::string p = prefix + "hidden" + std::to_string(l) + "/";
    kernels_.push_back(init_param(params, p + "kernel", {config.kernel_width, d_in, config.d_model}, sd, seed, false));
    biases_.push_back(init_param(params, p + "bias", {config.d_model}, 0.1, seed, false));
  }
  layer_logits_ = params.add(prefix + "layer_logits", Tensor::zeros({config.n_hidden}), true);
}

std::vector<Tensor> SpeechFeatureExtractor::hidden_states(const FrameBatch& raw) const {
  if (raw.width() != config_.d_input)
    throw Error(ErrorKind::dimension, "extractor expects width " + std::to_string(config_.d_input));
  for (auto l : raw.lengths)
    if (l == 0) throw Error(ErrorKind::data, "empty speech sequence");
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  Tensor h = raw.features;
  for (std::size_t l = 0; l < kernels_.size(); ++l) {
    h = relu(conv1d(h, kernels_[l], biases_[l], 1, raw.lengths));
    out.push_back(h);
  }
  return out;
}

FrameBatch SpeechFeatureExtractor::combine(const std::vector<Tensor>& hidden,
                                           const std::vector<std::size_t>& lengths) const {
  if (hidden.size() != config_.n_hidden) throw Error(ErrorKind::dimension, "hidden state count mismatch");
  const Shape shape = hidden.front().shape();
  const std::size_t n = hidden.front().numel();
  std::vector<Tensor> rows;
  for (const auto& h : hidden) rows.push_back(reshape(h, {1, n}));
  Tensor weights = reshape(softmax(layer_logits_), {1, config_.n_hidden});
  Tensor mixed = matmul(weights, concat(rows, 0));
  return {reshape(mixed, shape), lengths};
}

FrameBatch SpeechFeatureExtractor::extract(const FrameBatch& raw) const {
  return combine(hidden_states(raw), raw.lengths);
}

// ---- CLS bank ----------------------------------------------------------------

ClsBank ClsBank::create(const std::string& name, std::size_t n_parallel, std::size_t n_cascaded,
                        std::size_t d_model, ParamSet& params, std::uint64_t seed) {
  if (n_parallel > 1) throw Error(ErrorKind::configuration, "at most one parallel CLS token");
  ClsBank bank;
  bank.n_parallel = n_parallel;
  bank.n_cascaded = n_cascaded;
  const std::size_t n = n_parallel + n_cascaded;
  if (n == 0) return bank;
  // Row streams are keyed by role so a parallel-only bank and a hybrid bank
  // share their parallel row.
  std::vector<double> data;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string role = i < n_parallel ? "parallel" : "cascaded" + std::to_string(i - n_parallel);
    Rng rng = param_rng(seed, name + "/" + role);
    for (std::size_t j = 0; j < d_model; ++j) data.push_back(normal(rng));
  }
  bank.vectors = params.add(name, Tensor::from({n, d_model}, std::move(data)), true);
  return bank;
}

ClsEncoding encode_with_cls(const TransformerEncoder& encoder, const FrameBatch& fb, const ClsBank& cls) {
  const std::size_t B = fb.batch(), T = fb.max_len(), d = fb.width();
  const std::size_t n = cls.size();
  const auto& cfg = encoder.config();
  if (d != cfg.d_model) throw Error(ErrorKind::dimension, "frame width does not match d_model");
  if (n + T > cfg.max_len)
    throw Error(ErrorKind::configuration, "sequence of " + std::to_string(n + T) +
                                              " positions exceeds the positional table (" +
                                              std::to_string(cfg.max_len) + ")");
  if (n > 0 && cls.vectors.dim(1) != d) throw Error(ErrorKind::dimension, "CLS width does not match d_model");

  static thread_local std::vector<double> table;
  static thread_local std::pair<std::size_t, std::size_t> table_key{0, 0};
  if (table_key != std::pair{cfg.max_len, d}) {
    table = sinusoidal_table(cfg.max_len, d);
    table_key = {cfg.max_len, d};
  }
  std::vector<double> pe(B * T * d, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < fb.lengths[b]; ++t)
      std::copy_n(table.data() + t * d, d, pe.data() + (b * T + t) * d);
  Tensor frames_in = add(fb.features, Tensor::from({B, T, d}, std::move(pe)));

  Tensor seq = frames_in;
  if (n > 0) {
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    seq = concat({reshape(index_select(cls.vectors, idx), {B, n, d}), frames_in}, 1);
  }
  const std::size_t S = n + T;
  std::vector<std::uint8_t> mask(B * S, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < cls.n_parallel; ++i) mask[b * S + i] = 1;
    for (std::size_t t = 0; t < fb.lengths[b]; ++t) mask[b * S + n + t] = 1;
  }
  Tensor flat = reshape(encoder.forward(seq, mask), {B * S, d});

  ClsEncoding out;
  if (n > 0) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i) rows.push_back(b * S + i);
    out.cls_out = reshape(index_select(flat, rows), {B, n, d});
  }
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) rows.push_back(b * S + n + t);
  out.frames_out = reshape(mask_rows(index_select(flat, rows), fb.row_mask()), {B, T, d});
  return out;
}

// ---- text encoder -------------------------------------------------------------

TextEncoder::TextEncoder(const std::string& prefix, TextEncoderConfig config, ParamSet& params,
                         std::uint64_t seed, bool trainable)
    : config_(config) {
  if (config.vocab_size == 0) throw Error(ErrorKind::configuration, "text encoder needs a vocabulary");
  const std::size_t d = config.d_embed;
  token_table_ = init_param(params, prefix + "token_table", {config.vocab_size, d}, 1.0, seed, trainable);
  TransformerConfig tc{config.n_layers, d, config.n_heads, config.ffn_width, config.max_len};
  transformer_ = TransformerEncoder(prefix + "tf/", tc, params, seed, trainable);
  ln_g_ = ones_param(params, prefix + "ln_g", d, trainable);
  ln_b_ = zeros_param(params, prefix + "ln_b", d, trainable);
  proj_w_ = init_param(params, prefix + "proj_w", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)), seed, trainable);
  proj_b_ = zeros_param(params, prefix + "proj_b", d, trainable);
  positions_ = sinusoidal_table(config.max_len, d);
}

Tensor TextEncoder::encode_embeddings(const Tensor& embs, std::span<const std::size_t> lengths) const {
  if (embs.rank() != 3 || embs.dim(2) != config_.d_embed)
    throw Error(ErrorKind::dimension, "text encoder input " + shape_str(embs.shape()));
  const std::size_t B = embs.dim(0), L = embs.dim(1), d = config_.d_embed;
  if (lengths.size() != B) throw Error(ErrorKind::dimension, "text lengths size mismatch");
  if (L > config_.max_len) throw Error(ErrorKind::configuration, "token sequence longer than the positional table");
  std::vector<double> pe(B * L * d);
  for (std::size_t b = 0; b < B; ++b) std::copy_n(positions_.data(), L * d, pe.data() + b * L * d);
  std::vector<std::uint8_t> mask(B * L, 0);
  std::vector<std::size_t> pool;
  for (std::size_t b = 0; b < B; ++b) {
    if (lengths[b] == 0 || lengths[b] > L) throw Error(ErrorKind::dimension, "invalid token sequence length");
    for (std::size_t t = 0; t < lengths[b]; ++t) mask[b * L + t] = 1;
    pool.push_back(b * L + lengths[b] - 1);
  }
  Tensor h = transformer_.forward(add(embs, Tensor::from({B, L, d}, std::move(pe))), mask);
  h = layer_norm(h, ln_g_, ln_b_);
  Tensor pooled = index_select(reshape(h, {B * L, d}), pool);
  return linear(pooled, proj_w_, proj_b_);
}

Tensor TextEncoder::encode_ids(const std::vector<std::vector<int>>& ids) const {
  if (ids.empty()) throw Error(ErrorKind::data, "empty text batch");
  std::size_t L = 0;
  for (const auto& s : ids) {
    if (s.empty()) throw Error(ErrorKind::data, "empty token sequence");
    L = std::max(L, s.size());
  }
  std::vector<std::size_t> flat(ids.size() * L, 0), lengths;
  for (std::size_t b = 0; b < ids.size(); ++b) {
    lengths.push_back(ids[b].size());
    for (std::size_t t = 0; t < ids[b].size(); ++t) {
      const int id = ids[b][t];
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
        throw Error(ErrorKind::vocabulary, "token id " + std::to_string(id) + " outside the vocabulary");
      flat[b * L + t] = static_cast<std::size_t>(id);
    }
  }
  Tensor embs = reshape(index_select(token_table_, flat), {ids.size(), L, config_.d_embed});
  return encode_embeddings(embs, lengths);
}

// ---- image encoder ------------------------------------------------------------

ImageEncoder::ImageEncoder(const std::string& prefix, ImageEncoderConfig config, ParamSet& params,
                           std::uint64_t seed, bool trainable)
    : config_(config) {
  w1_ = init_param(params, prefix + "w1", {config.d_image, config.d_hidden},
                   std::sqrt(2.0 / static_cast<double>(config.d_image)), seed, trainable);
  b1_ = zeros_param(params, prefix + "b1", config.d_hidden, trainable);
  w2_ = init_param(params, prefix + "w2", {config.d_hidden, config.d_embed},
                   1.0 / std::sqrt(static_cast<double>(config.d_hidden)), seed, trainable);
  b2_ = zeros_param(params, prefix + "b2", config.d_embed, trainable);
}

Tensor ImageEncoder::encode(const Tensor& images) const {
  if (images.rank() != 2 || images.dim(1) != config_.d_image)
    throw Error(ErrorKind::dimension, "image features " + shape_str(images.shape()) + " but encoder expects width " +
                                          std::to_string(config_.d_image));
  return linear(relu(linear(images, w1_, b1_)), w2_, b2_);
}

}  // namespace cifclip
