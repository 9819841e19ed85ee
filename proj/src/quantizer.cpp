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

#include "cifclip/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace cifclip {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void check_temperature(double temperature) {
  if (!(temperature > 0.0)) throw Error(ErrorKind::parameter, "quantizer temperature must be positive");
}

}  // namespace

Codebook Codebook::build(Tensor embeddings, std::vector<std::string> tokens, std::vector<bool> is_stop,
                         std::vector<bool> is_word_initial) {
  if (embeddings.rank() != 2) throw Error(ErrorKind::dimension, "codebook embeddings must be [V, d]");
  const std::size_t V = embeddings.dim(0), d = embeddings.dim(1);
  if (tokens.size() != V || is_stop.size() != V || is_word_initial.size() != V)
    throw Error(ErrorKind::dimension, "codebook flags and strings must have one entry per row");
  std::unordered_set<std::string> seen;
  for (const auto& t : tokens)
    if (!seen.insert(t).second) throw Error(ErrorKind::vocabulary, "duplicate codebook token '" + t + "'");

  Codebook cb;
  cb.embeddings = embeddings.detach();
  cb.tokens = std::move(tokens);
  cb.is_stop = std::move(is_stop);
  cb.is_word_initial = std::move(is_word_initial);
  auto e = cb.embeddings.data();
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t j = 0; j < d; ++j) mean[j] += e[v * d + j];
  for (auto& m : mean) m /= static_cast<double>(V);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (e[v * d + j] - mean[j]) * (e[v * d + j] - mean[j]);
  for (std::size_t j = 0; j < d; ++j) {
    sd[j] = std::sqrt(sd[j] / static_cast<double>(V));
    if (!(sd[j] > 0.0)) throw Error(ErrorKind::statistics, "codebook dimension " + std::to_string(j) + " is constant");
  }
  cb.mean = Tensor::from({d}, std::move(mean));
  cb.std = Tensor::from({d}, std::move(sd));
  cb.unit_rows_.resize(V * d);
  for (std::size_t v = 0; v < V; ++v) {
    const double n = norm(e.subspan(v * d, d));
    if (!(n > 0.0)) throw Error(ErrorKind::numeric, "zero codebook row " + std::to_string(v));
    for (std::size_t j = 0; j < d; ++j) cb.unit_rows_[v * d + j] = e[v * d + j] / n;
  }
  return cb;
}

std::optional<std::size_t> Codebook::find(const std::string& token) const {
  auto it = std::find(tokens.begin(), tokens.end(), token);
  if (it == tokens.end()) return std::nullopt;
  return static_cast<std::size_t>(it - tokens.begin());
}

std::vector<double> Codebook::cosines(std::span<const double> z) const {
  const std::size_t V = size(), d = dim();
  if (z.size() != d) throw Error(ErrorKind::dimension, "query width does not match the codebook");
  const double n = norm(z);
  if (!(n > 0.0)) throw Error(ErrorKind::numeric, "zero query vector");
  std::vector<double> out(V);
  for (std::size_t v = 0; v < V; ++v) {
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += z[j] * unit_rows_[v * d + j];
    out[v] = dot / n;
  }
  return out;
}

Quantized vector_quantize(const Tensor& z, const Codebook& cb, double temperature) {
  check_temperature(temperature);
  const std::size_t V = cb.size(), d = cb.dim();
  if (z.rank() < 2 || z.shape().back() != d) throw Error(ErrorKind::dimension, "quantizer input " + shape_str(z.shape()));
  const std::size_t n = z.numel() / d;
  auto zd = z.data();
  auto e = cb.embeddings.data();

  Quantized out;
  std::vector<double> q(n * d), probs(n * V), cos(n * V), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = zd.subspan(i * d, d);
    auto c = cb.cosines(row);
    norms[i] = norm(row);
    std::copy(c.begin(), c.end(), cos.begin() + static_cast<std::ptrdiff_t>(i * V));
    const std::size_t best = static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin());
    out.ids.push_back(best);
    std::copy_n(e.data() + best * d, d, q.data() + i * d);
    double mx = c[best] / temperature, zsum = 0.0;
    for (std::size_t v = 0; v < V; ++v) zsum += (probs[i * V + v] = std::exp(c[v] / temperature - mx));
    for (std::size_t v = 0; v < V; ++v) probs[i * V + v] /= zsum;
  }
  Shape pshape = z.shape();
  pshape.back() = V;
  out.probs = Tensor::from(pshape, probs);

  out.q = Tensor::make_op(
      z.shape(), std::move(q), {z},
      [z, cb, temperature, n, d, V, probs = std::move(probs), cos = std::move(cos), norms = std::move(norms)](
          std::span<const double>, std::span<const double> g) {
        auto zd = z.data();
        auto e = cb.embeddings.data();
        auto gz = z.grad_mut();
        const auto& unit = cb.unit_rows();
        std::vector<double> gl(V);
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = g.data() + i * d;
          const double* p = probs.data() + i * V;
          double dot = 0.0;
          for (std::size_t v = 0; v < V; ++v) {
            double gp = 0.0;
            for (std::size_t j = 0; j < d; ++j) gp += gi[j] * e[v * d + j];
            gl[v] = gp;
            dot += gp * p[v];
          }
          // Through softmax and the temperature: d/d cos_v.
          double along = 0.0;
          for (std::size_t v = 0; v < V; ++v) {
            gl[v] = p[v] * (gl[v] - dot) / temperature;
            along += gl[v] * cos[i * V + v];
          }
          // d cos_v / dz = (e_v/|e_v| - cos_v z/|z|) / |z|.
          const double inv = 1.0 / norms[i];
          std::vector<double> acc(d, 0.0);
          for (std::size_t v = 0; v < V; ++v)
            if (gl[v] != 0.0)
              for (std::size_t j = 0; j < d; ++j) acc[j] += gl[v] * unit[v * d + j];
          for (std::size_t j = 0; j < d; ++j) gz[i * d + j] += inv * (acc[j] - along * zd[i * d + j] * inv);
        }
      });
  return out;
}

Tensor soft_quantize(const Tensor& z, const Codebook& cb, double temperature) {
  check_temperature(temperature);
  const std::size_t d = cb.dim();
  if (z.rank() < 2 || z.shape().back() != d) throw Error(ErrorKind::dimension, "quantizer input " + shape_str(z.shape()));
  Tensor flat = reshape(z, {z.numel() / d, d});
  Tensor cos = matmul(l2_normalize(flat), transpose(l2_normalize(cb.embeddings)));
  Tensor q = matmul(softmax(scale(cos, 1.0 / temperature)), cb.embeddings);
  return reshape(q, z.shape());
}

std::vector<TokenScore> nearest_topk(std::span<const double> z, const Codebook& cb, std::size_t k) {
  if (k < 1 || k > cb.size())
    throw Error(ErrorKind::parameter, "top-K must lie in [1, " + std::to_string(cb.size()) + "]");
  auto c = cb.cosines(z);
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return c[a] > c[b] || (c[a] == c[b] && a < b); });
  std::vector<TokenScore> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({order[i], c[order[i]]});
  return out;
}

}  // namespace cifclip
