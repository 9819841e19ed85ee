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

#include "cifclip/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace cifclip {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
// Temperature clamp [1e-3, 10] expressed on log(1 / tau).
const double kMinLogInvTau = std::log(0.1);
const double kMaxLogInvTau = std::log(1000.0);

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw Error(ErrorKind::configuration, "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
    throw Error(ErrorKind::configuration, "key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

template <class Fn>
void for_each_entry(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::configuration, "config line " + std::to_string(n) + ": expected key=value");
    fn(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void clamp_log_inv_tau(Tensor& t) {
  if (!t.defined()) return;
  auto d = t.mutable_data();
  d[0] = std::clamp(d[0], kMinLogInvTau, kMaxLogInvTau);
}

Tensor scalar_param(ParamSet& ps, const std::string& name, double value, bool trainable) {
  Tensor t = ps.add(name, Tensor::scalar(value, trainable), trainable);
  return t;
}

Tensor zeros_param(ParamSet& ps, const std::string& name, Shape shape) {
  Tensor t = ps.add(name, Tensor::zeros(std::move(shape), true), true);
  return t;
}

// Distinct scenes, one random caption each, such that every row and column of
// the positive mask also has a negative.
std::vector<std::size_t> sample_scenes(const Dataset& data, std::size_t batch, Rng& rng) {
  const std::size_t n = data.scenes.size();
  if (n < 2) throw Error(ErrorKind::size, "training needs at least two scenes");
  batch = std::min(batch, n);
  std::vector<std::size_t> pool(n);
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < batch; ++i)
      std::swap(pool[i], pool[static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i),
                                                                    static_cast<std::int64_t>(n - 1)))]);
    std::vector<std::size_t> scenes(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(batch));
    const auto m = positive_mask(data, scenes, scenes);
    bool ok = true;
    for (std::size_t i = 0; i < batch && ok; ++i) {
      std::size_t pos = 0;
      for (std::size_t j = 0; j < batch; ++j) pos += m[i * batch + j];
      ok = pos < batch;
    }
    if (ok) return scenes;
  }
  throw Error(ErrorKind::degenerate_input, "could not draw a batch with negatives; concept sets are too uniform");
}

std::vector<std::size_t> pick_captions(const Split& split, const std::vector<std::size_t>& scenes, Rng& rng) {
  // Utterance ids are laid out scene by scene.
  std::vector<std::size_t> first(split.data.scenes.size() + 1, 0);
  for (std::size_t s = 0; s < split.data.scenes.size(); ++s)
    first[s + 1] = first[s] + split.data.scenes[s].captions.size();
  std::vector<std::size_t> ids;
  for (std::size_t s : scenes) {
    const auto nc = static_cast<std::int64_t>(split.data.scenes[s].captions.size());
    ids.push_back(first[s] + static_cast<std::size_t>(uniform_int(rng, 0, nc - 1)));
  }
  return ids;
}

std::vector<std::size_t> reference_tokens(const Caption& c, std::size_t end_id) {
  std::vector<std::size_t> ref;
  for (std::size_t t : c.tokens)
    if (t != end_id) ref.push_back(t);
  return ref;
}

void write_atomic(const std::string& path, const std::vector<NamedTensor>& tensors) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, tensors);
  std::filesystem::rename(tmp, path);
}

}  // namespace

// ---- configuration ------------------------------------------------------------

Variant parse_variant(const std::string& name) {
  if (name == "parallel") return Variant::parallel;
  if (name == "cascaded") return Variant::cascaded;
  if (name == "cascaded_plus") return Variant::cascaded_plus;
  if (name == "hybrid") return Variant::hybrid;
  if (name == "hybrid_plus") return Variant::hybrid_plus;
  throw Error(ErrorKind::configuration, "unknown variant '" + name + "'");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::parallel: return "parallel";
    case Variant::cascaded: return "cascaded";
    case Variant::cascaded_plus: return "cascaded_plus";
    case Variant::hybrid: return "hybrid";
    case Variant::hybrid_plus: return "hybrid_plus";
  }
  return "?";
}

bool has_parallel_branch(Variant v) {
  return v == Variant::parallel || v == Variant::hybrid || v == Variant::hybrid_plus;
}
bool has_cls_cascade(Variant v) { return v == Variant::cascaded || v == Variant::hybrid; }
bool has_cif_cascade(Variant v) { return v == Variant::cascaded_plus || v == Variant::hybrid_plus; }

void validate(const VariantConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::configuration, what);
  };
  need(!has_cls_cascade(c.variant) || c.K >= 1, "K must be at least 1 for CLS cascades");
  need(c.batch_size >= 2, "batch_size must be at least 2");
  need(c.steps >= 1, "steps must be positive");
  need(c.eval_every >= 1 && c.eval_batch >= 1, "eval_every and eval_batch must be positive");
  need(c.lr > 0.0, "lr must be positive");
  need(c.warmup_fraction >= 0.0 && c.warmup_fraction <= 1.0, "warmup_fraction must lie in [0, 1]");
  need(c.weights.lambda_p >= 0.0 && c.weights.lambda_c >= 0.0 && c.weights.lambda_q >= 0.0,
       "loss weights must be non-negative");
  need(c.cif_ratio > 0.0 && c.cif_ratio <= 1.0, "cif_ratio must lie in (0, 1]");
  need(c.vq_temperature > 0.0, "vq_temperature must be positive");
  need(c.init_tau >= 1e-3 && c.init_tau <= 10.0, "init_tau must lie in [1e-3, 10]");
  need(c.transformer.n_heads >= 1 && c.transformer.d_model % c.transformer.n_heads == 0,
       "d_model must be divisible by n_heads");
  need(c.extractor.d_model == c.transformer.d_model && c.cif_head.d_model == c.transformer.d_model,
       "extractor, transformer and CIF widths must agree");
  need(c.cif_head.dropout >= 0.0 && c.cif_head.dropout < 1.0, "cif_dropout must lie in [0, 1)");
  need(c.cif_head.kernel_width >= 1 && c.extractor.kernel_width >= 1, "kernel widths must be positive");
}

VariantConfig parse_variant_config(std::istream& in, VariantConfig c) {
  for_each_entry(in, [&](const std::string& k, const std::string& v) {
    if (k == "variant") c.variant = parse_variant(v);
    else if (k == "K") c.K = to_u64(k, v);
    else if (k == "lambda_p") c.weights.lambda_p = to_double(k, v);
    else if (k == "lambda_c") c.weights.lambda_c = to_double(k, v);
    else if (k == "lambda_q") c.weights.lambda_q = to_double(k, v);
    else if (k == "cif_ratio") c.cif_ratio = to_double(k, v);
    else if (k == "scaling_steps") c.scaling_steps = to_u64(k, v);
    else if (k == "steps") c.steps = to_u64(k, v);
    else if (k == "batch_size") c.batch_size = to_u64(k, v);
    else if (k == "lr") c.lr = to_double(k, v);
    else if (k == "warmup_fraction") c.warmup_fraction = to_double(k, v);
    else if (k == "seed") c.seed = to_u64(k, v);
    else if (k == "eval_every") c.eval_every = to_u64(k, v);
    else if (k == "eval_batch") c.eval_batch = to_u64(k, v);
    else if (k == "vq_temperature") c.vq_temperature = to_double(k, v);
    else if (k == "init_tau") c.init_tau = to_double(k, v);
    else if (k == "d_model") c.transformer.d_model = c.extractor.d_model = c.cif_head.d_model = to_u64(k, v);
    else if (k == "n_layers") c.transformer.n_layers = to_u64(k, v);
    else if (k == "n_heads") c.transformer.n_heads = to_u64(k, v);
    else if (k == "ffn_width") c.transformer.ffn_width = to_u64(k, v);
    else if (k == "max_len") c.transformer.max_len = to_u64(k, v);
    else if (k == "extractor_layers") c.extractor.n_hidden = to_u64(k, v);
    else if (k == "d_audio") c.extractor.d_input = to_u64(k, v);
    else if (k == "cif_kernel_width") c.cif_head.kernel_width = to_u64(k, v);
    else if (k == "cif_dropout") c.cif_head.dropout = to_double(k, v);
    else if (k == "data_dir") c.data_dir = v;
    else if (k == "clip_dir") c.clip_dir = v;
    else throw Error(ErrorKind::configuration, "unknown config key '" + k + "'");
  });
  validate(c);
  return c;
}

std::string format_variant_config(const VariantConfig& c) {
  std::ostringstream o;
  o << "variant=" << variant_name(c.variant) << "\nK=" << c.K << "\nlambda_p=" << num(c.weights.lambda_p)
    << "\nlambda_c=" << num(c.weights.lambda_c) << "\nlambda_q=" << num(c.weights.lambda_q)
    << "\ncif_ratio=" << num(c.cif_ratio) << "\nscaling_steps=" << c.scaling_steps << "\nsteps=" << c.steps
    << "\nbatch_size=" << c.batch_size << "\nlr=" << num(c.lr) << "\nwarmup_fraction=" << num(c.warmup_fraction)
    << "\nseed=" << c.seed << "\neval_every=" << c.eval_every << "\neval_batch=" << c.eval_batch
    << "\nvq_temperature=" << num(c.vq_temperature) << "\ninit_tau=" << num(c.init_tau)
    << "\nd_model=" << c.transformer.d_model << "\nn_layers=" << c.transformer.n_layers
    << "\nn_heads=" << c.transformer.n_heads << "\nffn_width=" << c.transformer.ffn_width
    << "\nmax_len=" << c.transformer.max_len << "\nextractor_layers=" << c.extractor.n_hidden
    << "\nd_audio=" << c.extractor.d_input << "\ncif_kernel_width=" << c.cif_head.kernel_width
    << "\ncif_dropout=" << num(c.cif_head.dropout) << "\n";
  if (!c.data_dir.empty()) o << "data_dir=" << c.data_dir << "\n";
  if (!c.clip_dir.empty()) o << "clip_dir=" << c.clip_dir << "\n";
  return o.str();
}

ClipConfig parse_clip_config(std::istream& in, ClipConfig c) {
  for_each_entry(in, [&](const std::string& k, const std::string& v) {
    if (k == "seed") c.seed = to_u64(k, v);
    else if (k == "max_steps") c.max_steps = to_u64(k, v);
    else if (k == "batch_size") c.batch_size = to_u64(k, v);
    else if (k == "lr") c.lr = to_double(k, v);
    else if (k == "warmup_steps") c.warmup_steps = to_u64(k, v);
    else if (k == "eval_every") c.eval_every = to_u64(k, v);
    else if (k == "target_r1") c.target_r1 = to_double(k, v);
    else if (k == "init_tau") c.init_tau = to_double(k, v);
    else if (k == "d_embed") c.text.d_embed = c.image.d_embed = to_u64(k, v);
    else if (k == "text_layers") c.text.n_layers = to_u64(k, v);
    else if (k == "text_heads") c.text.n_heads = to_u64(k, v);
    else if (k == "text_ffn") c.text.ffn_width = to_u64(k, v);
    else if (k == "image_hidden") c.image.d_hidden = to_u64(k, v);
    else if (k == "d_image") c.image.d_image = to_u64(k, v);
    else throw Error(ErrorKind::configuration, "unknown config key '" + k + "'");
  });
  if (c.batch_size < 2 || c.max_steps < 1 || c.eval_every < 1 || !(c.lr > 0.0))
    throw Error(ErrorKind::configuration, "clip batch_size >= 2, max_steps >= 1, eval_every >= 1 and lr > 0 required");
  if (c.text.n_heads == 0 || c.text.d_embed % c.text.n_heads != 0)
    throw Error(ErrorKind::configuration, "d_embed must be divisible by text_heads");
  return c;
}

std::string format_clip_config(const ClipConfig& c) {
  std::ostringstream o;
  o << "seed=" << c.seed << "\nmax_steps=" << c.max_steps << "\nbatch_size=" << c.batch_size << "\nlr=" << num(c.lr)
    << "\nwarmup_steps=" << c.warmup_steps << "\neval_every=" << c.eval_every << "\ntarget_r1=" << num(c.target_r1)
    << "\ninit_tau=" << num(c.init_tau) << "\nd_embed=" << c.text.d_embed << "\ntext_layers=" << c.text.n_layers
    << "\ntext_heads=" << c.text.n_heads << "\ntext_ffn=" << c.text.ffn_width << "\nimage_hidden=" << c.image.d_hidden
    << "\nd_image=" << c.image.d_image << "\n";
  return o.str();
}

void parse_corpus_config(std::istream& in, CorpusConfig& c, VocabConfig& v) {
  for_each_entry(in, [&](const std::string& k, const std::string& val) {
    if (k == "n_scenes") c.n_scenes = to_u64(k, val);
    else if (k == "train_fraction") c.train_fraction = to_double(k, val);
    else if (k == "dev_fraction") c.dev_fraction = to_double(k, val);
    else if (k == "test_fraction") c.test_fraction = to_double(k, val);
    else if (k == "min_concepts") c.min_concepts = to_u64(k, val);
    else if (k == "max_concepts") c.max_concepts = to_u64(k, val);
    else if (k == "min_captions") c.min_captions = to_u64(k, val);
    else if (k == "max_captions") c.max_captions = to_u64(k, val);
    else if (k == "min_frames") c.min_frames = to_u64(k, val);
    else if (k == "max_frames") c.max_frames = to_u64(k, val);
    else if (k == "stop_probability") c.stop_probability = to_double(k, val);
    else if (k == "sigma_image") c.sigma_image = to_double(k, val);
    else if (k == "sigma_speech") c.sigma_speech = to_double(k, val);
    else if (k == "n_concepts") v.n_concepts = to_u64(k, val);
    else if (k == "n_stop") v.n_stop = to_u64(k, val);
    else if (k == "d_audio") v.d_audio = to_u64(k, val);
    else if (k == "d_image") v.d_image = to_u64(k, val);
    else throw Error(ErrorKind::configuration, "unknown config key '" + k + "'");
  });
}

// ---- data views ---------------------------------------------------------------

Split Split::from(Dataset data) {
  Split s;
  s.data = std::move(data);
  for (std::size_t i = 0; i < s.data.scenes.size(); ++i)
    for (std::size_t c = 0; c < s.data.scenes[i].captions.size(); ++c) s.utterances.push_back({i, c});
  return s;
}

std::vector<std::uint8_t> positive_mask(const Dataset& data, const std::vector<std::size_t>& a,
                                        const std::vector<std::size_t>& b) {
  std::vector<std::uint8_t> m(a.size() * b.size(), 0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      m[i * b.size() + j] = a[i] == b[j] || data.scenes[a[i]].concepts == data.scenes[b[j]].concepts;
  return m;
}

// ---- toy CLIP -----------------------------------------------------------------

ClipModel::ClipModel(const ClipConfig& cfg, const ConceptVocab& vocab, bool trainable)
    : config(cfg), tokens(vocab.tokens), is_stop(vocab.is_stop), is_word_initial(vocab.is_word_initial),
      end_id(vocab.end_id) {
  config.text.vocab_size = vocab.size();
  config.image.d_embed = config.text.d_embed;
  image = ImageEncoder("img/", config.image, params, config.seed, trainable);
  text = TextEncoder("txt/", config.text, params, config.seed, trainable);
  log_inv_tau = scalar_param(params, "clip/log_inv_tau", std::log(1.0 / config.init_tau), trainable);
  for (std::size_t w = 0; w < vocab.words.size(); ++w) lexicon.insert(vocab.spell(w));
  const std::string marker = kWordMarker;
  for (std::size_t id : vocab.stop_ids) {
    std::string s = vocab.tokens[id];
    if (s.rfind(marker, 0) == 0) s = s.substr(marker.size());
    lexicon.insert(s);
    stop_words.insert(s);
  }
}

Codebook ClipModel::codebook() const {
  return Codebook::build(text.token_table().detach().clone(), tokens, is_stop, is_word_initial);
}

Tensor ClipModel::embed_images(const Dataset& data) const {
  NoGradGuard guard;
  const std::size_t d = config.image.d_image;
  std::vector<double> flat;
  for (const auto& s : data.scenes) {
    if (s.image.size() != d) throw Error(ErrorKind::dimension, "scene image width does not match the image encoder");
    flat.insert(flat.end(), s.image.begin(), s.image.end());
  }
  if (data.scenes.empty()) throw Error(ErrorKind::size, "no scenes to embed");
  return image.encode(Tensor::from({data.scenes.size(), d}, std::move(flat))).detach();
}

Tensor ClipModel::embed_captions(const Split& split) const {
  NoGradGuard guard;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < split.utterances.size(); i += 256) {
    std::vector<std::vector<int>> ids;
    for (std::size_t u = i; u < std::min(i + 256, split.utterances.size()); ++u) {
      const auto& r = split.utterances[u];
      const auto& toks = split.data.scenes[r.scene].captions[r.caption].tokens;
      ids.emplace_back(toks.begin(), toks.end());
    }
    parts.push_back(text.encode_ids(ids));
  }
  if (parts.empty()) throw Error(ErrorKind::size, "no captions to embed");
  return concat(parts, 0).detach();
}

namespace {

double clip_dev_r1(const ClipModel& m, const Split& dev) {
  std::vector<std::size_t> truth;
  for (const auto& u : dev.utterances) truth.push_back(u.scene);
  return retrieval_recall(m.embed_captions(dev), m.embed_images(dev.data), truth, {1}).speech_to_image[0];
}

}  // namespace

ClipResult pretrain_toy_clip(ClipModel& model, const Split& train, const Split& dev,
                             const std::function<void(const std::string&)>& log) {
  const auto& cfg = model.config;
  if (train.utterances.empty() || dev.utterances.empty())
    throw Error(ErrorKind::size, "toy CLIP needs captions in both train and dev");
  AdamConfig ac;
  ac.lr = cfg.lr;
  ac.warmup_steps = cfg.warmup_steps;
  AdamState adam(ac, model.params.trainable());
  if (model.params.trainable().empty()) throw Error(ErrorKind::configuration, "toy CLIP model is frozen");
  Rng rng(mix_seed(cfg.seed, 0x636c6970));  // "clip"
  std::vector<double> flat_images;
  for (const auto& s : train.data.scenes) flat_images.insert(flat_images.end(), s.image.begin(), s.image.end());
  const Tensor images = Tensor::from({train.data.scenes.size(), cfg.image.d_image}, std::move(flat_images));

  ClipResult res;
  for (std::uint64_t step = 0; step < cfg.max_steps; ++step) {
    auto scenes = sample_scenes(train.data, cfg.batch_size, rng);
    auto utts = pick_captions(train, scenes, rng);
    std::vector<std::vector<int>> ids;
    for (std::size_t u : utts) {
      const auto& r = train.utterances[u];
      const auto& t = train.data.scenes[r.scene].captions[r.caption].tokens;
      ids.emplace_back(t.begin(), t.end());
    }
    Tensor txt = model.text.encode_ids(ids);
    Tensor img = model.image.encode(index_select(images, scenes));
    Tensor loss = masked_contrastive(txt, img, positive_mask(train.data, scenes, scenes), exp(model.log_inv_tau));
    if (!std::isfinite(loss.item())) throw Error(ErrorKind::numeric, "toy CLIP loss is not finite");
    loss.backward();
    adam.step();
    model.params.zero_grad();
    clamp_log_inv_tau(model.log_inv_tau);
    res.steps = step + 1;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
      const double r1 = clip_dev_r1(model, dev);
      res.dev_r1.push_back(r1);
      res.final_r1 = r1;
      if (log) log("clip step " + std::to_string(step + 1) + " loss " + num(loss.item()) + " dev R@1 " + num(r1));
      if (r1 >= cfg.target_r1) break;
    }
  }
  for (const auto& nt : model.params.items()) {
    Tensor t = nt.tensor;
    t.set_requires_grad(false);
  }
  const double chance = 1.0 / static_cast<double>(dev.data.scenes.size());
  if (res.final_r1 < 2.0 * chance)
    throw Error(ErrorKind::degenerate_input, "toy CLIP dev R@1 " + num(res.final_r1) + " is below twice chance (" +
                                                 num(2.0 * chance) + "); the data carries no usable signal");
  return res;
}

void save_clip(const std::string& path, const ClipModel& model) { write_atomic(path, model.params.items()); }

void load_clip(const std::string& path, ClipModel& model) { model.params.assign_from(load_checkpoint(path)); }

// ---- speech branch ------------------------------------------------------------

SpeechModel::SpeechModel(const VariantConfig& cfg, std::size_t d_embed) : config(cfg) {
  validate(cfg);
  const std::size_t d = cfg.transformer.d_model;
  const std::uint64_t seed = cfg.seed;
  const Variant v = cfg.variant;
  extractor = SpeechFeatureExtractor("spc/ext/", cfg.extractor, params, seed);
  transformer = TransformerEncoder("spc/tf/", cfg.transformer, params, seed, true);
  cls = ClsBank::create("spc/cls", has_parallel_branch(v) ? 1 : 0, has_cls_cascade(v) ? cfg.K : 0, d, params, seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double lit = std::log(1.0 / cfg.init_tau);
  if (has_parallel_branch(v)) {
    par_w = init_param(params, "spc/par_w", {d, d_embed}, sd, seed, true);
    par_b = zeros_param(params, "spc/par_b", {d_embed});
    par_log_inv_tau = scalar_param(params, "spc/par_log_inv_tau", lit, true);
  }
  if (has_cascade(v)) {
    casc_w = init_param(params, "spc/casc_w", {d, d_embed}, sd, seed, true);
    casc_b = zeros_param(params, "spc/casc_b", {d_embed});
    casc_log_inv_tau = scalar_param(params, "spc/casc_log_inv_tau", lit, true);
  }
  if (has_cif_cascade(v)) cif = CifHead("spc/cif/", cfg.cif_head, params, seed);
  bn = RunningStats::init(d_embed);
}

std::vector<NamedTensor> SpeechModel::state_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& nt : params.items()) out.push_back({nt.name, nt.tensor.detach().clone()});
  out.push_back({"spc/bn_mean", bn.mean.clone()});
  out.push_back({"spc/bn_var", bn.var.clone()});
  return out;
}

void SpeechModel::load_state(const std::vector<NamedTensor>& tensors) {
  std::vector<NamedTensor> own;
  for (const auto& nt : tensors)
    if (nt.name.rfind("spc/", 0) == 0 && nt.name != "spc/bn_mean" && nt.name != "spc/bn_var") own.push_back(nt);
  params.assign_from(own);
  for (const char* name : {"spc/bn_mean", "spc/bn_var"}) {
    const NamedTensor* t = find_tensor(tensors, name);
    if (!t || t->tensor.numel() != bn.mean.numel())
      throw Error(ErrorKind::data, std::string("checkpoint lacks ") + name);
    auto dst = (std::string(name) == "spc/bn_mean" ? bn.mean : bn.var).mutable_data();
    std::copy(t->tensor.data().begin(), t->tensor.data().end(), dst.begin());
  }
}

Batch make_batch(const Split& split, const std::vector<std::size_t>& ids, const Tensor& scene_images) {
  Batch b;
  std::vector<std::vector<std::vector<double>>> seqs;
  for (std::size_t u : ids) {
    const auto& r = split.utterances.at(u);
    b.utterances.push_back(r);
    b.scenes.push_back(r.scene);
    seqs.push_back(split.data.scenes[r.scene].captions[r.caption].frames);
  }
  b.raw = pack_frames(seqs);
  b.mask = positive_mask(split.data, b.scenes, b.scenes);
  b.image_emb = index_select(scene_images, b.scenes);
  return b;
}

namespace {

// BN -> VQ -> text tower over per-utterance runs of projected vectors z[N, e],
// with the end-token embedding appended after each run.
Tensor cascade_embed(SpeechModel& m, const ClipModel& clip, const Codebook& cb, const Tensor& z,
                     const std::vector<std::size_t>& counts, bool training, Tensor* positions) {
  const std::size_t B = counts.size(), e = cb.dim();
  const std::size_t N = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  const Tensor end_row = index_select(clip.text.token_table(), std::vector<std::size_t>{clip.end_id});
  std::vector<Tensor> rows;
  if (N > 0) {
    Tensor n = normalize_to_stats(z, m.bn, cb.mean, cb.std, training && N >= 2);
    *positions = n;
    rows.push_back(vector_quantize(n, cb, m.config.vq_temperature).q);
  } else {
    *positions = Tensor::zeros({0, e});
  }
  rows.push_back(end_row);
  rows.push_back(Tensor::zeros({1, e}));
  const Tensor table = concat(rows, 0);
  const std::size_t L = *std::max_element(counts.begin(), counts.end()) + 1;
  std::vector<std::size_t> idx(B * L), lengths(B);
  std::size_t off = 0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) idx[b * L + t] = t < counts[b] ? off + t : (t == counts[b] ? N : N + 1);
    off += counts[b];
    lengths[b] = counts[b] + 1;
  }
  return clip.text.encode_embeddings(reshape(index_select(table, idx), {B, L, e}), lengths);
}

}  // namespace

ForwardResult forward_variant(SpeechModel& m, const ClipModel& clip, const Codebook& cb, const Batch& batch,
                              const ForwardOptions& opts, Rng& dropout_rng) {
  const VariantConfig& cfg = m.config;
  const Variant v = cfg.variant;
  const std::size_t B = batch.raw.batch(), d = cfg.transformer.d_model;
  if (cb.dim() != clip.config.text.d_embed) throw Error(ErrorKind::configuration, "codebook width mismatch");
  ForwardResult r;
  FrameBatch fb = m.extractor.extract(batch.raw);
  ClsEncoding enc = encode_with_cls(m.transformer, fb, m.cls);
  const std::size_t n_cls = m.cls.size();
  Tensor cls_rows = n_cls ? reshape(enc.cls_out, {B * n_cls, d}) : Tensor();

  if (has_parallel_branch(v)) {
    std::vector<std::size_t> rows(B);
    for (std::size_t b = 0; b < B; ++b) rows[b] = b * n_cls;
    r.parallel_emb = linear(index_select(cls_rows, rows), m.par_w, m.par_b);
    if (opts.compute_loss)
      r.parallel = masked_contrastive(r.parallel_emb, batch.image_emb, batch.mask, exp(m.par_log_inv_tau));
  }

  if (has_cls_cascade(v)) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < cfg.K; ++k) rows.push_back(b * n_cls + m.cls.n_parallel + k);
    r.position_counts.assign(B, cfg.K);
    Tensor z = linear(index_select(cls_rows, rows), m.casc_w, m.casc_b);
    r.cascaded_emb = cascade_embed(m, clip, cb, z, r.position_counts, opts.training, &r.positions);
  } else if (has_cif_cascade(v)) {
    FrameBatch frames{enc.frames_out, fb.lengths};
    Tensor alpha = m.cif.compute_alpha(frames, opts.training, dropout_rng);
    const auto targets = cif_target_length(fb.lengths, cfg.cif_ratio);
    if (opts.compute_loss) r.quantity = quantity_loss(alpha, targets);
    CifOptions co;
    Tensor a = alpha;
    if (opts.training && opts.step < cfg.scaling_steps) {
      a = scale_alpha(alpha, targets);
      std::vector<std::size_t> expected;
      for (double t : targets) expected.push_back(static_cast<std::size_t>(t));
      co.expected_lengths = expected;
    }
    auto ad = alpha.data();
    const std::size_t T = fb.max_len();
    for (std::size_t b = 0; b < B; ++b) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += ad[b * T + t];
      r.alpha_sums.push_back(s);
    }
    SegmentBatch seg = integrate_and_fire(frames, a, co);
    const std::size_t Lmax = seg.segments.dim(1);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < seg.counts[b]; ++k) rows.push_back(b * Lmax + k);
    Tensor z = rows.empty() ? Tensor::zeros({0, cb.dim()})
                            : linear(index_select(reshape(seg.segments, {B * Lmax, d}), rows), m.casc_w, m.casc_b);
    r.position_counts = seg.counts;
    r.fires = seg.firing_frames;
    r.cascaded_emb = cascade_embed(m, clip, cb, z, r.position_counts, opts.training, &r.positions);
  }
  if (has_cascade(v) && opts.compute_loss)
    r.cascaded = masked_contrastive(r.cascaded_emb, batch.image_emb, batch.mask, exp(m.casc_log_inv_tau));

  if (opts.compute_loss) {
    const LossWeights& w = cfg.weights;
    switch (v) {
      case Variant::parallel: r.total = r.parallel; break;
      case Variant::cascaded: r.total = r.cascaded; break;
      case Variant::cascaded_plus: r.total = loss_cascaded_plus(r.cascaded, r.quantity, w); break;
      case Variant::hybrid: r.total = loss_hybrid(r.parallel, r.cascaded, w); break;
      case Variant::hybrid_plus: r.total = loss_hybrid_plus(r.parallel, r.cascaded, r.quantity, w); break;
    }
  }
  return r;
}

// ---- evaluation ---------------------------------------------------------------

SplitEvaluation evaluate_split(SpeechModel& m, const ClipModel& clip, const Codebook& cb, const Split& split,
                               const Tensor& scene_images, std::size_t max_k) {
  NoGradGuard guard;
  const Variant v = m.config.variant;
  const std::size_t U = split.utterances.size();
  if (U == 0) throw Error(ErrorKind::size, "split has no utterances");
  if (max_k == 0 || max_k > cb.size()) throw Error(ErrorKind::parameter, "keyword K out of range");
  Rng unused(0);
  SplitEvaluation ev;
  ev.utterances = U;
  std::vector<Tensor> par, casc;
  std::vector<MatchCounts> bpe(2 * max_k), word(2 * max_k);
  std::vector<std::size_t> bpe_excl(2 * max_k, 0), word_excl(2 * max_k, 0);
  std::size_t within = 0, total_segments = 0;
  const std::size_t e = cb.dim();

  for (std::size_t i = 0; i < U; i += m.config.eval_batch) {
    std::vector<std::size_t> ids(std::min(m.config.eval_batch, U - i));
    std::iota(ids.begin(), ids.end(), i);
    Batch batch = make_batch(split, ids, scene_images);
    ForwardOptions fo;
    fo.compute_loss = false;
    ForwardResult r = forward_variant(m, clip, cb, batch, fo, unused);
    if (r.parallel_emb.defined()) par.push_back(r.parallel_emb);
    if (r.cascaded_emb.defined()) casc.push_back(r.cascaded_emb);
    if (!has_cascade(v)) continue;
    auto pz = r.positions.data();
    std::size_t off = 0;
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const auto& ur = batch.utterances[b];
      const Caption& cap = split.data.scenes[ur.scene].captions[ur.caption];
      std::vector<std::vector<std::size_t>> ranked;
      for (std::size_t p = 0; p < r.position_counts[b]; ++p, ++off) {
        std::vector<std::size_t> list;
        for (const auto& ts : nearest_topk(pz.subspan(off * e, e), cb, max_k)) list.push_back(ts.id);
        ranked.push_back(std::move(list));
      }
      const auto ref = reference_tokens(cap, clip.end_id);
      const auto ref_words = decode_words(ref, cb);
      for (std::size_t k = 1; k <= max_k; ++k)
        for (int f = 0; f < 2; ++f) {
          const std::size_t slot = 2 * (k - 1) + static_cast<std::size_t>(f);
          if (auto c = keyword_counts_bpe(ranked, ref, k, f == 1, cb.is_stop)) bpe[slot] += *c;
          else ++bpe_excl[slot];
          const auto words = ranked.empty() ? std::vector<std::string>{}
                                            : construct_words(ranked, k, cb, clip.lexicon);
          if (auto c = keyword_counts_word(words, ref_words, f == 1, clip.stop_words)) word[slot] += *c;
          else ++word_excl[slot];
        }
      if (has_cif_cascade(v)) {
        std::vector<std::size_t> ends;
        for (const auto& a : cap.alignment) ends.push_back(a.end);
        ev.boundary += boundary_counts(r.fires[b], ends);
        const std::size_t T = cap.frames.size();
        const double target = cif_target_length(std::vector<std::size_t>{T}, m.config.cif_ratio)[0];
        if (std::abs(static_cast<double>(r.position_counts[b]) - target) <= 2.0) ++within;
      }
      total_segments += r.position_counts[b];
    }
  }

  std::vector<std::size_t> truth;
  for (const auto& u : split.utterances) truth.push_back(u.scene);
  if (!par.empty()) ev.parallel = retrieval_recall(concat(par, 0), scene_images, truth);
  if (!casc.empty()) ev.cascaded = retrieval_recall(concat(casc, 0), scene_images, truth);
  if (has_cascade(v)) {
    for (std::size_t k = 1; k <= max_k; ++k)
      for (int f = 0; f < 2; ++f) {
        const std::size_t slot = 2 * (k - 1) + static_cast<std::size_t>(f);
        ev.bpe.push_back({k, f == 1, bpe[slot], bpe_excl[slot], scores_from(bpe[slot])});
        ev.word.push_back({k, f == 1, word[slot], word_excl[slot], scores_from(word[slot])});
      }
    ev.mean_segments = static_cast<double>(total_segments) / static_cast<double>(U);
  }
  if (has_cif_cascade(v)) ev.segment_count_within2 = static_cast<double>(within) / static_cast<double>(U);
  return ev;
}

std::vector<KeywordRow> random_keyword_rows(const Split& split, const Codebook& cb, double ratio, std::uint64_t seed,
                                            std::size_t max_k) {
  Rng rng(mix_seed(seed, 0x72616e64));  // "rand"
  std::optional<std::size_t> end = cb.find(kEndToken);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < cb.size(); ++i)
    if (!end || i != *end) pool.push_back(i);
  if (max_k == 0 || max_k > pool.size()) throw Error(ErrorKind::parameter, "keyword K out of range");
  std::vector<MatchCounts> counts(2 * max_k);
  std::vector<std::size_t> excl(2 * max_k, 0);
  for (const auto& u : split.utterances) {
    const Caption& cap = split.data.scenes[u.scene].captions[u.caption];
    const auto L = static_cast<std::size_t>(cif_target_length(std::vector<std::size_t>{cap.frames.size()}, ratio)[0]);
    std::vector<std::vector<std::size_t>> ranked(L);
    for (auto& list : ranked) {
      std::vector<std::size_t> p = pool;
      for (std::size_t i = 0; i < max_k; ++i)
        std::swap(p[i], p[static_cast<std::size_t>(
                            uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(p.size() - 1)))]);
      list.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(max_k));
    }
    std::vector<std::size_t> ref;
    for (std::size_t t : cap.tokens)
      if (!end || t != *end) ref.push_back(t);
    for (std::size_t k = 1; k <= max_k; ++k)
      for (int f = 0; f < 2; ++f) {
        const std::size_t slot = 2 * (k - 1) + static_cast<std::size_t>(f);
        if (auto c = keyword_counts_bpe(ranked, ref, k, f == 1, cb.is_stop)) counts[slot] += *c;
        else ++excl[slot];
      }
  }
  std::vector<KeywordRow> rows;
  for (std::size_t k = 1; k <= max_k; ++k)
    for (int f = 0; f < 2; ++f) {
      const std::size_t slot = 2 * (k - 1) + static_cast<std::size_t>(f);
      rows.push_back({k, f == 1, counts[slot], excl[slot], scores_from(counts[slot])});
    }
  return rows;
}

double selection_score(Variant v, const SplitEvaluation& e) {
  if (has_parallel_branch(v)) return e.parallel ? e.parallel->speech_to_image[0] : 0.0;
  for (const auto& row : e.bpe)
    if (row.k == 5 && row.stop_filtered) return row.scores.f1;
  return e.bpe.empty() ? 0.0 : e.bpe.back().scores.f1;
}

// ---- training -----------------------------------------------------------------

TrainResult train(SpeechModel& m, const ClipModel& clip, const Split& train_split, const Split& dev_split,
                  const TrainPaths& paths, const std::function<void(const std::string&)>& log) {
  const VariantConfig& cfg = m.config;
  validate(cfg);
  if (train_split.utterances.empty() || dev_split.utterances.empty())
    throw Error(ErrorKind::size, "training needs utterances in train and dev");
  const Codebook cb = clip.codebook();
  const Tensor train_images = clip.embed_images(train_split.data);
  const Tensor dev_images = clip.embed_images(dev_split.data);

  AdamConfig ac;
  ac.lr = cfg.lr;
  ac.warmup_steps = static_cast<std::uint64_t>(std::llround(cfg.warmup_fraction * static_cast<double>(cfg.steps)));
  AdamState adam(ac, m.params.trainable());
  Rng batch_rng(mix_seed(cfg.seed, 0x6261746368));  // "batch"
  Rng dropout_rng(mix_seed(cfg.seed, 0x64726f70));  // "drop"

  std::ofstream metrics(paths.metrics_log, std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error(ErrorKind::io, "cannot write " + paths.metrics_log);
  metrics << kMetricsHeader << "\n";

  std::vector<NamedTensor> clip_state;
  for (const auto& nt : clip.params.items()) clip_state.push_back({nt.name, nt.tensor.detach().clone()});

  TrainResult res;
  res.best_score = -std::numeric_limits<double>::infinity();
  std::vector<NamedTensor> best;
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    auto scenes = sample_scenes(train_split.data, cfg.batch_size, batch_rng);
    Batch batch = make_batch(train_split, pick_captions(train_split, scenes, batch_rng), train_images);
    ForwardOptions fo;
    fo.training = true;
    fo.step = step;
    ForwardResult r = forward_variant(m, clip, cb, batch, fo, dropout_rng);
    const double total = r.total.item();
    if (!std::isfinite(total)) {
      metrics.flush();
      throw Error(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step) +
                                          "; the checkpoint holds the last good model");
    }
    r.total.backward();
    adam.step();
    m.params.zero_grad();
    clamp_log_inv_tau(m.par_log_inv_tau);
    clamp_log_inv_tau(m.casc_log_inv_tau);

    const double q = r.quantity.defined() ? r.quantity.item() : kNan;
    if (step == 0) res.first_quantity = q;
    res.last_quantity = q;
    double segs = kNan;
    if (has_cascade(cfg.variant))
      segs = static_cast<double>(std::accumulate(r.position_counts.begin(), r.position_counts.end(), std::size_t{0})) /
             static_cast<double>(r.position_counts.size());

    double score = kNan, r1 = kNan, f1 = kNan;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      SplitEvaluation ev = evaluate_split(m, clip, cb, dev_split, dev_images);
      score = selection_score(cfg.variant, ev);
      if (ev.parallel) r1 = ev.parallel->speech_to_image[0];
      for (const auto& row : ev.bpe)
        if (row.k == 5 && row.stop_filtered) f1 = row.scores.f1;
      if (score > res.best_score) {
        res.best_score = score;
        res.best_step = step + 1;
        best = m.state_tensors();
        auto all = best;
        all.insert(all.end(), clip_state.begin(), clip_state.end());
        for (auto& nt : adam.state_tensors()) all.push_back(nt);
        write_atomic(paths.checkpoint, all);
      }
      if (log)
        log(std::string(variant_name(cfg.variant)) + " step " + std::to_string(step + 1) + " loss " + num(total) +
            " dev " + num(score));
    }
    metrics << step << ',' << num(total) << ',' << num(r.parallel.defined() ? r.parallel.item() : kNan) << ','
            << num(r.cascaded.defined() ? r.cascaded.item() : kNan) << ',' << num(q) << ',' << num(segs) << ','
            << num(score) << ',' << num(r1) << ',' << num(f1) << "\n";
    res.steps_run = step + 1;
  }
  metrics.flush();
  if (!metrics) throw Error(ErrorKind::io, "failed writing " + paths.metrics_log);
  if (!best.empty()) m.load_state(best);
  return res;
}

}  // namespace cifclip
