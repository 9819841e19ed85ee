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
#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cifclip/cif.hpp"
#include "cifclip/datagen.hpp"
#include "cifclip/encoders.hpp"
#include "cifclip/eval.hpp"
#include "cifclip/losses.hpp"
#include "cifclip/optim.hpp"
#include "cifclip/params.hpp"
#include "cifclip/quantizer.hpp"

namespace cifclip {

enum class Variant { parallel, cascaded, cascaded_plus, hybrid, hybrid_plus };

Variant parse_variant(const std::string& name);
const char* variant_name(Variant v);
bool has_parallel_branch(Variant v);
bool has_cls_cascade(Variant v);
bool has_cif_cascade(Variant v);
inline bool has_cascade(Variant v) { return has_cls_cascade(v) || has_cif_cascade(v); }

struct VariantConfig {
  Variant variant = Variant::cascaded_plus;
  std::size_t K = 8;
  LossWeights weights;
  double cif_ratio = 0.05;
  std::uint64_t scaling_steps = 300;
  std::uint64_t steps = 3000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double warmup_fraction = 0.05;  // linear warm-up over this share of `steps`
  std::uint64_t seed = 7;
  std::uint64_t eval_every = 100;
  std::size_t eval_batch = 64;
  double vq_temperature = 0.1;
  double init_tau = 0.07;
  // Architecture of the trainable speech branch.
  ExtractorConfig extractor;
  TransformerConfig transformer;
  CifHeadConfig cif_head;
  // Inputs: corpus directory (vocab.tsv and manifests) and pretrained CLIP run.
  std::string data_dir;
  std::string clip_dir;
};

struct ClipConfig {
  std::uint64_t seed = 42;
  std::uint64_t max_steps = 3000;
  std::size_t batch_size = 64;
  double lr = 3e-3;
  std::uint64_t warmup_steps = 50;
  std::uint64_t eval_every = 100;
  double target_r1 = 0.8;
  double init_tau = 0.07;
  TextEncoderConfig text;
  ImageEncoderConfig image;
};

/// key=value lines over a base configuration; blank lines and '#' comments
/// are skipped. Unknown keys and malformed values are configuration errors.
VariantConfig parse_variant_config(std::istream& in, VariantConfig base = {});
ClipConfig parse_clip_config(std::istream& in, ClipConfig base = {});
std::string format_variant_config(const VariantConfig& cfg);
std::string format_clip_config(const ClipConfig& cfg);
// Corpus and vocabulary sizes for data generation.
void parse_corpus_config(std::istream& in, CorpusConfig& corpus, VocabConfig& vocab);
// Range checks shared by parsing and programmatic construction.
void validate(const VariantConfig& cfg);

// ---- data views ---------------------------------------------------------------

/// One spoken caption paired with its scene.
struct UtteranceRef {
  std::size_t scene;
  std::size_t caption;
};

struct Split {
  Dataset data;
  std::vector<UtteranceRef> utterances;
  static Split from(Dataset data);
};

/// Positive pairs for a batch: the same scene or an identical concept set.
std::vector<std::uint8_t> positive_mask(const Dataset& data, const std::vector<std::size_t>& scenes_a,
                                        const std::vector<std::size_t>& scenes_b);

// ---- toy CLIP -----------------------------------------------------------------

/// Frozen image and text towers plus the codebook read off the token table.
struct ClipModel {
  ClipConfig config;
  ParamSet params;
  ImageEncoder image;
  TextEncoder text;
  Tensor log_inv_tau;
  std::vector<std::string> tokens;
  std::vector<bool> is_stop, is_word_initial;
  std::size_t end_id = 0;
  std::set<std::string> lexicon;     // concept words and stop words
  std::set<std::string> stop_words;

  ClipModel(const ClipConfig& config, const ConceptVocab& vocab, bool trainable);
  Codebook codebook() const;
  // Embeddings of every scene image, [S, d_embed], constant.
  Tensor embed_images(const Dataset& data) const;
  // Text embeddings of every caption in `split` order, constant.
  Tensor embed_captions(const Split& split) const;
};

struct ClipResult {
  std::vector<double> dev_r1;  // per evaluation
  std::uint64_t steps = 0;
  double final_r1 = 0.0;
};

/// Contrastive training of both towers on (image, caption tokens) until dev
/// text-to-image R@1 reaches the target or the budget is spent. Fewer than
/// twice chance at the end is a degenerate-input error.
ClipResult pretrain_toy_clip(ClipModel& model, const Split& train, const Split& dev,
                             const std::function<void(const std::string&)>& log = {});

void save_clip(const std::string& path, const ClipModel& model);
void load_clip(const std::string& path, ClipModel& model);

// ---- speech branch ------------------------------------------------------------

struct SpeechModel {
  VariantConfig config;
  ParamSet params;
  SpeechFeatureExtractor extractor;
  TransformerEncoder transformer;
  ClsBank cls;
  Tensor par_w, par_b, par_log_inv_tau;
  Tensor casc_w, casc_b, casc_log_inv_tau;
  CifHead cif;
  RunningStats bn;

  SpeechModel(const VariantConfig& config, std::size_t d_embed);
  // Trainable parameters, BN statistics (non-trainable) under "spc/".
  std::vector<NamedTensor> state_tensors() const;
  void load_state(const std::vector<NamedTensor>& tensors);
};

struct Batch {
  std::vector<std::size_t> scenes;
  std::vector<UtteranceRef> utterances;
  FrameBatch raw;
  std::vector<std::uint8_t> mask;  // [B*B], audio rows vs image columns
  Tensor image_emb;                // [B, d_embed], constant
};

Batch make_batch(const Split& split, const std::vector<std::size_t>& utterance_ids, const Tensor& scene_images);

struct ForwardResult {
  Tensor total, parallel, cascaded, quantity;  // undefined when not part of the variant
  Tensor parallel_emb, cascaded_emb;           // [B, d_embed]
  // Keyword positions: pre-quantization vectors [N, d_embed] and the number of
  // positions contributed by each utterance, in batch order.
  Tensor positions;
  std::vector<std::size_t> position_counts;
  std::vector<std::vector<std::size_t>> fires;  // CIF variants only
  std::vector<double> alpha_sums;               // CIF variants only
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t step = 0;
  bool compute_loss = true;
};

ForwardResult forward_variant(SpeechModel& model, const ClipModel& clip, const Codebook& cb, const Batch& batch,
                              const ForwardOptions& opts, Rng& dropout_rng);

// ---- evaluation ---------------------------------------------------------------

struct SplitEvaluation {
  std::optional<RetrievalReport> parallel, cascaded;
  std::vector<KeywordRow> bpe;   // K = 1..max_k, without and with stop filtering
  std::vector<KeywordRow> word;  // same layout
  MatchCounts boundary;
  std::size_t utterances = 0;
  // Fraction of utterances whose dynamic segment count is within 2 of the target.
  double segment_count_within2 = 0.0;
  double mean_segments = 0.0;
};

SplitEvaluation evaluate_split(SpeechModel& model, const ClipModel& clip, const Codebook& cb, const Split& split,
                               const Tensor& scene_images, std::size_t max_k = 5);

/// Uniformly random distinct tokens (the end token excluded) at
/// cif_target_length positions per utterance.
std::vector<KeywordRow> random_keyword_rows(const Split& split, const Codebook& cb, double ratio,
                                            std::uint64_t seed, std::size_t max_k = 5);

// Score used for model selection: dev S->I R@1 with a parallel branch,
// otherwise dev top-5 stop-filtered BPE keyword F1.
double selection_score(Variant v, const SplitEvaluation& e);

// ---- training -----------------------------------------------------------------

struct TrainPaths {
  std::string checkpoint;   // best-dev model, rewritten on every improvement
  std::string metrics_log;  // header, then one row per step
};

struct TrainResult {
  std::uint64_t steps_run = 0;
  std::uint64_t best_step = 0;
  double best_score = 0.0;
  double first_quantity = 0.0;  // batch-mean quantity loss at step 0
  double last_quantity = 0.0;   // at the final step
};

/// Adam training of the speech branch against frozen CLIP towers. A
/// non-finite loss stops training with a numeric error; the checkpoint on
/// disk is then the last good one.
TrainResult train(SpeechModel& model, const ClipModel& clip, const Split& train_split, const Split& dev_split,
                  const TrainPaths& paths, const std::function<void(const std::string&)>& log = {});

inline constexpr const char* kMetricsHeader =
    "step,total,parallel,cascaded,quantity,segments,dev_score,dev_s2i_r1,dev_kw_f1";

}  // namespace cifclip
