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

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include "cifclip/datagen.hpp"
#include "cifclip/eval.hpp"
#include "cifclip/gradsuite.hpp"
#include "cifclip/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cifclip;

namespace {

// Thrown for problems found before any output is written.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw ValidationError("missing input file " + p.string());
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorKind::io, "cannot write " + p.string());
}

std::string split_file(const std::string& split) {
  if (split != "train" && split != "dev" && split != "test")
    throw ValidationError("--split must be train, dev or test");
  return split + ".manifest";
}

// Everything needed to evaluate a trained run directory.
struct LoadedRun {
  VariantConfig cfg;
  ConceptVocab vocab;
  std::unique_ptr<ClipModel> clip;
  std::unique_ptr<SpeechModel> model;
};

LoadedRun load_run(const fs::path& dir) {
  for (const char* f : {"config.cfg", "clip.cfg", "vocab.tsv", "model.ckpt"}) require_file(dir / f);
  LoadedRun run;
  std::istringstream vc(read_file(dir / "config.cfg")), cc(read_file(dir / "clip.cfg"));
  run.cfg = parse_variant_config(vc);
  const ClipConfig clip_cfg = parse_clip_config(cc);
  run.vocab = load_vocab((dir / "vocab.tsv").string());
  const auto tensors = load_checkpoint((dir / "model.ckpt").string());
  run.clip = std::make_unique<ClipModel>(clip_cfg, run.vocab, false);
  run.clip->params.assign_from(tensors);
  run.model = std::make_unique<SpeechModel>(run.cfg, clip_cfg.text.d_embed);
  run.model->load_state(tensors);
  return run;
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v < 1) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValidationError("--topk expects comma-separated positive integers");
    }
  }
  if (ks.empty()) throw ValidationError("--topk is empty");
  return ks;
}

using Action = std::function<void()>;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cifclip: desk-scale visually grounded speech models with CIF keyword segmentation"};
  app.require_subcommand(1);
  std::string out_dir;
  std::uint64_t seed = 0;
  Action action;  // set by the chosen command's validation step

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "synthesize vocabulary, scenes and spoken captions");
  std::string gen_config;
  std::size_t gen_scenes = 0;
  gen->add_option("--seed", seed, "generation seed")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--config", gen_config, "corpus key=value file");
  gen->add_option("--scenes", gen_scenes, "number of scenes (overrides the config)");

  // pretrain-clip
  auto* pre = app.add_subcommand("pretrain-clip", "train the toy image/text towers and freeze them");
  std::string pre_data, pre_config;
  pre->add_option("--data", pre_data, "corpus directory")->required();
  pre->add_option("--seed", seed, "training seed")->required();
  pre->add_option("--out", out_dir, "output directory")->required();
  pre->add_option("--config", pre_config, "toy CLIP key=value file");

  // train
  auto* tr = app.add_subcommand("train", "train one speech variant against the frozen towers");
  std::string tr_variant, tr_config, tr_data, tr_clip;
  std::uint64_t tr_steps = 0;
  tr->add_option("--variant", tr_variant, "parallel | cascaded | cascaded_plus | hybrid | hybrid_plus");
  tr->add_option("--config", tr_config, "variant key=value file");
  tr->add_option("--seed", seed, "training seed")->required();
  tr->add_option("--out", out_dir, "run directory")->required();
  tr->add_option("--data", tr_data, "corpus directory (overrides data_dir)");
  tr->add_option("--clip", tr_clip, "toy CLIP directory (overrides clip_dir)");
  tr->add_option("--steps", tr_steps, "training steps (overrides the config)");

  // eval-keywords / eval-retrieval / inspect-segments share their inputs
  std::string ckpt, split = "test", data_override, topk = "1,2,3,4,5";
  bool random_baseline = false;
  std::size_t limit = 20;
  auto* ek = app.add_subcommand("eval-keywords", "top-K keyword precision/recall/F1 of a cascaded run");
  auto* er = app.add_subcommand("eval-retrieval", "speech/image retrieval recall@K of a run");
  auto* is = app.add_subcommand("inspect-segments", "CIF firing positions against true token boundaries");
  for (auto* c : {ek, er, is}) {
    c->add_option("--ckpt", ckpt, "run directory")->required();
    c->add_option("--split", split, "train | dev | test");
    c->add_option("--data", data_override, "corpus directory (overrides the run's data_dir)");
    c->add_option("--out", out_dir, "output directory")->required();
  }
  ek->add_option("--topk", topk, "comma-separated K values");
  ek->add_flag("--random-baseline", random_baseline, "also score uniformly random tokens (needs --seed)");
  ek->add_option("--seed", seed, "seed of the random baseline");
  is->add_option("--limit", limit, "utterances listed in detail");

  auto* gc = app.add_subcommand("grad-check", "finite-difference checks of the differentiable blocks");
  gc->add_option("--seed", seed, "instance seed")->required();
  gc->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  auto data_dir_of = [](const std::string& override_dir, const std::string& configured) {
    const std::string d = override_dir.empty() ? configured : override_dir;
    if (d.empty()) throw ValidationError("no corpus directory: pass --data or set data_dir");
    return fs::path(d);
  };

  try {
    // ---- validation: no files are written here ----
    if (gen->parsed()) {
      CorpusConfig cc;
      VocabConfig vc;
      if (!gen_config.empty()) {
        std::istringstream in(read_file(gen_config));
        parse_corpus_config(in, cc, vc);
      }
      if (gen_scenes) cc.n_scenes = gen_scenes;
      if (cc.n_scenes < 10) throw ValidationError("at least 10 scenes are required");
      action = [=] {
        const ConceptVocab vocab = build_vocab(seed, vc);
        const Corpus corpus = generate_corpus(vocab, seed, cc);
        fs::create_directories(out_dir);
        write_vocab((fs::path(out_dir) / "vocab.tsv").string(), vocab);
        write_manifest((fs::path(out_dir) / "train.manifest").string(), corpus.train);
        write_manifest((fs::path(out_dir) / "dev.manifest").string(), corpus.dev);
        write_manifest((fs::path(out_dir) / "test.manifest").string(), corpus.test);
        std::printf("wrote %zu/%zu/%zu scenes, %zu tokens to %s\n", corpus.train.scenes.size(),
                    corpus.dev.scenes.size(), corpus.test.scenes.size(), vocab.size(), out_dir.c_str());
      };
    } else if (pre->parsed()) {
      ClipConfig cfg;
      if (!pre_config.empty()) {
        std::istringstream in(read_file(pre_config));
        cfg = parse_clip_config(in);
      }
      cfg.seed = seed;
      const fs::path data(pre_data);
      for (const char* f : {"vocab.tsv", "train.manifest", "dev.manifest"}) require_file(data / f);
      action = [=] {
        const ConceptVocab vocab = load_vocab((data / "vocab.tsv").string());
        const Split train = Split::from(load_manifest((data / "train.manifest").string()));
        const Split dev = Split::from(load_manifest((data / "dev.manifest").string()));
        ClipModel model(cfg, vocab, true);
        std::string log;
        auto res = pretrain_toy_clip(model, train, dev, [&](const std::string& line) {
          log += line + "\n";
          std::fprintf(stderr, "%s\n", line.c_str());
        });
        fs::create_directories(out_dir);
        save_clip((fs::path(out_dir) / "clip.ckpt").string(), model);
        write_file(fs::path(out_dir) / "clip.cfg", format_clip_config(model.config));
        fs::copy_file(data / "vocab.tsv", fs::path(out_dir) / "vocab.tsv", fs::copy_options::overwrite_existing);
        write_file(fs::path(out_dir) / "clip_log.txt", log);
        std::printf("toy CLIP: %llu steps, dev text->image R@1 %.4f\n", static_cast<unsigned long long>(res.steps),
                    res.final_r1);
      };
    } else if (tr->parsed()) {
      VariantConfig cfg;
      if (!tr_config.empty()) {
        std::istringstream in(read_file(tr_config));
        cfg = parse_variant_config(in);
      }
      if (!tr_variant.empty()) cfg.variant = parse_variant(tr_variant);
      if (!tr_data.empty()) cfg.data_dir = tr_data;
      if (!tr_clip.empty()) cfg.clip_dir = tr_clip;
      if (tr_steps) cfg.steps = tr_steps;
      cfg.seed = seed;
      validate(cfg);
      const fs::path data = data_dir_of("", cfg.data_dir);
      if (cfg.clip_dir.empty()) throw ValidationError("no toy CLIP directory: pass --clip or set clip_dir");
      const fs::path clip_dir(cfg.clip_dir);
      for (const char* f : {"vocab.tsv", "train.manifest", "dev.manifest"}) require_file(data / f);
      for (const char* f : {"clip.ckpt", "clip.cfg", "vocab.tsv"}) require_file(clip_dir / f);
      std::istringstream cc(read_file(clip_dir / "clip.cfg"));
      const ClipConfig clip_cfg = parse_clip_config(cc);
      if (read_file(data / "vocab.tsv") != read_file(clip_dir / "vocab.tsv"))
        throw ValidationError("corpus and toy CLIP were built from different vocabularies");
      action = [=] {
        const ConceptVocab vocab = load_vocab((data / "vocab.tsv").string());
        ClipModel clip(clip_cfg, vocab, false);
        load_clip((clip_dir / "clip.ckpt").string(), clip);
        const Split train_split = Split::from(load_manifest((data / "train.manifest").string()));
        const Split dev_split = Split::from(load_manifest((data / "dev.manifest").string()));
        SpeechModel model(cfg, clip_cfg.text.d_embed);
        const fs::path out(out_dir);
        fs::create_directories(out);
        write_file(out / "config.cfg", format_variant_config(cfg));
        write_file(out / "clip.cfg", format_clip_config(clip_cfg));
        fs::copy_file(data / "vocab.tsv", out / "vocab.tsv", fs::copy_options::overwrite_existing);
        std::string log;
        auto res = train(model, clip, train_split, dev_split,
                         {(out / "model.ckpt").string(), (out / "metrics.csv").string()},
                         [&](const std::string& line) {
                           log += line + "\n";
                           std::fprintf(stderr, "%s\n", line.c_str());
                         });
        write_file(out / "train_log.txt", log);
        std::printf("%s: %llu steps, best dev score %.4f at step %llu\n", variant_name(cfg.variant),
                    static_cast<unsigned long long>(res.steps_run), res.best_score,
                    static_cast<unsigned long long>(res.best_step));
      };
    } else if (ek->parsed() || er->parsed() || is->parsed()) {
      const std::string manifest = split_file(split);
      const std::vector<std::size_t> ks = parse_ks(topk);
      if (random_baseline && ek->count("--seed") == 0) throw ValidationError("--random-baseline needs --seed");
      auto run = std::make_shared<LoadedRun>(load_run(ckpt));
      const fs::path data = data_dir_of(data_override, run->cfg.data_dir);
      require_file(data / manifest);
      const Variant v = run->cfg.variant;
      if (ek->parsed() && !has_cascade(v))
        throw ValidationError(std::string("variant ") + variant_name(v) + " has no keyword branch");
      if (is->parsed() && !has_cif_cascade(v))
        throw ValidationError(std::string("variant ") + variant_name(v) + " has no CIF segmenter");
      std::size_t max_k = 0;
      for (std::size_t k : ks) max_k = std::max(max_k, k);
      if (max_k > run->vocab.size()) throw ValidationError("--topk exceeds the vocabulary size");
      const bool keywords = ek->parsed(), retrieval = er->parsed();
      action = [=] {
        const Split sp = Split::from(load_manifest((data / manifest).string()));
        const Codebook cb = run->clip->codebook();
        const Tensor images = run->clip->embed_images(sp.data);
        const fs::path out(out_dir);
        if (keywords || retrieval) {
          const SplitEvaluation ev = evaluate_split(*run->model, *run->clip, cb, sp, images, keywords ? max_k : 1);
          fs::create_directories(out);
          const std::string label = std::string(variant_name(v)) + "/" + split;
          if (keywords) {
            auto pick = [&](const std::vector<KeywordRow>& rows) {
              std::vector<KeywordRow> sel;
              for (bool f : {false, true})
                for (std::size_t k : ks)
                  for (const auto& r : rows)
                    if (r.k == k && r.stop_filtered == f) sel.push_back(r);
              return sel;
            };
            std::string table = format_keyword_table(label + " BPE keywords", pick(ev.bpe)) + "\n" +
                                format_keyword_table(label + " word keywords", pick(ev.word));
            std::string jsonl = keyword_rows_jsonl(label + "/bpe", pick(ev.bpe)) +
                                keyword_rows_jsonl(label + "/word", pick(ev.word));
            if (random_baseline) {
              auto rnd = pick(random_keyword_rows(sp, cb, run->cfg.cif_ratio, seed, max_k));
              table += "\n" + format_keyword_table("random tokens/" + split + " BPE keywords", rnd);
              jsonl += keyword_rows_jsonl("random/" + split + "/bpe", rnd);
            }
            write_file(out / "keywords.txt", table);
            write_file(out / "keywords.jsonl", jsonl);
            std::fputs(table.c_str(), stdout);
          } else {
            std::string table, jsonl;
            if (ev.parallel) {
              table += format_retrieval_table(label + " parallel branch", *ev.parallel);
              jsonl += retrieval_jsonl(label + "/parallel", *ev.parallel);
            }
            if (ev.cascaded) {
              table += format_retrieval_table(label + " cascaded branch", *ev.cascaded);
              jsonl += retrieval_jsonl(label + "/cascaded", *ev.cascaded);
            }
            write_file(out / "retrieval.txt", table);
            write_file(out / "retrieval.jsonl", jsonl);
            std::fputs(table.c_str(), stdout);
          }
          return;
        }
        // inspect-segments
        Rng unused(0);
        std::ostringstream o;
        MatchCounts bc;
        std::size_t within = 0;
        const std::size_t U = sp.utterances.size();
        for (std::size_t i = 0; i < U; i += run->cfg.eval_batch) {
          std::vector<std::size_t> ids(std::min(run->cfg.eval_batch, U - i));
          std::iota(ids.begin(), ids.end(), i);
          NoGradGuard guard;
          Batch batch = make_batch(sp, ids, images);
          ForwardOptions fo;
          fo.compute_loss = false;
          ForwardResult r = forward_variant(*run->model, *run->clip, cb, batch, fo, unused);
          std::size_t off = 0;
          auto pz = r.positions.data();
          for (std::size_t b = 0; b < ids.size(); ++b) {
            const auto& u = batch.utterances[b];
            const Caption& cap = sp.data.scenes[u.scene].captions[u.caption];
            std::vector<std::size_t> ends;
            for (const auto& a : cap.alignment) ends.push_back(a.end);
            const MatchCounts c = boundary_counts(r.fires[b], ends);
            bc += c;
            const double target = cif_target_length(std::vector<std::size_t>{cap.frames.size()}, run->cfg.cif_ratio)[0];
            if (std::abs(static_cast<double>(r.position_counts[b]) - target) <= 2.0) ++within;
            if (i + b < limit) {
              o << "utterance " << (i + b) << " scene " << sp.data.scenes[u.scene].scene_id << " frames "
                << cap.frames.size() << " target " << target << " segments " << r.position_counts[b] << "\n  fires:";
              for (std::size_t f : r.fires[b]) o << ' ' << f;
              o << "\n  token ends:";
              for (std::size_t e : ends) o << ' ' << e;
              o << "\n  top-1:";
              for (std::size_t p = 0; p < r.position_counts[b]; ++p)
                o << ' ' << cb.tokens[nearest_topk(pz.subspan((off + p) * cb.dim(), cb.dim()), cb, 1)[0].id];
              o << "\n  caption:";
              for (std::size_t t : cap.tokens) o << ' ' << cb.tokens[t];
              o << "\n";
            }
            off += r.position_counts[b];
          }
        }
        const Scores s = scores_from(bc);
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "boundaries (tolerance 2): precision %.4f recall %.4f F1 %.4f; segment count within 2 of "
                      "target: %.4f of %zu utterances\n",
                      s.precision, s.recall, s.f1, static_cast<double>(within) / static_cast<double>(U), U);
        o << buf;
        fs::create_directories(out);
        write_file(out / "segments.txt", o.str());
        std::fputs(buf, stdout);
      };
    } else if (gc->parsed()) {
      action = [=] {
        const auto items = run_gradient_suite(seed);
        std::string report;
        bool ok = true;
        for (const auto& it : items) {
          char buf[128];
          std::snprintf(buf, sizeof buf, "%-22s %.3e %s\n", it.name.c_str(), it.error, it.passed ? "ok" : "FAIL");
          report += buf;
          ok = ok && it.passed;
        }
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "gradcheck.txt", report);
        std::fputs(report.c_str(), stdout);
        if (!ok) throw Error(ErrorKind::numeric, "gradient check failed");
      };
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    action();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
