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

#include "cifclip/datagen.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cifclip/error.hpp"

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

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<double> gaussian_vector(Rng& rng, std::size_t d, double sd) {
  std::vector<double> v(d);
  for (auto& x : v) x = sd * normal(rng);
  return v;
}

// Cut a word into 1-3 pieces of at least two characters where the length
// allows it.
std::vector<std::string> cut_word(const std::string& word, Rng& rng) {
  const std::size_t max_pieces = std::min<std::size_t>(3, std::max<std::size_t>(1, word.size() / 2));
  const auto n = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(max_pieces)));
  std::vector<std::size_t> cuts;
  while (cuts.size() + 1 < n) {
    const auto c = static_cast<std::size_t>(uniform_int(rng, 2, static_cast<std::int64_t>(word.size()) - 2));
    bool ok = true;
    for (auto other : cuts) ok = ok && (c > other ? c - other : other - c) >= 2;
    if (ok)
      cuts.push_back(c);
    else
      cuts.clear();  // an early cut can leave no room for the next one
  }
  std::sort(cuts.begin(), cuts.end());
  std::vector<std::string> out;
  std::size_t prev = 0;
  for (auto c : cuts) {
    out.push_back(word.substr(prev, c - prev));
    prev = c;
  }
  out.push_back(word.substr(prev));
  out.front() = kWordMarker + out.front();
  return out;
}

bool is_prefix(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return a.size() <= b.size() && std::equal(a.begin(), a.end(), b.begin());
}

void append_number(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

template <class Range, class Fn>
void append_array(std::string& out, const Range& r, Fn fn) {
  out += '[';
  bool first = true;
  for (const auto& x : r) {
    if (!first) out += ',';
    first = false;
    fn(out, x);
  }
  out += ']';
}

[[noreturn]] void parse_fail(std::size_t line, const std::string& what) {
  throw Error(ErrorKind::parse, "manifest line " + std::to_string(line) + ": " + what);
}

}  // namespace

std::string default_data_dir() {
  if (const char* env = std::getenv("CIFCLIP_DATA_DIR")) return env;
  return CIFCLIP_DATA_DIR;
}

std::vector<std::string> read_word_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open word list " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::string ConceptVocab::spell(std::size_t word) const {
  std::string s;
  for (auto id : pieces.at(word)) s += tokens[id];
  const std::string marker = kWordMarker;
  for (auto pos = s.find(marker); pos != std::string::npos; pos = s.find(marker)) s.erase(pos, marker.size());
  return s;
}

ConceptVocab build_vocab(std::uint64_t seed, const VocabConfig& config) {
  auto concepts = config.concept_pool.empty() ? read_word_list(default_data_dir() + "/concepts.txt") : config.concept_pool;
  auto stops = config.stop_pool.empty() ? read_word_list(default_data_dir() + "/stopwords.txt") : config.stop_pool;
  if (config.n_concepts < 2) throw Error(ErrorKind::configuration, "need at least two concepts");
  if (config.n_concepts > concepts.size())
    throw Error(ErrorKind::configuration, "concept pool has only " + std::to_string(concepts.size()) + " words");
  if (config.n_stop > stops.size())
    throw Error(ErrorKind::configuration, "stop-word pool has only " + std::to_string(stops.size()) + " words");

  Rng rng(mix_seed(seed, fnv1a("vocab")));
  shuffle(concepts, rng);
  shuffle(stops, rng);
  concepts.resize(config.n_concepts);
  stops.resize(config.n_stop);
  std::set<std::string> stop_tokens;
  for (const auto& s : stops) stop_tokens.insert(kWordMarker + s);

  std::vector<std::vector<std::string>> splits;
  for (const auto& w : concepts) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == 200) throw Error(ErrorKind::vocabulary, "cannot split '" + w + "' without collisions");
      auto cut = cut_word(w, rng);
      bool ok = std::none_of(cut.begin(), cut.end(), [&](const std::string& p) { return stop_tokens.count(p); });
      for (const auto& other : splits) ok = ok && !is_prefix(cut, other) && !is_prefix(other, cut);
      if (ok) {
        splits.push_back(std::move(cut));
        break;
      }
    }
  }

  ConceptVocab v;
  v.words = concepts;
  std::map<std::string, std::size_t> index;
  auto intern = [&](const std::string& t, bool stop) {
    auto [it, fresh] = index.try_emplace(t, v.tokens.size());
    if (fresh) {
      v.tokens.push_back(t);
      v.is_stop.push_back(stop);
      v.is_word_initial.push_back(t.rfind(kWordMarker, 0) == 0);
    }
    return it->second;
  };
  for (const auto& cut : splits) {
    std::vector<std::size_t> ids;
    for (const auto& p : cut) ids.push_back(intern(p, false));
    v.pieces.push_back(std::move(ids));
  }
  for (const auto& s : stops) v.stop_ids.push_back(intern(kWordMarker + s, true));
  v.end_id = intern(kEndToken, false);

  Rng acoustic_rng(mix_seed(seed, fnv1a("acoustic")));
  for (std::size_t t = 0; t < v.size(); ++t) v.acoustic.push_back(gaussian_vector(acoustic_rng, config.d_audio, 1.0));
  Rng image_rng(mix_seed(seed, fnv1a("image")));
  for (std::size_t w = 0; w < v.words.size(); ++w)
    v.image_basis.push_back(gaussian_vector(image_rng, config.d_image, 1.0));
  return v;
}

void write_vocab(const std::string& path, const ConceptVocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  out << "# cifclip vocab v1\n";
  for (std::size_t t = 0; t < vocab.size(); ++t)
    out << "token\t" << t << '\t' << vocab.tokens[t] << '\t' << (vocab.is_stop[t] ? 1 : 0) << '\t'
        << (vocab.is_word_initial[t] ? 1 : 0) << '\n';
  for (std::size_t w = 0; w < vocab.words.size(); ++w) {
    out << "word\t" << w << '\t' << vocab.words[w] << '\t';
    for (std::size_t i = 0; i < vocab.pieces[w].size(); ++i) out << (i ? " " : "") << vocab.pieces[w][i];
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "failed writing " + path);
}

ConceptVocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  ConceptVocab v;
  std::string line;
  std::size_t lineno = 0;
  bool have_end = false;
  auto fail = [&](const std::string& what) {
    throw Error(ErrorKind::parse, path + " line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "# cifclip vocab v1") fail("unknown vocabulary header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string part; std::getline(ss, part, '\t');) f.push_back(part);
    try {
      if (f.size() == 5 && f[0] == "token") {
        if (std::stoul(f[1]) != v.tokens.size()) fail("token ids must be consecutive");
        v.tokens.push_back(f[2]);
        v.is_stop.push_back(f[3] == "1");
        v.is_word_initial.push_back(f[4] == "1");
        if (f[3] == "1") v.stop_ids.push_back(v.tokens.size() - 1);
        if (f[2] == kEndToken) {
          v.end_id = v.tokens.size() - 1;
          have_end = true;
        }
      } else if (f.size() == 4 && f[0] == "word") {
        v.words.push_back(f[2]);
        std::vector<std::size_t> ids;
        std::stringstream ps(f[3]);
        for (std::size_t id; ps >> id;) {
          if (id >= v.tokens.size()) fail("word piece id out of range");
          ids.push_back(id);
        }
        if (ids.empty()) fail("word without pieces");
        v.pieces.push_back(std::move(ids));
      } else {
        fail("malformed entry");
      }
    } catch (const std::logic_error&) {
      fail("malformed number");
    }
  }
  if (lineno == 0) throw Error(ErrorKind::parse, path + ": empty vocabulary file");
  if (!have_end) throw Error(ErrorKind::parse, path + ": missing end token");
  return v;
}

Corpus generate_corpus(const ConceptVocab& vocab, std::uint64_t seed, const CorpusConfig& config) {
  if (config.n_scenes < 10) throw Error(ErrorKind::size, "a corpus needs at least 10 scenes");
  const double fsum = config.train_fraction + config.dev_fraction + config.test_fraction;
  if (std::fabs(fsum - 1.0) > 1e-9 || config.train_fraction < 0 || config.dev_fraction < 0 || config.test_fraction < 0)
    throw Error(ErrorKind::configuration, "split fractions must be nonnegative and sum to 1");
  if (vocab.acoustic.empty() || vocab.image_basis.empty())
    throw Error(ErrorKind::configuration, "vocabulary lacks generation templates");
  if (config.max_concepts > vocab.words.size() || config.min_concepts < 1 || config.min_concepts > config.max_concepts ||
      config.min_captions < 1 || config.min_captions > config.max_captions || config.min_frames < 1 ||
      config.min_frames > config.max_frames)
    throw Error(ErrorKind::configuration, "inconsistent corpus ranges");

  const std::size_t d_img = vocab.image_basis.front().size();
  std::vector<SceneRecord> scenes;
  for (std::size_t id = 0; id < config.n_scenes; ++id) {
    Rng rng(mix_seed(seed, fnv1a("scene-" + std::to_string(id))));
    SceneRecord s;
    s.scene_id = id;
    const auto n_concepts = static_cast<std::size_t>(uniform_int(
        rng, static_cast<std::int64_t>(config.min_concepts), static_cast<std::int64_t>(config.max_concepts)));
    std::vector<std::size_t> pool(vocab.words.size());
    std::iota(pool.begin(), pool.end(), 0);
    shuffle(pool, rng);
    s.concepts.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_concepts));
    std::sort(s.concepts.begin(), s.concepts.end());

    s.image.assign(d_img, 0.0);
    for (auto c : s.concepts)
      for (std::size_t j = 0; j < d_img; ++j) s.image[j] += vocab.image_basis[c][j];
    for (auto& x : s.image) x += config.sigma_image * normal(rng);

    const auto n_captions = static_cast<std::size_t>(uniform_int(
        rng, static_cast<std::int64_t>(config.min_captions), static_cast<std::int64_t>(config.max_captions)));
    for (std::size_t k = 0; k < n_captions; ++k) {
      auto order = s.concepts;
      shuffle(order, rng);
      Caption cap;
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (i > 0 && uniform01(rng) < config.stop_probability) {
          const auto pick = static_cast<std::size_t>(
              uniform_int(rng, 0, static_cast<std::int64_t>(vocab.stop_ids.size()) - 1));
          cap.tokens.push_back(vocab.stop_ids[pick]);
        }
        for (auto id : vocab.pieces[order[i]]) cap.tokens.push_back(id);
      }
      for (auto tok : cap.tokens) {
        const auto n_frames = static_cast<std::size_t>(uniform_int(
            rng, static_cast<std::int64_t>(config.min_frames), static_cast<std::int64_t>(config.max_frames)));
        const std::size_t start = cap.frames.size();
        for (std::size_t f = 0; f < n_frames; ++f) {
          auto frame = vocab.acoustic[tok];
          for (auto& x : frame) x += config.sigma_speech * normal(rng);
          cap.frames.push_back(std::move(frame));
        }
        cap.alignment.push_back({tok, start, cap.frames.size()});
      }
      cap.tokens.push_back(vocab.end_id);
      s.captions.push_back(std::move(cap));
    }
    scenes.push_back(std::move(s));
  }

  // Group by concept combination, shuffle the groups and hand each to the
  // split furthest below its target size.
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < scenes.size(); ++i) groups[scenes[i].concepts].push_back(i);
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [combo, members] : groups) order.push_back(&members);
  Rng split_rng(mix_seed(seed, fnv1a("split")));
  shuffle(order, split_rng);
  const double n = static_cast<double>(scenes.size());
  const double target[3] = {config.train_fraction * n, config.dev_fraction * n, config.test_fraction * n};
  double filled[3] = {0, 0, 0};
  std::vector<int> split_of(scenes.size());
  for (const auto* members : order) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (target[s] - filled[s] > target[best] - filled[best]) best = s;
    for (auto i : *members) split_of[i] = best;
    filled[best] += static_cast<double>(members->size());
  }
  Corpus corpus;
  Dataset* parts[3] = {&corpus.train, &corpus.dev, &corpus.test};
  for (std::size_t i = 0; i < scenes.size(); ++i) parts[split_of[i]]->scenes.push_back(std::move(scenes[i]));
  return corpus;
}

void write_manifest(std::ostream& out, const Dataset& data) {
  out << kManifestHeader << '\n';
  std::string line;
  for (const auto& s : data.scenes) {
    line.clear();
    line += "{\"scene_id\":" + std::to_string(s.scene_id) + ",\"concepts\":";
    append_array(line, s.concepts, [](std::string& o, std::size_t c) { o += std::to_string(c); });
    line += ",\"image_feature\":";
    append_array(line, s.image, append_number);
    line += ",\"captions\":";
    append_array(line, s.captions, [](std::string& o, const Caption& c) {
      o += "{\"tokens\":";
      append_array(o, c.tokens, [](std::string& o2, std::size_t t) { o2 += std::to_string(t); });
      o += ",\"frames\":";
      append_array(o, c.frames, [](std::string& o2, const std::vector<double>& f) { append_array(o2, f, append_number); });
      o += ",\"alignment\":";
      append_array(o, c.alignment, [](std::string& o2, const AlignedToken& a) {
        o2 += '[' + std::to_string(a.token) + ',' + std::to_string(a.start) + ',' + std::to_string(a.end) + ']';
      });
      o += '}';
    });
    line += "}\n";
    out << line;
  }
}

void write_manifest(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  write_manifest(out, data);
  if (!out) throw Error(ErrorKind::io, "failed writing " + path);
}

Dataset read_manifest(std::istream& in) {
  Dataset data;
  std::string line;
  if (!std::getline(in, line)) parse_fail(1, "missing header");
  if (line != kManifestHeader) parse_fail(1, "expected header '" + std::string(kManifestHeader) + "'");
  std::size_t lineno = 1, d_img = 0, d_audio = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      parse_fail(lineno, std::string("malformed record (") + e.what() + ")");
    }
    SceneRecord s;
    try {
      s.scene_id = j.at("scene_id").get<std::uint64_t>();
      s.concepts = j.at("concepts").get<std::vector<std::size_t>>();
      s.image = j.at("image_feature").get<std::vector<double>>();
      for (const auto& jc : j.at("captions")) {
        Caption c;
        c.tokens = jc.at("tokens").get<std::vector<std::size_t>>();
        c.frames = jc.at("frames").get<std::vector<std::vector<double>>>();
        for (const auto& ja : jc.at("alignment")) {
          auto a = ja.get<std::vector<std::size_t>>();
          if (a.size() != 3) parse_fail(lineno, "alignment entries are [token, start, end]");
          c.alignment.push_back({a[0], a[1], a[2]});
        }
        s.captions.push_back(std::move(c));
      }
    } catch (const nlohmann::json::exception& e) {
      parse_fail(lineno, std::string("bad field (") + e.what() + ")");
    }
    if (s.image.empty()) parse_fail(lineno, "empty image feature");
    if (d_img == 0) d_img = s.image.size();
    if (s.image.size() != d_img) parse_fail(lineno, "image feature width changed");
    if (s.captions.empty()) parse_fail(lineno, "scene without captions");
    for (const auto& c : s.captions) {
      if (c.frames.empty()) parse_fail(lineno, "caption without frames");
      if (c.tokens.size() != c.alignment.size() + 1) parse_fail(lineno, "alignment must cover every token but the end");
      for (const auto& f : c.frames) {
        if (d_audio == 0) d_audio = f.size();
        if (f.size() != d_audio || d_audio == 0) parse_fail(lineno, "frame width changed");
      }
      std::size_t pos = 0;
      for (std::size_t i = 0; i < c.alignment.size(); ++i) {
        const auto& a = c.alignment[i];
        if (a.token != c.tokens[i]) parse_fail(lineno, "alignment token differs from caption token");
        if (a.start != pos || a.end <= a.start) parse_fail(lineno, "alignment spans do not partition the frames");
        pos = a.end;
      }
      if (pos != c.frames.size()) parse_fail(lineno, "alignment does not cover the frame range");
    }
    data.scenes.push_back(std::move(s));
  }
  return data;
}

Dataset load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  return read_manifest(in);
}

}  // namespace cifclip
