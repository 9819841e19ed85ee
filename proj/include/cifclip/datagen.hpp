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
#include <iosfwd>
#include <string>
#include <vector>

#include "cifclip/random.hpp"

namespace cifclip {

inline constexpr const char* kWordMarker = "\xE2\x96\x81";  // "▁"
inline constexpr const char* kEndToken = "</s>";

std::string default_data_dir();
// Non-empty lines not starting with '#'.
std::vector<std::string> read_word_list(const std::string& path);

struct VocabConfig {
  std::size_t n_concepts = 60;
  std::size_t n_stop = 8;
  std::size_t d_audio = 20;
  std::size_t d_image = 24;
  std::vector<std::string> concept_pool;  // empty: data/concepts.txt
  std::vector<std::string> stop_pool;     // empty: data/stopwords.txt
};

/// Concept words split into word pieces, stop tokens and the end token.
/// Token ids: content pieces in order of first use, then stop tokens, then the
/// end token.
struct ConceptVocab {
  std::vector<std::string> words;
  std::vector<std::vector<std::size_t>> pieces;  // per word
  std::vector<std::string> tokens;
  std::vector<bool> is_stop;
  std::vector<bool> is_word_initial;
  std::vector<std::size_t> stop_ids;
  std::size_t end_id = 0;
  // Generation-only state; empty for a vocabulary read back from disk.
  std::vector<std::vector<double>> acoustic;     // per token, [d_audio]
  std::vector<std::vector<double>> image_basis;  // per word, [d_image]

  std::size_t size() const { return tokens.size(); }
  // Concatenated pieces with markers removed.
  std::string spell(std::size_t word) const;
};

ConceptVocab build_vocab(std::uint64_t seed, const VocabConfig& config = {});

void write_vocab(const std::string& path, const ConceptVocab& vocab);
ConceptVocab load_vocab(const std::string& path);

struct AlignedToken {
  std::size_t token;
  std::size_t start;  // first frame
  std::size_t end;    // one past the last frame
};

struct Caption {
  std::vector<std::size_t> tokens;  // ends with the end token
  std::vector<std::vector<double>> frames;
  std::vector<AlignedToken> alignment;  // every token but the end token
};

struct SceneRecord {
  std::uint64_t scene_id = 0;
  std::vector<std::size_t> concepts;  // word indices, ascending
  std::vector<double> image;
  std::vector<Caption> captions;
};

struct Dataset {
  std::vector<SceneRecord> scenes;
};

struct CorpusConfig {
  std::size_t n_scenes = 2000;
  double train_fraction = 0.8;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
  std::size_t min_concepts = 2, max_concepts = 4;
  std::size_t min_captions = 1, max_captions = 5;
  std::size_t min_frames = 3, max_frames = 8;
  double stop_probability = 0.5;
  double sigma_image = 0.5;
  double sigma_speech = 0.5;
};

struct Corpus {
  Dataset train, dev, test;
};

/// Scenes are generated from per-scene seeds and split so that no concept
/// combination crosses splits.
Corpus generate_corpus(const ConceptVocab& vocab, std::uint64_t seed, const CorpusConfig& config = {});

inline constexpr const char* kManifestHeader = "CIFG-MANIFEST v1";

void write_manifest(std::ostream& out, const Dataset& data);
void write_manifest(const std::string& path, const Dataset& data);
Dataset read_manifest(std::istream& in);
Dataset load_manifest(const std::string& path);

}  // namespace cifclip
