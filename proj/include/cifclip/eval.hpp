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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cifclip/quantizer.hpp"
#include "cifclip/tensor.hpp"

namespace cifclip {

struct MatchCounts {
  std::size_t matched = 0;
  std::size_t predicted = 0;
  std::size_t reference = 0;

  MatchCounts& operator+=(const MatchCounts& o) {
    matched += o.matched;
    predicted += o.predicted;
    reference += o.reference;
    return *this;
  }
};

struct Scores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged scores; f1 is 0 when precision + recall is 0.
Scores scores_from(const MatchCounts& c);

/// One utterance of top-K BPE keyword matching. `ranked` holds, per position,
/// candidate ids in descending similarity; the first `k` are used. Each
/// reference occurrence can be claimed by one position and each position
/// claims at most one occurrence; the count is a maximum matching. The
/// precision denominator is the number of predicted tokens, k per position
/// (after stop filtering, the surviving ones). Returns nullopt when the
/// reference is empty after filtering.
std::optional<MatchCounts> keyword_counts_bpe(const std::vector<std::vector<std::size_t>>& ranked,
                                              const std::vector<std::size_t>& reference, std::size_t k,
                                              bool stop_filter, const std::vector<bool>& is_stop);

// Words spelled by a token sequence: a word starts at each word-initial token;
// markers are stripped and the end token is skipped.
std::vector<std::string> decode_words(const std::vector<std::size_t>& tokens, const Codebook& cb);

/// Words built from neighbouring positions. Runs start where the top-1 token is
/// word-initial; a run of at most `run_cap` positions contributes every
/// in-lexicon spelling obtained by choosing one of the top-k tokens per
/// position (starting with a word-initial token), each spelling once; longer
/// runs contribute their top-1 spelling only.
std::vector<std::string> construct_words(const std::vector<std::vector<std::size_t>>& ranked, std::size_t k,
                                         const Codebook& cb, const std::set<std::string>& lexicon,
                                         std::size_t run_cap = 4);

// Multiset matching of predicted against reference words.
std::optional<MatchCounts> keyword_counts_word(const std::vector<std::string>& predicted,
                                               const std::vector<std::string>& reference, bool stop_filter,
                                               const std::set<std::string>& stop_words);

struct KeywordRow {
  std::size_t k = 1;
  bool stop_filtered = false;
  MatchCounts counts;
  std::size_t excluded = 0;  // utterances with an empty filtered reference
  Scores scores;
};

struct RetrievalReport {
  std::vector<std::size_t> ks;
  std::vector<double> speech_to_image;
  std::vector<double> image_to_speech;
};

/// Recall@K in both directions. truth[a] is the image of audio query a. Ties
/// rank the lower index first. Images without captions are not queried.
RetrievalReport retrieval_recall(const Tensor& audio, const Tensor& image, const std::vector<std::size_t>& truth,
                                 const std::vector<std::size_t>& ks = {1, 5, 10});
RetrievalReport retrieval_recall_from_scores(const std::vector<double>& scores, std::size_t n_audio,
                                             std::size_t n_image, const std::vector<std::size_t>& truth,
                                             const std::vector<std::size_t>& ks = {1, 5, 10});

/// Predicted fires against true token end frames, matched one-to-one within
/// `tolerance` frames (both sides 1-based frame counts).
MatchCounts boundary_counts(const std::vector<std::size_t>& fires, const std::vector<std::size_t>& true_ends,
                            std::size_t tolerance = 2);

// Fixed-width text tables and one JSON object per row.
std::string format_keyword_table(const std::string& title, const std::vector<KeywordRow>& rows);
std::string keyword_rows_jsonl(const std::string& label, const std::vector<KeywordRow>& rows);
std::string format_retrieval_table(const std::string& title, const RetrievalReport& r);
std::string retrieval_jsonl(const std::string& label, const RetrievalReport& r);

}  // namespace cifclip
