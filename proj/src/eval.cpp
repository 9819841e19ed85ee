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

#include "cifclip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>

#include "cifclip/datagen.hpp"

namespace cifclip {

namespace {

std::string strip_marker(const std::string& s) {
  const std::string marker = kWordMarker;
  if (s.rfind(marker, 0) == 0) return s.substr(marker.size());
  return s;
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

Scores scores_from(const MatchCounts& c) {
  Scores s;
  s.precision = ratio(c.matched, c.predicted);
  s.recall = ratio(c.matched, c.reference);
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::optional<MatchCounts> keyword_counts_bpe(const std::vector<std::vector<std::size_t>>& ranked,
                                              const std::vector<std::size_t>& reference, std::size_t k,
                                              bool stop_filter, const std::vector<bool>& is_stop) {
  if (k == 0) throw Error(ErrorKind::parameter, "keyword K must be positive");
  auto stop = [&](std::size_t id) {
    if (!stop_filter) return false;
    if (id >= is_stop.size()) throw Error(ErrorKind::vocabulary, "token id " + std::to_string(id) + " out of range");
    return static_cast<bool>(is_stop[id]);
  };
  std::vector<std::size_t> ref;
  for (std::size_t id : reference)
    if (!stop(id)) ref.push_back(id);
  if (ref.empty()) return std::nullopt;

  std::vector<std::vector<std::size_t>> cand;
  MatchCounts c;
  c.reference = ref.size();
  for (const auto& list : ranked) {
    std::vector<std::size_t> top;
    for (std::size_t i = 0; i < list.size() && i < k; ++i)
      if (!stop(list[i])) top.push_back(list[i]);
    c.predicted += top.size();
    cand.push_back(std::move(top));
  }

  // Augmenting paths; positions left to right, candidates in rank order.
  std::vector<std::ptrdiff_t> owner(ref.size(), -1);
  std::vector<char> seen;
  std::function<bool(std::size_t)> augment = [&](std::size_t p) {
    for (std::size_t id : cand[p])
      for (std::size_t r = 0; r < ref.size(); ++r) {
        if (ref[r] != id || seen[r]) continue;
        seen[r] = 1;
        if (owner[r] < 0 || augment(static_cast<std::size_t>(owner[r]))) {
          owner[r] = static_cast<std::ptrdiff_t>(p);
          return true;
        }
      }
    return false;
  };
  for (std::size_t p = 0; p < cand.size(); ++p) {
    seen.assign(ref.size(), 0);
    if (augment(p)) ++c.matched;
  }
  return c;
}

std::vector<std::string> decode_words(const std::vector<std::size_t>& tokens, const Codebook& cb) {
  std::vector<std::string> words;
  for (std::size_t id : tokens) {
    if (id >= cb.size()) throw Error(ErrorKind::vocabulary, "token id " + std::to_string(id) + " out of range");
    if (cb.tokens[id] == kEndToken) continue;
    if (cb.is_word_initial[id] || words.empty())
      words.push_back(strip_marker(cb.tokens[id]));
    else
      words.back() += cb.tokens[id];
  }
  return words;
}

std::vector<std::string> construct_words(const std::vector<std::vector<std::size_t>>& ranked, std::size_t k,
                                         const Codebook& cb, const std::set<std::string>& lexicon,
                                         std::size_t run_cap) {
  if (k == 0) throw Error(ErrorKind::parameter, "keyword K must be positive");
  for (const auto& list : ranked) {
    if (list.empty()) throw Error(ErrorKind::contract, "position without candidates");
    for (std::size_t id : list)
      if (id >= cb.size()) throw Error(ErrorKind::vocabulary, "token id " + std::to_string(id) + " out of range");
  }
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < ranked.size()) {
    std::size_t end = start + 1;
    while (end < ranked.size() && !cb.is_word_initial[ranked[end][0]]) ++end;
    const std::size_t len = end - start;
    std::set<std::string> found;
    if (len <= run_cap) {
      // Odometer over one choice per position.
      std::vector<std::size_t> pick(len, 0);
      for (;;) {
        bool ok = cb.is_word_initial[ranked[start][pick[0]]];
        std::string s;
        for (std::size_t i = 0; ok && i < len; ++i) {
          std::size_t id = ranked[start + i][pick[i]];
          if (i > 0 && cb.is_word_initial[id]) ok = false;
          s += strip_marker(cb.tokens[id]);
        }
        if (ok && lexicon.count(s)) found.insert(s);
        std::size_t i = 0;
        for (; i < len; ++i) {
          if (++pick[i] < std::min(k, ranked[start + i].size())) break;
          pick[i] = 0;
        }
        if (i == len) break;
      }
    } else if (cb.is_word_initial[ranked[start][0]]) {
      std::string s;
      for (std::size_t i = start; i < end; ++i) s += strip_marker(cb.tokens[ranked[i][0]]);
      if (lexicon.count(s)) found.insert(s);
    }
    out.insert(out.end(), found.begin(), found.end());
    start = end;
  }
  return out;
}

std::optional<MatchCounts> keyword_counts_word(const std::vector<std::string>& predicted,
                                               const std::vector<std::string>& reference, bool stop_filter,
                                               const std::set<std::string>& stop_words) {
  auto keep = [&](const std::string& w) { return !stop_filter || !stop_words.count(w); };
  std::map<std::string, std::size_t> ref, pred;
  MatchCounts c;
  for (const auto& w : reference)
    if (keep(w)) ++ref[w], ++c.reference;
  if (c.reference == 0) return std::nullopt;
  for (const auto& w : predicted)
    if (keep(w)) ++pred[w], ++c.predicted;
  for (const auto& [w, n] : pred) {
    auto it = ref.find(w);
    if (it != ref.end()) c.matched += std::min(n, it->second);
  }
  return c;
}

RetrievalReport retrieval_recall_from_scores(const std::vector<double>& scores, std::size_t n_audio,
                                             std::size_t n_image, const std::vector<std::size_t>& truth,
                                             const std::vector<std::size_t>& ks) {
  if (scores.size() != n_audio * n_image || truth.size() != n_audio)
    throw Error(ErrorKind::dimension, "retrieval scores do not match query counts");
  if (n_audio == 0 || n_image == 0) throw Error(ErrorKind::size, "retrieval needs at least one query");
  for (std::size_t t : truth)
    if (t >= n_image) throw Error(ErrorKind::contract, "retrieval truth index out of range");
  for (double s : scores)
    if (!std::isfinite(s)) throw Error(ErrorKind::numeric, "non-finite retrieval score");

  RetrievalReport r;
  r.ks = ks;
  r.speech_to_image.assign(ks.size(), 0.0);
  r.image_to_speech.assign(ks.size(), 0.0);

  // Rank of the true image for each audio query.
  for (std::size_t a = 0; a < n_audio; ++a) {
    const double* row = &scores[a * n_image];
    std::size_t rank = 0;
    for (std::size_t i = 0; i < n_image; ++i)
      if (row[i] > row[truth[a]] || (row[i] == row[truth[a]] && i < truth[a])) ++rank;
    for (std::size_t j = 0; j < ks.size(); ++j)
      if (rank < ks[j]) r.speech_to_image[j] += 1.0;
  }

  std::size_t queried = 0;
  std::vector<std::size_t> order(n_audio);
  for (std::size_t i = 0; i < n_image; ++i) {
    bool has = std::find(truth.begin(), truth.end(), i) != truth.end();
    if (!has) continue;
    ++queried;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return scores[x * n_image + i] > scores[y * n_image + i];
    });
    std::size_t best = n_audio;
    for (std::size_t p = 0; p < n_audio; ++p)
      if (truth[order[p]] == i) {
        best = p;
        break;
      }
    for (std::size_t j = 0; j < ks.size(); ++j)
      if (best < ks[j]) r.image_to_speech[j] += 1.0;
  }
  for (auto& v : r.speech_to_image) v /= static_cast<double>(n_audio);
  for (auto& v : r.image_to_speech) v /= static_cast<double>(queried);
  return r;
}

RetrievalReport retrieval_recall(const Tensor& audio, const Tensor& image, const std::vector<std::size_t>& truth,
                                 const std::vector<std::size_t>& ks) {
  if (audio.rank() != 2 || image.rank() != 2 || audio.dim(1) != image.dim(1))
    throw Error(ErrorKind::dimension, "retrieval embeddings must be [N, d] with matching d");
  const std::size_t na = audio.dim(0), ni = image.dim(0), d = audio.dim(1);
  auto unit = [d](std::span<const double> x, std::size_t n) {
    std::vector<double> u(x.begin(), x.end());
    for (std::size_t r = 0; r < n; ++r) {
      double ss = 0.0;
      for (std::size_t c = 0; c < d; ++c) ss += u[r * d + c] * u[r * d + c];
      if (ss == 0.0) throw Error(ErrorKind::numeric, "zero embedding in retrieval");
      const double inv = 1.0 / std::sqrt(ss);
      for (std::size_t c = 0; c < d; ++c) u[r * d + c] *= inv;
    }
    return u;
  };
  const auto ua = unit(audio.data(), na), ui = unit(image.data(), ni);
  std::vector<double> scores(na * ni);
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t i = 0; i < ni; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += ua[a * d + c] * ui[i * d + c];
      scores[a * ni + i] = s;
    }
  return retrieval_recall_from_scores(scores, na, ni, truth, ks);
}

MatchCounts boundary_counts(const std::vector<std::size_t>& fires, const std::vector<std::size_t>& true_ends,
                            std::size_t tolerance) {
  std::vector<std::size_t> p(fires), t(true_ends);
  std::sort(p.begin(), p.end());
  std::sort(t.begin(), t.end());
  MatchCounts c;
  c.predicted = p.size();
  c.reference = t.size();
  // Greedy two-pointer matching is optimal for tolerance windows on a line.
  std::size_t i = 0, j = 0;
  while (i < p.size() && j < t.size()) {
    const std::size_t gap = p[i] > t[j] ? p[i] - t[j] : t[j] - p[i];
    if (gap <= tolerance) {
      ++c.matched, ++i, ++j;
    } else if (p[i] < t[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return c;
}

std::string format_keyword_table(const std::string& title, const std::vector<KeywordRow>& rows) {
  std::string s = title + "\n";
  s += "  K  stop-filter  recall   precision  F1       matched  predicted  reference  excluded\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%3zu  %-11s  %6.2f%%  %8.2f%%  %6.2f%%  %7zu  %9zu  %9zu  %8zu\n", r.k,
                  r.stop_filtered ? "yes" : "no", 100.0 * r.scores.recall, 100.0 * r.scores.precision,
                  100.0 * r.scores.f1, r.counts.matched, r.counts.predicted, r.counts.reference, r.excluded);
    s += buf;
  }
  return s;
}

std::string keyword_rows_jsonl(const std::string& label, const std::vector<KeywordRow>& rows) {
  std::string s;
  for (const auto& r : rows) {
    char buf[400];
    std::snprintf(buf, sizeof buf,
                  "{\"label\":\"%s\",\"k\":%zu,\"stop_filtered\":%s,\"recall\":%.17g,\"precision\":%.17g,"
                  "\"f1\":%.17g,\"matched\":%zu,\"predicted\":%zu,\"reference\":%zu,\"excluded\":%zu}\n",
                  label.c_str(), r.k, r.stop_filtered ? "true" : "false", r.scores.recall, r.scores.precision,
                  r.scores.f1, r.counts.matched, r.counts.predicted, r.counts.reference, r.excluded);
    s += buf;
  }
  return s;
}

std::string format_retrieval_table(const std::string& title, const RetrievalReport& r) {
  std::string s = title + "\n  direction     ";
  for (std::size_t k : r.ks) s += "R@" + std::to_string(k) + (k < 10 ? "     " : "    ");
  s += "\n  speech->image ";
  for (double v : r.speech_to_image) s += fmt("%6.2f%% ", 100.0 * v);
  s += "\n  image->speech ";
  for (double v : r.image_to_speech) s += fmt("%6.2f%% ", 100.0 * v);
  return s + "\n";
}

std::string retrieval_jsonl(const std::string& label, const RetrievalReport& r) {
  std::string s;
  const char* dirs[] = {"speech_to_image", "image_to_speech"};
  for (int d = 0; d < 2; ++d) {
    const auto& v = d == 0 ? r.speech_to_image : r.image_to_speech;
    s += "{\"label\":\"" + label + "\",\"direction\":\"" + dirs[d] + "\"";
    for (std::size_t j = 0; j < r.ks.size(); ++j) s += ",\"R@" + std::to_string(r.ks[j]) + "\":" + fmt("%.17g", v[j]);
    s += "}\n";
  }
  return s;
}

}  // namespace cifclip
