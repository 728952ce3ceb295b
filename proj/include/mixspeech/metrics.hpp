// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Word error rate over a minimal edit alignment and corpus-level BLEU
// (orders 1-4, uniform weights, brevity penalty, single reference, no
// smoothing). Both operate on integer token ids.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "mixspeech/common.hpp"

namespace mixspeech {

struct AlignmentCounts {
  size_t substitutions = 0;
  size_t deletions = 0;
  size_t insertions = 0;
  size_t ref_len = 0;

  size_t matches() const { return ref_len - substitutions - deletions; }
  size_t edits() const { return substitutions + deletions + insertions; }

  AlignmentCounts& operator+=(const AlignmentCounts& o) {
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    ref_len += o.ref_len;
    return *this;
  }
};

inline double wer_value(const AlignmentCounts& c) {
  expect(c.ref_len > 0, Errc::InvalidArgument, "wer: empty reference");
  return static_cast<double>(c.edits()) / static_cast<double>(c.ref_len);
}

// Minimal-cost alignment with unit substitution/deletion/insertion costs.
// Among minimal alignments the backtrace prefers substitution (diagonal) over
// insertion over deletion, which makes the counts deterministic; the WER value
// itself does not depend on the tie-break.
inline std::pair<double, AlignmentCounts> wer(const std::vector<int>& ref,
                                              const std::vector<int>& hyp) {
  expect(!ref.empty(), Errc::InvalidArgument, "wer: empty reference");
  const size_t m = ref.size(), n = hyp.size();
  std::vector<size_t> d((m + 1) * (n + 1));
  auto cell = [&](size_t i, size_t j) -> size_t& { return d[i * (n + 1) + j]; };
  for (size_t i = 0; i <= m; ++i) cell(i, 0) = i;
  for (size_t j = 0; j <= n; ++j) cell(0, j) = j;
  for (size_t i = 1; i <= m; ++i) {
    for (size_t j = 1; j <= n; ++j) {
      const size_t diag = cell(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const size_t ins = cell(i, j - 1) + 1;
      const size_t del = cell(i - 1, j) + 1;
      cell(i, j) = std::min({diag, ins, del});
    }
  }
  AlignmentCounts counts;
  counts.ref_len = m;
  size_t i = m, j = n;
  while (i > 0 || j > 0) {
    const size_t here = cell(i, j);
    if (i > 0 && j > 0 && here == cell(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++counts.substitutions;
      --i;
      --j;
    } else if (j > 0 && here == cell(i, j - 1) + 1) {
      ++counts.insertions;
      --j;
    } else {
      ++counts.deletions;
      --i;
    }
  }
  return {wer_value(counts), counts};
}

// Clipped n-gram statistics for one sentence pair; additive across sentences.
struct BleuStats {
  std::array<size_t, 4> matched{};  // clipped matches per order
  std::array<size_t, 4> total{};    // hypothesis n-gram counts per order
  size_t hyp_len = 0;
  size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (size_t k = 0; k < 4; ++k) {
      matched[k] += o.matched[k];
      total[k] += o.total[k];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

inline BleuStats bleu_sentence_stats(const std::vector<int>& ref, const std::vector<int>& hyp) {
  BleuStats stats;
  stats.hyp_len = hyp.size();
  stats.ref_len = ref.size();
  for (size_t order = 1; order <= 4; ++order) {
    if (hyp.size() < order) break;
    std::map<std::vector<int>, size_t> ref_counts;
    if (ref.size() >= order)
      for (size_t i = 0; i + order <= ref.size(); ++i)
        ++ref_counts[std::vector<int>(ref.begin() + static_cast<long>(i),
                                      ref.begin() + static_cast<long>(i + order))];
    std::map<std::vector<int>, size_t> hyp_counts;
    for (size_t i = 0; i + order <= hyp.size(); ++i)
      ++hyp_counts[std::vector<int>(hyp.begin() + static_cast<long>(i),
                                    hyp.begin() + static_cast<long>(i + order))];
    for (const auto& [gram, count] : hyp_counts) {
      stats.total[order - 1] += count;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) stats.matched[order - 1] += std::min(count, it->second);
    }
  }
  return stats;
}

// Geometric mean of the four clipped precisions times the brevity penalty,
// scaled to [0,100]. Any order with zero matches gives 0 (unsmoothed).
inline double bleu_from_stats(const BleuStats& stats) {
  if (stats.hyp_len == 0) return 0.0;
  double log_precision = 0.0;
  for (size_t k = 0; k < 4; ++k) {
    if (stats.matched[k] == 0 || stats.total[k] == 0) return 0.0;
    log_precision +=
        std::log(static_cast<double>(stats.matched[k]) / static_cast<double>(stats.total[k]));
  }
  double bp = 1.0;
  if (stats.hyp_len < stats.ref_len)
    bp = std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));
  return 100.0 * bp * std::exp(log_precision / 4.0);
}

inline double corpus_bleu(const std::vector<std::vector<int>>& refs,
                          const std::vector<std::vector<int>>& hyps) {
  expect(refs.size() == hyps.size(), Errc::InvalidArgument,
         "corpus_bleu: reference and hypothesis counts differ");
  expect(!refs.empty(), Errc::InvalidArgument, "corpus_bleu: empty corpus");
  BleuStats stats;
  for (size_t i = 0; i < refs.size(); ++i) stats += bleu_sentence_stats(refs[i], hyps[i]);
  return bleu_from_stats(stats);
}

}  // namespace mixspeech
