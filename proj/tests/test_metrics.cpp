// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "mixspeech/metrics.hpp"
#include "mixspeech/rng.hpp"

using namespace mixspeech;
using Catch::Approx;

namespace {

// Independent brute-force edit-distance oracle (full-matrix DP, distance only).
size_t edit_distance_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<size_t>> d(a.size() + 1, std::vector<size_t>(b.size() + 1, 0));
  for (size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j) {
      size_t best = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      best = std::min(best, d[i - 1][j] + 1);
      best = std::min(best, d[i][j - 1] + 1);
      d[i][j] = best;
    }
  return d[a.size()][b.size()];
}

std::vector<int> random_tokens(Rng& rng, int min_len, int max_len, int vocab) {
  std::vector<int> out(static_cast<size_t>(rng.uniform_int(min_len, max_len)));
  for (auto& t : out) t = static_cast<int>(rng.uniform_int(0, vocab - 1));
  return out;
}

}  // namespace

TEST_CASE("wer of identical sequences is zero", "[metrics]") {
  auto [value, counts] = wer({1, 2, 3}, {1, 2, 3});
  REQUIRE(value == 0.0);
  REQUIRE(counts.substitutions == 0);
  REQUIRE(counts.deletions == 0);
  REQUIRE(counts.insertions == 0);
  REQUIRE(counts.ref_len == 3);
}

TEST_CASE("wer hand case: one substitution plus one deletion", "[metrics]") {
  // ref "a b c d", hyp "a x c"
  auto [value, counts] = wer({0, 1, 2, 3}, {0, 9, 2});
  REQUIRE(counts.substitutions == 1);
  REQUIRE(counts.deletions == 1);
  REQUIRE(counts.insertions == 0);
  REQUIRE(value == Approx(0.5));
}

TEST_CASE("wer can exceed one on insertion-heavy hypotheses", "[metrics]") {
  auto [value, counts] = wer({7}, {7, 8, 9});
  REQUIRE(counts.insertions == 2);
  REQUIRE(value == Approx(2.0));
}

TEST_CASE("wer rejects an empty reference", "[metrics]") {
  REQUIRE_THROWS_AS(wer({}, {1}), Error);
}

TEST_CASE("wer equals the brute-force edit distance on 1000 random pairs", "[metrics]") {
  Rng rng(2024);
  for (int round = 0; round < 1000; ++round) {
    const auto ref = random_tokens(rng, 1, 30, 8);
    const auto hyp = random_tokens(rng, 0, 30, 8);
    auto [value, counts] = wer(ref, hyp);
    REQUIRE(counts.edits() == edit_distance_oracle(ref, hyp));
    REQUIRE(counts.matches() + counts.substitutions + counts.deletions == counts.ref_len);
  }
}

TEST_CASE("bleu of identical corpora is exactly 100", "[metrics]") {
  std::vector<std::vector<int>> refs{{1, 2, 3, 4, 5}, {9, 8, 7, 6}};
  REQUIRE(corpus_bleu(refs, refs) == 100.0);
}

TEST_CASE("bleu of empty hypotheses is zero", "[metrics]") {
  std::vector<std::vector<int>> refs{{1, 2, 3, 4}};
  std::vector<std::vector<int>> hyps{{}};
  REQUIRE(corpus_bleu(refs, hyps) == 0.0);
}

TEST_CASE("bleu hand-counted clipping example", "[metrics]") {
  // ref "the cat sat on the mat", hyp "the cat the cat sat"
  // tokens: the=0 cat=1 sat=2 on=3 mat=4
  std::vector<int> ref{0, 1, 2, 3, 0, 4};
  std::vector<int> hyp{0, 1, 0, 1, 2};
  BleuStats stats = bleu_sentence_stats(ref, hyp);
  REQUIRE(stats.matched[0] == 4);
  REQUIRE(stats.total[0] == 5);
  REQUIRE(stats.matched[1] == 2);
  REQUIRE(stats.total[1] == 4);
  REQUIRE(stats.matched[2] == 1);
  REQUIRE(stats.total[2] == 3);
  REQUIRE(stats.matched[3] == 0);
  REQUIRE(stats.total[3] == 2);
  REQUIRE(corpus_bleu({ref}, {hyp}) == 0.0);  // zero 4-gram matches, unsmoothed
}

TEST_CASE("bleu brevity penalty applies when hypotheses are short", "[metrics]") {
  std::vector<int> ref{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> hyp{1, 2, 3, 4};  // perfect prefix, half length
  const double expected = 100.0 * std::exp(1.0 - 8.0 / 4.0);
  REQUIRE(corpus_bleu({ref}, {hyp}) == Approx(expected).epsilon(1e-12));
}

TEST_CASE("bleu is invariant under sentence permutation and bounded by 100", "[metrics]") {
  Rng rng(55);
  std::vector<std::vector<int>> refs, hyps;
  for (int i = 0; i < 20; ++i) {
    refs.push_back(random_tokens(rng, 4, 12, 6));
    auto hyp = refs.back();
    for (auto& t : hyp)
      if (rng.uniform01() < 0.2) t = static_cast<int>(rng.uniform_int(0, 5));
    hyps.push_back(hyp);
  }
  const double forward = corpus_bleu(refs, hyps);
  REQUIRE(forward <= 100.0);
  std::vector<std::vector<int>> refs_r(refs.rbegin(), refs.rend());
  std::vector<std::vector<int>> hyps_r(hyps.rbegin(), hyps.rend());
  REQUIRE(corpus_bleu(refs_r, hyps_r) == Approx(forward).epsilon(1e-12));
}

TEST_CASE("bleu rejects mismatched list lengths", "[metrics]") {
  REQUIRE_THROWS_AS(corpus_bleu({{1}}, {{1}, {2}}), Error);
}
