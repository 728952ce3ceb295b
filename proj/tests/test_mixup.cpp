// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mixspeech/mixup.hpp"
#include "mixspeech/rng.hpp"

using namespace mixspeech;
using Catch::Approx;

namespace {

Tensor random_stream(uint64_t seed, size_t t, size_t d) {
  Rng rng(seed);
  Tensor s = Tensor::zeros({t, d});
  for (auto& v : *s.data) v = rng.normal() + 2.0;  // bounded away from zero
  return s;
}

}  // namespace

TEST_CASE("concat_unimodal puts audio first and visual last", "[mixup]") {
  Tensor frame = Tensor::from({1, 2}, {1, 2});
  Tensor audio = concat_unimodal(frame, Modality::Audio);
  REQUIRE(audio.values() == std::vector<double>{1, 2, 0, 0});
  Tensor visual = concat_unimodal(frame, Modality::Visual);
  REQUIRE(visual.values() == std::vector<double>{0, 0, 1, 2});
}

TEST_CASE("concat_unimodal zero block is exactly zero", "[mixup]") {
  Tensor stream = random_stream(5, 7, 4);
  Tensor out = concat_unimodal(stream, Modality::Visual);
  for (size_t i = 0; i < 7; ++i)
    for (size_t j = 0; j < 4; ++j) REQUIRE(out.at(i, j) == 0.0);
}

TEST_CASE("mix boundaries are exact", "[mixup]") {
  Tensor audio = random_stream(1, 9, 3);
  Tensor visual = random_stream(2, 9, 3);
  auto all_visual = mix_streams(audio, visual, 0.0, 77);
  REQUIRE(*all_visual.frames.data == *concat_unimodal(visual, Modality::Visual).data);
  for (auto m : all_visual.audio_mask) REQUIRE(m == 0);
  auto all_audio = mix_streams(audio, visual, 1.0, 77);
  REQUIRE(*all_audio.frames.data == *concat_unimodal(audio, Modality::Audio).data);
  for (auto m : all_audio.audio_mask) REQUIRE(m == 1);
}

TEST_CASE("mixing fraction obeys the binomial bound at T=10^4", "[mixup]") {
  Tensor audio = random_stream(3, 10000, 2);
  Tensor visual = random_stream(4, 10000, 2);
  for (double phi : {0.1, 0.3, 0.5, 0.9}) {
    auto mixed = mix_streams(audio, visual, phi, 2026);
    size_t audio_frames = 0;
    for (auto m : mixed.audio_mask) audio_frames += m;
    const double fraction = static_cast<double>(audio_frames) / 10000.0;
    const double bound = 3.0 * std::sqrt(phi * (1.0 - phi) / 10000.0);
    INFO("phi " << phi << " fraction " << fraction);
    REQUIRE(std::fabs(fraction - phi) <= bound);
  }
}

TEST_CASE("every mixed frame is exactly one unimodal pattern", "[mixup]") {
  Tensor audio = random_stream(8, 500, 4);
  Tensor visual = random_stream(9, 500, 4);
  auto mixed = mix_streams(audio, visual, 0.4, 11);
  for (size_t i = 0; i < 500; ++i) {
    if (mixed.audio_mask[i]) {
      for (size_t j = 0; j < 4; ++j) {
        REQUIRE(mixed.frames.at(i, j) == audio.at(i, j));
        REQUIRE(mixed.frames.at(i, 4 + j) == 0.0);
      }
    } else {
      for (size_t j = 0; j < 4; ++j) {
        REQUIRE(mixed.frames.at(i, j) == 0.0);
        REQUIRE(mixed.frames.at(i, 4 + j) == visual.at(i, j));
      }
    }
  }
}

TEST_CASE("mixing is deterministic in the seed and checks shapes", "[mixup]") {
  Tensor audio = random_stream(1, 20, 3);
  Tensor visual = random_stream(2, 20, 3);
  auto a = mix_streams(audio, visual, 0.5, 42);
  auto b = mix_streams(audio, visual, 0.5, 42);
  REQUIRE(*a.frames.data == *b.frames.data);
  REQUIRE(a.audio_mask == b.audio_mask);
  Tensor bad = random_stream(3, 21, 3);
  REQUIRE_THROWS_AS(mix_streams(audio, bad, 0.5, 1), Error);
}

TEST_CASE("literal orientation flips the selection", "[mixup]") {
  Tensor audio = random_stream(1, 100, 2);
  Tensor visual = random_stream(2, 100, 2);
  auto flipped = mix_streams(audio, visual, 0.0, 5, PhiOrientation::VisualProbability);
  for (auto m : flipped.audio_mask) REQUIRE(m == 1);  // phi=0 selects audio always
}

TEST_CASE("uncertainty of one-hot rows is zero", "[mixup]") {
  Tensor probs = Tensor::from({2, 4}, {1, 0, 0, 0, 0, 0, 1, 0});
  REQUIRE(uncertainty(probs) == 0.0);
}

TEST_CASE("uncertainty of uniform rows is ln V", "[mixup]") {
  Tensor probs = Tensor::from({3, 4}, std::vector<double>(12, 0.25));
  REQUIRE(uncertainty(probs) == Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("uncertainty of mixed one-hot and uniform rows", "[mixup]") {
  Tensor probs = Tensor::from({2, 4}, {1, 0, 0, 0, 0.25, 0.25, 0.25, 0.25});
  REQUIRE(uncertainty(probs) == Approx(0.5 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("uncertainty rejects non-stochastic rows", "[mixup]") {
  Tensor probs = Tensor::from({1, 2}, {0.7, 0.7});
  REQUIRE_THROWS_AS(uncertainty(probs), Error);
  Tensor negative = Tensor::from({1, 2}, {1.5, -0.5});
  REQUIRE_THROWS_AS(uncertainty(negative), Error);
}

TEST_CASE("uncertainty is permutation invariant and at most ln V", "[mixup]") {
  Rng rng(12);
  Tensor probs = Tensor::zeros({6, 5});
  for (size_t t = 0; t < 6; ++t) {
    double sum = 0.0;
    for (size_t j = 0; j < 5; ++j) {
      probs.at(t, j) = -std::log(rng.uniform01() + 1e-12);
      sum += probs.at(t, j);
    }
    for (size_t j = 0; j < 5; ++j) probs.at(t, j) /= sum;
  }
  const double base = uncertainty(probs);
  REQUIRE(base <= std::log(5.0) + 1e-12);
  Tensor permuted = Tensor::zeros({6, 5});
  const size_t perm[5] = {3, 0, 4, 1, 2};
  for (size_t t = 0; t < 6; ++t)
    for (size_t j = 0; j < 5; ++j) permuted.at(t, perm[j]) = probs.at(t, j);
  REQUIRE(uncertainty(permuted) == Approx(base).epsilon(1e-12));
}

TEST_CASE("uncertainty excludes PAD rows via the keep mask", "[mixup]") {
  Tensor probs = Tensor::from({2, 4}, {1, 0, 0, 0, 0.25, 0.25, 0.25, 0.25});
  REQUIRE(uncertainty(probs, {1, 0}) == 0.0);
  REQUIRE(uncertainty(probs, {0, 1}) == Approx(std::log(4.0)));
}

TEST_CASE("scheduler trigger arithmetic at k=0.05", "[scheduler]") {
  MixState state;
  UncertaintyReading reading{1.0, 0.96};  // gap 0.04 < 0.05 -> trigger
  MixState next = scheduler_update(reading, state);
  REQUIRE(next.streak == 1);
  REQUIRE(next.phi == state.phi);

  UncertaintyReading no_trigger{1.0, 0.90};  // gap 0.10 >= 0.05
  MixState reset = scheduler_update(no_trigger, next);
  REQUIRE(reset.streak == 0);
  REQUIRE(reset.phi == state.phi);
}

TEST_CASE("twenty consecutive triggers raise phi from 0.1 to 0.12", "[scheduler]") {
  MixState state;
  UncertaintyReading reading{1.0, 0.99};
  for (int i = 0; i < 19; ++i) {
    state = scheduler_update(reading, state);
    REQUIRE(state.streak == i + 1);
    REQUIRE(state.phi == Approx(0.1));
  }
  state = scheduler_update(reading, state);
  REQUIRE(state.streak == 0);
  REQUIRE(state.phi == Approx(0.12).epsilon(1e-12));
}

TEST_CASE("phi clamps at phi_max", "[scheduler]") {
  MixState state;
  state.phi = 0.85;
  state.streak = 19;
  MixState next = scheduler_update({1.0, 1.0}, state);
  REQUIRE(next.phi == Approx(0.9));
  REQUIRE(next.streak == 0);
}

TEST_CASE("scheduler is a pure function", "[scheduler]") {
  MixState state;
  state.streak = 7;
  const UncertaintyReading reading{0.8, 0.79};
  MixState a = scheduler_update(reading, state);
  MixState b = scheduler_update(reading, state);
  REQUIRE(a.phi == b.phi);
  REQUIRE(a.streak == b.streak);
  REQUIRE(state.streak == 7);  // input untouched
}

TEST_CASE("phi never leaves its bounds over a long random run", "[scheduler]") {
  Rng rng(1);
  MixState state;
  double prev_phi = state.phi;
  for (int step = 0; step < 5000; ++step) {
    const double u_uni = rng.uniform01() + 0.5;
    const double u_mix = u_uni * (0.9 + 0.2 * rng.uniform01());
    state = scheduler_update({u_uni, u_mix}, state);
    REQUIRE(state.phi >= 0.1);
    REQUIRE(state.phi <= 0.9);
    REQUIRE(state.phi >= prev_phi);  // non-decreasing
    REQUIRE(state.streak <= state.n);
    prev_phi = state.phi;
  }
}
