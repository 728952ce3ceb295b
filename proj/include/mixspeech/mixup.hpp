// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Modality-missing concatenation, frame-level stream mixing, prediction
// uncertainty, and the curriculum scheduler that raises the audio share of
// mixed speech when mixed speech stops being sufficiently more confident than
// the uni-modal stream.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mixspeech/rng.hpp"
#include "mixspeech/tensor.hpp"

namespace mixspeech {

enum class Modality { Audio, Visual };

// Layout of the fused 2D-wide frame: audio occupies the first D slots, visual
// the last D; the missing half is exactly zero.
inline Tensor concat_unimodal(const Tensor& stream, Modality modality) {
  expect(stream.shape.size() == 2, Errc::ShapeMismatch,
         "concat_unimodal: expected a T x D stream, got " + shape_str(stream.shape));
  const size_t t = stream.rows(), d = stream.cols();
  Tensor out = Tensor::zeros({t, 2 * d});
  const size_t offset = modality == Modality::Audio ? 0 : d;
  for (size_t i = 0; i < t; ++i)
    for (size_t j = 0; j < d; ++j) out.at(i, offset + j) = stream.at(i, j);
  return out;
}

// Interpretation of the mixing ratio phi. The scheduler multiplies phi upward
// to "increase the proportion of audio", which is only self-consistent when
// phi is the audio-selection probability; that is the default. The literal
// orientation (phi selects visual) is kept behind a flag for comparison runs.
enum class PhiOrientation { AudioProbability, VisualProbability };

struct MixedStream {
  Tensor frames;  // T x 2D, each frame exactly one of the two unimodal patterns
  std::vector<uint8_t> audio_mask;  // 1 where the frame came from the audio stream
};

inline MixedStream mix_streams(const Tensor& audio, const Tensor& visual, double phi,
                               uint64_t seed,
                               PhiOrientation orientation = PhiOrientation::AudioProbability) {
  expect(audio.shape == visual.shape && audio.shape.size() == 2, Errc::ShapeMismatch,
         "mix_streams: streams must be synchronous T x D, got " + shape_str(audio.shape) +
             " vs " + shape_str(visual.shape));
  expect(phi >= 0.0 && phi <= 1.0, Errc::InvalidArgument,
         "mix_streams: phi must lie in [0,1]");
  const size_t t = audio.rows(), d = audio.cols();
  MixedStream mixed;
  mixed.frames = Tensor::zeros({t, 2 * d});
  mixed.audio_mask.resize(t);
  Rng rng(derive_seed({seed, stream::kMixDraws}));
  for (size_t i = 0; i < t; ++i) {
    const double p = rng.uniform01();
    const bool from_audio =
        orientation == PhiOrientation::AudioProbability ? p < phi : p >= phi;
    mixed.audio_mask[i] = from_audio ? 1 : 0;
    if (from_audio)
      for (size_t j = 0; j < d; ++j) mixed.frames.at(i, j) = audio.at(i, j);
    else
      for (size_t j = 0; j < d; ++j) mixed.frames.at(i, d + j) = visual.at(i, j);
  }
  return mixed;
}

// Mean per-step Shannon entropy (nats) of a row-stochastic matrix. Rows where
// keep[t] == 0 are excluded (PAD steps). A pure measurement: no tape involved.
inline double uncertainty(const Tensor& probs, const std::vector<uint8_t>& keep = {}) {
  expect(probs.shape.size() == 2, Errc::ShapeMismatch,
         "uncertainty: expected an S x V matrix, got " + shape_str(probs.shape));
  expect(keep.empty() || keep.size() == probs.rows(), Errc::ShapeMismatch,
         "uncertainty: keep mask length must equal the row count");
  const size_t s = probs.rows(), v = probs.cols();
  double total = 0.0;
  size_t counted = 0;
  for (size_t t = 0; t < s; ++t) {
    if (!keep.empty() && !keep[t]) continue;
    double sum = 0.0, h = 0.0;
    for (size_t j = 0; j < v; ++j) {
      const double p = probs.at(t, j);
      expect(p >= 0.0, Errc::InvalidArgument,
             "uncertainty: negative probability in row " + std::to_string(t));
      sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    expect(std::fabs(sum - 1.0) <= 1e-6, Errc::InvalidArgument,
           "uncertainty: row " + std::to_string(t) + " is not stochastic (sum " +
               std::to_string(sum) + ")");
    total += h;
    ++counted;
  }
  expect(counted > 0, Errc::InvalidArgument, "uncertainty: no rows to measure");
  return total / static_cast<double>(counted);
}

struct UncertaintyReading {
  double u_uni = 0.0;  // uni-modal (visual) branch
  double u_mix = 0.0;  // mixed branch
};

// Curriculum state. phi stays inside [phi_min, phi_max] for the whole run and
// only ever grows, by the factor alpha, after n consecutive trigger steps.
struct MixState {
  double phi = 0.1;
  int streak = 0;
  double alpha = 1.2;
  double k = 0.05;
  int n = 20;
  double phi_min = 0.1;
  double phi_max = 0.9;
};

// Trigger: the confidence gap u_uni - u_mix has shrunk below k * u_uni, i.e.
// mixed speech is no longer much more certain than the uni-modal stream. After
// n consecutive triggers phi grows by alpha and the streak resets; a
// non-trigger step resets the streak. Pure function of (reading, state).
inline MixState scheduler_update(const UncertaintyReading& reading, const MixState& state) {
  expect(std::isfinite(reading.u_uni) && std::isfinite(reading.u_mix) && reading.u_uni >= 0.0 &&
             reading.u_mix >= 0.0,
         Errc::InvalidArgument, "scheduler_update: uncertainties must be finite and non-negative");
  MixState next = state;
  const bool trigger = (reading.u_uni - reading.u_mix) < state.k * reading.u_uni;
  if (!trigger) {
    next.streak = 0;
    return next;
  }
  next.streak = state.streak + 1;
  if (next.streak >= state.n) {
    next.phi = std::min(state.phi_max, state.alpha * state.phi);
    next.phi = std::max(next.phi, state.phi_min);
    next.streak = 0;
  }
  return next;
}

}  // namespace mixspeech
