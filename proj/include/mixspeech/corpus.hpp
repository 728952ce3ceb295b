// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired audio/visual corpus with a controllable discriminability
// gap. Audio frames are noisy lookups into a per-phoneme codebook; visual
// frames are noisier lookups into a smaller per-viseme codebook, so several
// phonemes collapse onto the same visual pattern. Targets come from a
// deterministic token-level translation with local reordering.
#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mixspeech/config.hpp"
#include "mixspeech/rng.hpp"
#include "mixspeech/tensor.hpp"

namespace mixspeech {

constexpr int kBos = 0;
constexpr int kEos = 1;
constexpr int kPad = 2;
constexpr int kNumReserved = 3;

constexpr double kCleanSnrDb = std::numeric_limits<double>::infinity();

struct CorpusSpec {
  int n_phonemes = 40;
  int n_visemes = 12;
  int tgt_vocab = 60;  // includes the reserved BOS/EOS/PAD ids 0/1/2
  int frames_per_token = 3;
  int feature_dim = 16;
  double sigma_audio = 0.1;
  double sigma_visual = 0.5;
  int len_min = 4;
  int len_max = 16;
  int n_train = 2000;
  int n_valid = 200;
  int n_test = 200;
  uint64_t master_seed = 1;

  int src_vocab() const { return n_phonemes; }

  void validate() const {
    expect(n_phonemes >= 1, Errc::Validation, "corpus spec: n_phonemes must be positive");
    expect(n_visemes >= 1 && n_visemes <= n_phonemes, Errc::Validation,
           "corpus spec: requires n_visemes <= n_phonemes (many-to-one viseme ambiguity)");
    expect(sigma_visual > sigma_audio || n_visemes < n_phonemes, Errc::Validation,
           "corpus spec: needs a discriminability gap source "
           "(sigma_visual > sigma_audio or n_visemes < n_phonemes)");
    expect(feature_dim >= 2, Errc::Validation, "corpus spec: feature_dim must be >= 2");
    expect(frames_per_token >= 1, Errc::Validation, "corpus spec: frames_per_token must be >= 1");
    expect(tgt_vocab > kNumReserved, Errc::Validation,
           "corpus spec: tgt_vocab must exceed the reserved ids");
    expect(len_min >= 1 && len_max >= len_min, Errc::Validation,
           "corpus spec: invalid sentence length range");
    expect(n_train >= 0 && n_valid >= 0 && n_test >= 0, Errc::Validation,
           "corpus spec: negative split count");
    expect(sigma_audio >= 0.0 && sigma_visual >= 0.0, Errc::Validation,
           "corpus spec: negative noise sigma");
  }

  static CorpusSpec from_json(const json& j) {
    JsonReader r(j, "corpus spec");
    CorpusSpec s;
    s.n_phonemes = r.optional("n_phonemes", s.n_phonemes);
    s.n_visemes = r.optional("n_visemes", s.n_visemes);
    s.tgt_vocab = r.optional("tgt_vocab", s.tgt_vocab);
    s.frames_per_token = r.optional("frames_per_token", s.frames_per_token);
    s.feature_dim = r.optional("feature_dim", s.feature_dim);
    s.sigma_audio = r.optional("sigma_audio", s.sigma_audio);
    s.sigma_visual = r.optional("sigma_visual", s.sigma_visual);
    s.len_min = r.optional("len_min", s.len_min);
    s.len_max = r.optional("len_max", s.len_max);
    s.n_train = r.optional("n_train", s.n_train);
    s.n_valid = r.optional("n_valid", s.n_valid);
    s.n_test = r.optional("n_test", s.n_test);
    s.master_seed = r.optional("master_seed", s.master_seed);
    r.finish();
    s.validate();
    return s;
  }

  ordered_json to_json() const {
    return ordered_json{{"n_phonemes", n_phonemes},
                        {"n_visemes", n_visemes},
                        {"tgt_vocab", tgt_vocab},
                        {"frames_per_token", frames_per_token},
                        {"feature_dim", feature_dim},
                        {"sigma_audio", sigma_audio},
                        {"sigma_visual", sigma_visual},
                        {"len_min", len_min},
                        {"len_max", len_max},
                        {"n_train", n_train},
                        {"n_valid", n_valid},
                        {"n_test", n_test},
                        {"master_seed", master_seed}};
  }
};

struct Utterance {
  std::string id;
  Tensor audio;   // T x D
  Tensor visual;  // T x D, frame-synchronous with audio
  std::vector<int> src_tokens;
  std::vector<int> tgt_tokens;  // BOS ... EOS
};

// phoneme id -> viseme id, surjective with preimage sizes differing by <= 1.
using VisemeMap = std::vector<int>;

inline VisemeMap build_viseme_map(int n_phonemes, int n_visemes, uint64_t seed) {
  expect(n_visemes >= 1 && n_visemes <= n_phonemes, Errc::Validation,
         "build_viseme_map: requires 1 <= n_visemes <= n_phonemes");
  // Shuffle phonemes, then deal them round-robin onto visemes.
  std::vector<int> order(static_cast<size_t>(n_phonemes));
  for (int i = 0; i < n_phonemes; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed({seed, 0x715E3E}));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
  VisemeMap map(static_cast<size_t>(n_phonemes));
  for (int i = 0; i < n_phonemes; ++i)
    map[static_cast<size_t>(order[static_cast<size_t>(i)])] = i % n_visemes;
  return map;
}

// Deterministic token-level translation: affine remap into the target vocab,
// then adjacent-pair swap for a non-monotone alignment, then BOS/EOS framing.
inline std::vector<int> translate_tokens(const std::vector<int>& src, int n_phonemes,
                                         int tgt_vocab) {
  const int effective = tgt_vocab - kNumReserved;
  std::vector<int> out;
  out.reserve(src.size() + 2);
  out.push_back(kBos);
  for (int id : src) {
    expect(id >= 0 && id < n_phonemes, Errc::InvalidArgument,
           "translate_tokens: source id " + std::to_string(id) + " out of range [0," +
               std::to_string(n_phonemes) + ")");
    out.push_back(kNumReserved + (7 * id) % effective);
  }
  for (size_t i = 1; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  out.push_back(kEos);
  return out;
}

struct Codebooks {
  Tensor audio;   // n_phonemes x D
  Tensor visual;  // n_visemes x D
};

// Codebooks are drawn once per corpus from the master seed.
inline Codebooks make_codebooks(const CorpusSpec& spec) {
  Codebooks cb;
  cb.audio = Tensor::zeros({static_cast<size_t>(spec.n_phonemes),
                            static_cast<size_t>(spec.feature_dim)});
  cb.visual = Tensor::zeros({static_cast<size_t>(spec.n_visemes),
                             static_cast<size_t>(spec.feature_dim)});
  Rng ra(derive_seed({spec.master_seed, stream::kCorpus, 1}));
  for (auto& v : *cb.audio.data) v = ra.normal();
  Rng rv(derive_seed({spec.master_seed, stream::kCorpus, 2}));
  for (auto& v : *cb.visual.data) v = rv.normal();
  return cb;
}

namespace detail {
// Features are persisted as 32-bit floats; quantize at synthesis time so the
// in-memory corpus and the on-disk corpus are identical.
inline double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
}  // namespace detail

inline Utterance synth_utterance(const CorpusSpec& spec, const VisemeMap& viseme_map,
                                 const Codebooks& codebooks, uint64_t utterance_seed,
                                 std::string id) {
  Rng rng(utterance_seed);
  const size_t d = static_cast<size_t>(spec.feature_dim);
  const size_t r = static_cast<size_t>(spec.frames_per_token);
  const size_t len = static_cast<size_t>(rng.uniform_int(spec.len_min, spec.len_max));

  Utterance utt;
  utt.id = std::move(id);
  utt.src_tokens.resize(len);
  for (auto& t : utt.src_tokens) t = static_cast<int>(rng.uniform_int(0, spec.n_phonemes - 1));
  utt.tgt_tokens = translate_tokens(utt.src_tokens, spec.n_phonemes, spec.tgt_vocab);

  const size_t frames = len * r;
  utt.audio = Tensor::zeros({frames, d});
  utt.visual = Tensor::zeros({frames, d});
  for (size_t tok = 0; tok < len; ++tok) {
    const size_t phoneme = static_cast<size_t>(utt.src_tokens[tok]);
    const size_t viseme = static_cast<size_t>(viseme_map[phoneme]);
    for (size_t rep = 0; rep < r; ++rep) {
      const size_t frame = tok * r + rep;
      for (size_t j = 0; j < d; ++j)
        utt.audio.at(frame, j) =
            detail::as_f32(codebooks.audio.at(phoneme, j) + spec.sigma_audio * rng.normal());
      for (size_t j = 0; j < d; ++j)
        utt.visual.at(frame, j) =
            detail::as_f32(codebooks.visual.at(viseme, j) + spec.sigma_visual * rng.normal());
    }
  }
  return utt;
}

// Additive Gaussian noise at a signal-to-noise ratio defined on feature power.
// snr_db = +inf (the "clean" sentinel) returns the input unchanged.
inline Tensor add_noise(const Tensor& audio, double snr_db, uint64_t seed) {
  expect(audio.size() > 0, Errc::InvalidArgument, "add_noise: empty input");
  if (std::isinf(snr_db) && snr_db > 0) return audio.detached();
  double power = 0.0;
  for (double v : *audio.data) power += v * v;
  power /= static_cast<double>(audio.size());
  expect(power > 0.0, Errc::InvalidArgument,
         "add_noise: all-zero input has undefined signal power");
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  Tensor out = audio.detached();
  Rng rng(derive_seed({seed, stream::kNoise}));
  for (auto& v : *out.data) v += sigma * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// Feature file format: magic "AVMS", u16 LE version (=1), u32 LE T, u32 LE D,
// then T*D little-endian IEEE-754 f32 values, row-major.
// ---------------------------------------------------------------------------

constexpr char kFeatureMagic[4] = {'A', 'V', 'M', 'S'};
constexpr uint16_t kFeatureVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  expect(out.good(), Errc::Io, "cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  expect(out.good(), Errc::Io, "short write: " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  expect(in.good(), Errc::Io, "cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace detail

inline void write_features(const std::filesystem::path& path, const Tensor& m) {
  expect(m.shape.size() == 2, Errc::ShapeMismatch,
         "write_features: expected a 2-d matrix, got " + shape_str(m.shape));
  std::string bytes;
  bytes.reserve(14 + m.size() * 4);
  bytes.append(kFeatureMagic, 4);
  detail::put_le<uint16_t>(bytes, kFeatureVersion);
  detail::put_le<uint32_t>(bytes, static_cast<uint32_t>(m.rows()));
  detail::put_le<uint32_t>(bytes, static_cast<uint32_t>(m.cols()));
  for (double v : *m.data) {
    const float f = static_cast<float>(v);
    uint32_t u;
    std::memcpy(&u, &f, 4);
    detail::put_le<uint32_t>(bytes, u);
  }
  detail::write_file_bytes(path, bytes);
}

inline Tensor read_features(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  expect(bytes.size() >= 14, Errc::Truncated, "feature file truncated header: " + path.string());
  expect(std::memcmp(bytes.data(), kFeatureMagic, 4) == 0, Errc::BadMagic,
         "feature file bad magic: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint16_t version = detail::get_le<uint16_t>(p + 4);
  expect(version == kFeatureVersion, Errc::BadVersion,
         "feature file version mismatch (" + std::to_string(version) + "): " + path.string());
  const uint32_t rows = detail::get_le<uint32_t>(p + 6);
  const uint32_t cols = detail::get_le<uint32_t>(p + 10);
  const size_t expected = 14 + static_cast<size_t>(rows) * cols * 4;
  expect(bytes.size() == expected, Errc::Truncated,
         "feature file truncated payload: " + path.string());
  Tensor m = Tensor::zeros({rows, cols});
  for (size_t i = 0; i < static_cast<size_t>(rows) * cols; ++i) {
    const uint32_t u = detail::get_le<uint32_t>(p + 14 + i * 4);
    float f;
    std::memcpy(&f, &u, 4);
    (*m.data)[i] = static_cast<double>(f);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Manifests: UTF-8 JSONL, one record per utterance.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string audio_path;   // relative to the corpus directory
  std::string visual_path;  // relative to the corpus directory
  std::vector<int> src_tokens;
  std::vector<int> tgt_tokens;
};

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  expect(out.good(), Errc::Io, "cannot open for writing: " + path.string());
  for (const auto& e : entries) {
    ordered_json j{{"id", e.id},
                   {"audio_path", e.audio_path},
                   {"visual_path", e.visual_path},
                   {"src_tokens", e.src_tokens},
                   {"tgt_tokens", e.tgt_tokens}};
    out << j.dump() << "\n";
  }
  expect(out.good(), Errc::Io, "short write: " + path.string());
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  expect(in.good(), Errc::Io, "cannot open manifest: " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = parse_json_file_content(line, path.string() + ":" + std::to_string(line_no));
    JsonReader r(j, path.string() + ":" + std::to_string(line_no));
    ManifestEntry e;
    e.id = r.require<std::string>("id");
    e.audio_path = r.require<std::string>("audio_path");
    e.visual_path = r.require<std::string>("visual_path");
    e.src_tokens = r.require<std::vector<int>>("src_tokens");
    e.tgt_tokens = r.require<std::vector<int>>("tgt_tokens");
    r.finish();
    entries.push_back(std::move(e));
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Whole-corpus generation: manifest.{train,valid,test}.jsonl + features/.
// Per-utterance seeds derive from (master_seed, global index), so generation
// may run in parallel while remaining byte-identical.
// ---------------------------------------------------------------------------

struct CorpusSummary {
  int n_train = 0, n_valid = 0, n_test = 0;
  int feature_dim = 0;
  uint64_t master_seed = 0;
};

inline CorpusSummary generate_corpus(const CorpusSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  const VisemeMap viseme_map =
      build_viseme_map(spec.n_phonemes, spec.n_visemes, derive_seed({spec.master_seed, stream::kCorpus, 0}));
  const Codebooks codebooks = make_codebooks(spec);

  const std::vector<std::pair<std::string, int>> splits{
      {"train", spec.n_train}, {"valid", spec.n_valid}, {"test", spec.n_test}};
  size_t global_index = 0;
  for (const auto& [split, count] : splits) {
    struct Job {
      std::string id;
      uint64_t seed;
    };
    std::vector<Job> jobs;
    for (int i = 0; i < count; ++i, ++global_index) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s-%06d", split.c_str(), i);
      jobs.push_back({buf, derive_seed({spec.master_seed, stream::kCorpus, 0xC0DE, global_index})});
    }
    std::vector<ManifestEntry> entries(jobs.size());
    parallel_for(jobs.size(), [&](size_t i) {
      Utterance utt = synth_utterance(spec, viseme_map, codebooks, jobs[i].seed, jobs[i].id);
      ManifestEntry e;
      e.id = utt.id;
      e.audio_path = "features/" + utt.id + ".audio.avms";
      e.visual_path = "features/" + utt.id + ".visual.avms";
      e.src_tokens = utt.src_tokens;
      e.tgt_tokens = utt.tgt_tokens;
      write_features(dir / e.audio_path, utt.audio);
      write_features(dir / e.visual_path, utt.visual);
      entries[i] = std::move(e);
    });
    write_manifest(dir / ("manifest." + split + ".jsonl"), entries);
  }
  return CorpusSummary{spec.n_train, spec.n_valid, spec.n_test, spec.feature_dim,
                       spec.master_seed};
}

// In-memory corpus split loaded through the manifest.
struct LoadedUtterance {
  std::string id;
  Tensor audio;
  Tensor visual;
  std::vector<int> src_tokens;
  std::vector<int> tgt_tokens;
};

inline std::vector<LoadedUtterance> load_split(const std::filesystem::path& corpus_dir,
                                               const std::string& split) {
  const auto entries = read_manifest(corpus_dir / ("manifest." + split + ".jsonl"));
  std::vector<LoadedUtterance> utts(entries.size());
  parallel_for(entries.size(), [&](size_t i) {
    const auto& e = entries[i];
    LoadedUtterance u;
    u.id = e.id;
    u.audio = read_features(corpus_dir / e.audio_path);
    u.visual = read_features(corpus_dir / e.visual_path);
    u.src_tokens = e.src_tokens;
    u.tgt_tokens = e.tgt_tokens;
    expect(u.audio.shape == u.visual.shape, Errc::Validation,
           "corpus: audio/visual shape mismatch for utterance " + u.id);
    utts[i] = std::move(u);
  });
  return utts;
}

}  // namespace mixspeech
