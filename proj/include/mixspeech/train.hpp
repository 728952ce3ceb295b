// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training: audio-speech pretraining, then cross-modality
// self-learning where a uni-modal (visual) branch is regularized by a mixed
// audio-visual branch through shared parameters, a mixed-branch cross-entropy
// and a JSD term. Every logged number is a deterministic function of
// (config, seed): data order, mixing draws and initialization use three
// independent derived streams, and batch work is merged in utterance order no
// matter how many worker threads run.
#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mixspeech/config.hpp"
#include "mixspeech/corpus.hpp"
#include "mixspeech/losses.hpp"
#include "mixspeech/metrics.hpp"
#include "mixspeech/mixup.hpp"
#include "mixspeech/model.hpp"
#include "mixspeech/optimizer.hpp"

namespace mixspeech {

namespace fs = std::filesystem;

inline Modality modality_from_string(const std::string& s) {
  if (s == "audio") return Modality::Audio;
  if (s == "visual") return Modality::Visual;
  throw Error(Errc::Validation, "unknown modality '" + s + "' (expected audio|visual)");
}

inline std::string to_string(Modality m) { return m == Modality::Audio ? "audio" : "visual"; }

struct MixConfig {
  double phi_init = 0.1;
  double alpha = 1.2;
  double k = 0.05;
  int n = 20;
  double phi_min = 0.1;
  double phi_max = 0.9;
  PhiOrientation orientation = PhiOrientation::AudioProbability;

  void validate() const {
    expect(phi_min <= phi_init && phi_init <= phi_max, Errc::Validation,
           "mix config: phi_init must lie in [phi_min, phi_max]");
    expect(alpha > 1.0, Errc::Validation, "mix config: alpha must exceed 1");
    expect(n >= 1, Errc::Validation, "mix config: n must be positive");
    expect(phi_min >= 0.0 && phi_max <= 1.0 && phi_min <= phi_max, Errc::Validation,
           "mix config: invalid phi bounds");
  }

  MixState initial_state() const {
    MixState s;
    s.phi = phi_init;
    s.streak = 0;
    s.alpha = alpha;
    s.k = k;
    s.n = n;
    s.phi_min = phi_min;
    s.phi_max = phi_max;
    return s;
  }

  static MixConfig from_json(const json& j) {
    JsonReader r(j, "mix config");
    MixConfig c;
    c.phi_init = r.optional("phi_init", c.phi_init);
    c.alpha = r.optional("alpha", c.alpha);
    c.k = r.optional("k", c.k);
    c.n = r.optional("n", c.n);
    c.phi_min = r.optional("phi_min", c.phi_min);
    c.phi_max = r.optional("phi_max", c.phi_max);
    const std::string orient = r.optional<std::string>("phi_orientation", "audio");
    if (orient == "audio") {
      c.orientation = PhiOrientation::AudioProbability;
    } else if (orient == "visual") {
      c.orientation = PhiOrientation::VisualProbability;
    } else {
      throw Error(Errc::Validation, "mix config: phi_orientation must be audio|visual");
    }
    r.finish();
    c.validate();
    return c;
  }

  ordered_json to_json() const {
    return ordered_json{
        {"phi_init", phi_init},
        {"alpha", alpha},
        {"k", k},
        {"n", n},
        {"phi_min", phi_min},
        {"phi_max", phi_max},
        {"phi_orientation",
         orientation == PhiOrientation::AudioProbability ? "audio" : "visual"}};
  }
};

inline AdamConfig adam_config_from_json(const json& j) {
  JsonReader r(j, "optimizer config");
  AdamConfig c;
  c.lr = r.optional("lr", c.lr);
  c.beta1 = r.optional("beta1", c.beta1);
  c.beta2 = r.optional("beta2", c.beta2);
  c.epsilon = r.optional("epsilon", c.epsilon);
  r.finish();
  expect(c.lr > 0.0 && std::isfinite(c.lr), Errc::Validation, "optimizer config: lr must be positive");
  expect(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0, Errc::Validation,
         "optimizer config: betas must lie in [0,1)");
  expect(c.epsilon > 0.0, Errc::Validation, "optimizer config: epsilon must be positive");
  return c;
}

inline ordered_json adam_config_to_json(const AdamConfig& c) {
  return ordered_json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"epsilon", c.epsilon}};
}

struct TrainConfig {
  std::string corpus_dir;
  uint64_t seed = 1;
  ModelConfig model;
  LossWeights weights;
  MixConfig mix;
  AdamConfig optim;
  int stage1_steps = 4000;
  double stage1_warmup_fraction = 0.1;
  int stage2_steps = 2000;
  int batch_size = 16;
  int eval_every = 250;
  Modality stage2_uni_modality = Modality::Visual;
  std::vector<uint64_t> ablation_seeds;  // optional; used by the ablate driver

  void validate() const {
    expect(!corpus_dir.empty(), Errc::Validation, "train config: corpus_dir is required");
    expect(stage1_steps >= 0 && stage2_steps >= 0, Errc::Validation,
           "train config: step counts must be non-negative");
    expect(batch_size > 0, Errc::Validation, "train config: batch_size must be positive");
    expect(eval_every > 0, Errc::Validation, "train config: eval_every must be positive");
    expect(stage1_warmup_fraction >= 0.0 && stage1_warmup_fraction <= 1.0, Errc::Validation,
           "train config: stage1_warmup_fraction must lie in [0,1]");
    model.validate();
    weights.validate();
    mix.validate();
  }

  static TrainConfig from_json(const json& j) {
    JsonReader r(j, "train config");
    TrainConfig c;
    c.corpus_dir = r.require<std::string>("corpus_dir");
    c.seed = r.optional<uint64_t>("seed", c.seed);
    if (r.has("model")) c.model = ModelConfig::from_json(r.raw("model"));
    if (r.has("loss_weights")) {
      JsonReader lw(r.raw("loss_weights"), "loss weights");
      c.weights.lambda1 = lw.optional("lambda1", c.weights.lambda1);
      c.weights.lambda2 = lw.optional("lambda2", c.weights.lambda2);
      lw.finish();
    }
    if (r.has("mix")) c.mix = MixConfig::from_json(r.raw("mix"));
    if (r.has("optimizer")) c.optim = adam_config_from_json(r.raw("optimizer"));
    c.stage1_steps = r.optional("stage1_steps", c.stage1_steps);
    c.stage1_warmup_fraction = r.optional("stage1_warmup_fraction", c.stage1_warmup_fraction);
    c.stage2_steps = r.optional("stage2_steps", c.stage2_steps);
    c.batch_size = r.optional("batch_size", c.batch_size);
    c.eval_every = r.optional("eval_every", c.eval_every);
    if (r.has("stage2_uni_modality"))
      c.stage2_uni_modality = modality_from_string(r.require<std::string>("stage2_uni_modality"));
    c.ablation_seeds = r.optional("ablation_seeds", c.ablation_seeds);
    r.finish();
    c.validate();
    return c;
  }

  ordered_json to_json() const {
    ordered_json j{{"corpus_dir", corpus_dir},
                   {"seed", seed},
                   {"model", model.to_json()},
                   {"loss_weights",
                    ordered_json{{"lambda1", weights.lambda1}, {"lambda2", weights.lambda2}}},
                   {"mix", mix.to_json()},
                   {"optimizer", adam_config_to_json(optim)},
                   {"stage1_steps", stage1_steps},
                   {"stage1_warmup_fraction", stage1_warmup_fraction},
                   {"stage2_steps", stage2_steps},
                   {"batch_size", batch_size},
                   {"eval_every", eval_every},
                   {"stage2_uni_modality", to_string(stage2_uni_modality)}};
    if (!ablation_seeds.empty()) j["ablation_seeds"] = ablation_seeds;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class EvalModality { Audio, Visual, Mixed };

inline EvalModality eval_modality_from_string(const std::string& s) {
  if (s == "audio") return EvalModality::Audio;
  if (s == "visual") return EvalModality::Visual;
  if (s == "mixed") return EvalModality::Mixed;
  throw Error(Errc::Validation, "unknown modality '" + s + "' (expected audio|visual|mixed)");
}

struct EvalSpec {
  EvalModality modality = EvalModality::Visual;
  std::optional<double> phi;     // required when modality == Mixed
  double snr_db = kCleanSnrDb;   // applies to the audio stream only
  PhiOrientation orientation = PhiOrientation::AudioProbability;

  void validate() const {
    expect(modality != EvalModality::Mixed || phi.has_value(), Errc::Validation,
           "evaluate: modality 'mixed' requires phi");
    if (phi) expect(*phi >= 0.0 && *phi <= 1.0, Errc::Validation, "evaluate: phi must lie in [0,1]");
  }

  ordered_json to_json() const {
    ordered_json j{{"modality", modality == EvalModality::Audio   ? "audio"
                                : modality == EvalModality::Visual ? "visual"
                                                                   : "mixed"}};
    if (phi) j["phi"] = *phi;
    j["snr_db"] = std::isinf(snr_db) ? ordered_json("clean") : ordered_json(snr_db);
    return j;
  }
};

struct EvalRow {
  std::string id;
  std::vector<int> ref;
  std::vector<int> hyp;
  AlignmentCounts counts;
};

struct EvalResult {
  double wer = 0.0;   // micro-average over summed alignment counts
  double bleu = 0.0;  // corpus BLEU
  AlignmentCounts totals;
  std::vector<EvalRow> rows;
};

namespace detail {

inline std::vector<int> strip_frame(const std::vector<int>& tgt) {
  expect(tgt.size() >= 2 && tgt.front() == kBos && tgt.back() == kEos, Errc::Validation,
         "utterance targets must be BOS ... EOS framed");
  return std::vector<int>(tgt.begin() + 1, tgt.end() - 1);
}

inline Tensor eval_input(const LoadedUtterance& utt, const EvalSpec& spec, size_t utt_index) {
  switch (spec.modality) {
    case EvalModality::Audio: {
      Tensor audio = std::isinf(spec.snr_db)
                         ? utt.audio
                         : add_noise(utt.audio, spec.snr_db, derive_seed({0xE7A1u, utt_index}));
      return concat_unimodal(audio, Modality::Audio);
    }
    case EvalModality::Visual:
      return concat_unimodal(utt.visual, Modality::Visual);
    case EvalModality::Mixed: {
      Tensor audio = std::isinf(spec.snr_db)
                         ? utt.audio
                         : add_noise(utt.audio, spec.snr_db, derive_seed({0xE7A1u, utt_index}));
      return mix_streams(audio, utt.visual, *spec.phi, derive_seed({0x3137u, utt_index}),
                         spec.orientation)
          .frames;
    }
  }
  throw Error(Errc::InvalidArgument, "evaluate: unreachable modality");
}

}  // namespace detail

// Greedy-decodes every utterance under the requested modality/noise and
// aggregates corpus WER (micro-averaged counts) and corpus BLEU.
inline EvalResult evaluate_split(ModelParams& params, const std::vector<LoadedUtterance>& utts,
                                 const EvalSpec& spec) {
  spec.validate();
  expect(!utts.empty(), Errc::Validation, "evaluate: empty corpus");
  EvalResult result;
  result.rows.resize(utts.size());
  parallel_for(utts.size(), [&](size_t i) {
    const auto& utt = utts[i];
    Tensor input = detail::eval_input(utt, spec, i);
    Tape tape;
    Tensor e_p = encode(tape, params, fuse(tape, params, input));
    const size_t cap = std::min<size_t>(static_cast<size_t>(params.config.max_positions) - 1,
                                        input.rows() + 8);
    EvalRow row;
    row.id = utt.id;
    row.ref = detail::strip_frame(utt.tgt_tokens);
    row.hyp = greedy_decode(params, e_p, cap);
    row.counts = wer(row.ref, row.hyp).second;
    result.rows[i] = std::move(row);
  });
  std::vector<std::vector<int>> refs, hyps;
  for (const auto& row : result.rows) {
    result.totals += row.counts;
    refs.push_back(row.ref);
    hyps.push_back(row.hyp);
  }
  result.wer = wer_value(result.totals);
  result.bleu = corpus_bleu(refs, hyps);
  return result;
}

// Report file plus a hypothesis/reference JSONL dump next to it
// (<stem>.hyps.jsonl).
inline void write_eval_report(const fs::path& path, const EvalResult& result,
                              const ordered_json& config_echo) {
  ordered_json utterances = ordered_json::array();
  for (const auto& row : result.rows)
    utterances.push_back(ordered_json{{"id", row.id},
                                      {"wer", wer_value(row.counts)},
                                      {"substitutions", row.counts.substitutions},
                                      {"deletions", row.counts.deletions},
                                      {"insertions", row.counts.insertions},
                                      {"ref_len", row.counts.ref_len}});
  ordered_json report{{"wer", result.wer},
                      {"bleu", result.bleu},
                      {"counts",
                       ordered_json{{"substitutions", result.totals.substitutions},
                                    {"deletions", result.totals.deletions},
                                    {"insertions", result.totals.insertions},
                                    {"ref_len", result.totals.ref_len}}},
                      {"config", config_echo},
                      {"utterances", utterances}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  expect(out.good(), Errc::Io, "cannot open for writing: " + path.string());
  out << report.dump(2) << "\n";
  fs::path dump = path;
  dump.replace_extension();
  if (dump.extension() == ".report") dump.replace_extension();
  dump += ".hyps.jsonl";
  std::ofstream hyps(dump, std::ios::binary | std::ios::trunc);
  expect(hyps.good(), Errc::Io, "cannot open for writing: " + dump.string());
  for (const auto& row : result.rows)
    hyps << ordered_json{{"id", row.id}, {"ref_tokens", row.ref}, {"hyp_tokens", row.hyp}}.dump()
         << "\n";
}

inline ordered_json read_eval_report(const fs::path& path) {
  const std::string text = detail::read_file_bytes(path);
  ordered_json j = ordered_json::parse(text, nullptr, /*allow_exceptions=*/false);
  expect(!j.is_discarded(), Errc::Validation, "malformed report: " + path.string());
  return j;
}

// Loads a manifest file directly; feature paths resolve against its directory.
inline std::vector<LoadedUtterance> load_manifest_file(const fs::path& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  std::vector<LoadedUtterance> utts(entries.size());
  parallel_for(entries.size(), [&](size_t i) {
    const auto& e = entries[i];
    LoadedUtterance u;
    u.id = e.id;
    u.audio = read_features(base / e.audio_path);
    u.visual = read_features(base / e.visual_path);
    u.src_tokens = e.src_tokens;
    u.tgt_tokens = e.tgt_tokens;
    utts[i] = std::move(u);
  });
  return utts;
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

struct TrainOutcome {
  fs::path final_checkpoint;
  bool scheduler_fired = false;
  double final_phi = 0.0;
  long steps_run = 0;
};

namespace detail {

class TrainRun {
 public:
  TrainRun(const TrainConfig& config, const fs::path& run_dir)
      : config_(config), run_dir_(run_dir) {
    config_.validate();
    fs::create_directories(run_dir_ / "checkpoints");
    fs::create_directories(run_dir_ / "eval");
    {
      std::ofstream snap(run_dir_ / "config.snapshot.json", std::ios::binary | std::ios::trunc);
      expect(snap.good(), Errc::Io, "cannot write config snapshot");
      snap << config_.to_json().dump(2) << "\n";
    }
    metrics_.open(run_dir_ / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    expect(metrics_.good(), Errc::Io, "cannot open metrics log");
    train_ = load_split(config_.corpus_dir, "train");
    valid_ = load_split(config_.corpus_dir, "valid");
    expect(!train_.empty(), Errc::Validation, "train split is empty");
    for (const auto& u : train_)
      expect(u.audio.cols() == static_cast<size_t>(config_.model.feature_dim), Errc::Validation,
             "corpus feature_dim disagrees with the model config for utterance " + u.id);
  }

  // Stage 1: uni-modal audio cross-entropy with linear warmup.
  TrainOutcome pretrain(const std::optional<fs::path>& init_checkpoint) {
    stage_ = "pretrain";
    long start_step = 0;
    if (init_checkpoint) {
      start_step = load_state(*init_checkpoint, "pretrain");
    } else {
      params_ = init_model(config_.model, derive_seed({config_.seed, stream::kInit}));
      auto ptrs = params_.parameters();
      adam_ = Adam(config_.optim, ptrs);
    }
    mix_state_ = config_.mix.initial_state();

    auto inputs = prepare_unimodal(Modality::Audio);
    const long warmup =
        std::max<long>(1, std::lround(config_.stage1_warmup_fraction * config_.stage1_steps));
    for (long step = start_step; step < config_.stage1_steps; ++step) {
      const auto batch = batch_indices(1, step);
      const double lr_scale =
          std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
      StepStats stats = run_step_or_abort(step, batch, inputs, nullptr, lr_scale);
      log_stage1(step, stats);
      maybe_eval_checkpoint(step + 1 == config_.stage1_steps, step);
    }
    if (config_.stage1_steps == start_step || config_.stage1_steps == 0)
      save_checkpoint_file(config_.stage1_steps);
    TrainOutcome outcome;
    outcome.final_checkpoint = checkpoint_path(config_.stage1_steps);
    outcome.steps_run = config_.stage1_steps - start_step;
    outcome.final_phi = mix_state_.phi;
    return outcome;
  }

  // Stage 2: uni-modal branch + mixed branch with shared parameters.
  TrainOutcome selflearn(const fs::path& init_checkpoint) {
    stage_ = "selflearn";
    long start_step = load_state(init_checkpoint, "selflearn");
    const bool mixed_active = config_.weights.lambda1 != 0.0 || config_.weights.lambda2 != 0.0;

    auto uni_inputs = prepare_unimodal(config_.stage2_uni_modality);
    for (long step = start_step; step < config_.stage2_steps; ++step) {
      expect(mix_state_.phi >= mix_state_.phi_min - 1e-12 &&
                 mix_state_.phi <= mix_state_.phi_max + 1e-12,
             Errc::InvalidArgument, "selflearn: phi left its bounds");
      const auto batch = batch_indices(2, step);
      StepStats stats = run_step_or_abort(step, batch, uni_inputs, mixed_active ? &step : nullptr, 1.0);
      if (mixed_active) {
        mix_state_ = scheduler_update(stats.reading, mix_state_);
        if (mix_state_.phi != config_.mix.phi_init) scheduler_fired_ = true;
        log_stage2(step, stats);
      } else {
        log_stage1(step, stats);  // same fields; phi stays at its initial value
      }
      maybe_eval_checkpoint(step + 1 == config_.stage2_steps, step);
    }
    if (config_.stage2_steps == start_step || config_.stage2_steps == 0)
      save_checkpoint_file(config_.stage2_steps);
    // run summary record; "scheduler never fired" flags a run for inspection
    ordered_json summary{{"event", "summary"},
                         {"stage", stage_},
                         {"scheduler_fired", scheduler_fired_},
                         {"final_phi", mix_state_.phi}};
    if (mixed_active && !scheduler_fired_) summary["note"] = "scheduler never fired";
    metrics_ << summary.dump() << "\n";
    metrics_.flush();
    TrainOutcome outcome;
    outcome.final_checkpoint = checkpoint_path(config_.stage2_steps);
    outcome.scheduler_fired = scheduler_fired_;
    outcome.final_phi = mix_state_.phi;
    outcome.steps_run = config_.stage2_steps - start_step;
    return outcome;
  }

  ModelParams& params() { return params_; }
  const std::vector<LoadedUtterance>& valid_split() const { return valid_; }

 private:
  std::vector<Tensor> prepare_unimodal(Modality m) {
    std::vector<Tensor> inputs(train_.size());
    parallel_for(train_.size(), [&](size_t i) {
      inputs[i] =
          concat_unimodal(m == Modality::Audio ? train_[i].audio : train_[i].visual, m);
    });
    return inputs;
  }

  std::vector<size_t> batch_indices(uint64_t stage, long step) {
    Rng rng(derive_seed({config_.seed, stream::kDataOrder, stage, static_cast<uint64_t>(step)}));
    std::vector<size_t> out(static_cast<size_t>(config_.batch_size));
    for (auto& i : out)
      i = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(train_.size()) - 1));
    return out;
  }

  struct StepStats {
    double ce_uni = 0.0;  // batch means
    double ce_mix = 0.0;
    double jsd = 0.0;
    UncertaintyReading reading;
  };

  // Aborts leave a diagnostic record in the metrics log before propagating.
  StepStats run_step_or_abort(long step, const std::vector<size_t>& batch,
                              const std::vector<Tensor>& uni_inputs, const long* mix_step,
                              double lr_scale) {
    try {
      return run_step(batch, uni_inputs, mix_step, lr_scale);
    } catch (const Error& e) {
      if (e.code() == Errc::NonFiniteLoss) {
        metrics_ << ordered_json{{"step", step},
                                 {"stage", stage_},
                                 {"event", "abort"},
                                 {"reason", e.what()}}
                        .dump()
                 << "\n";
        metrics_.flush();
      }
      throw;
    }
  }

  // Concatenates the batch into single row-stacked matrices (attention stays
  // block-diagonal via segment offsets), runs one forward/backward on one
  // tape, and applies the optimizer. The whole step is owned by the training
  // thread.
  StepStats run_step(const std::vector<size_t>& batch, const std::vector<Tensor>& uni_inputs,
                     const long* mix_step, double lr_scale) {
    const size_t b = batch.size();
    const size_t width = 2 * static_cast<size_t>(config_.model.feature_dim);
    std::vector<size_t> enc_offsets{0};
    std::vector<std::vector<int>> tgts;
    std::vector<int> targets;  // concatenated, excluding per-utterance BOS
    size_t total_rows = 0;
    for (size_t i : batch) total_rows += train_[i].audio.rows();
    Tensor uni = Tensor::uninit({total_rows, width});
    for (size_t slot = 0; slot < b; ++slot) {
      const auto& utt = train_[batch[slot]];
      const Tensor& prepared = uni_inputs[batch[slot]];
      std::memcpy(uni.data->data() + enc_offsets.back() * width, prepared.data->data(),
                  prepared.size() * sizeof(double));
      enc_offsets.push_back(enc_offsets.back() + prepared.rows());
      tgts.push_back(utt.tgt_tokens);
      targets.insert(targets.end(), utt.tgt_tokens.begin() + 1, utt.tgt_tokens.end());
    }

    Tape tape;
    params_.attach(tape);
    Tensor probs_uni = decode_teacher_forced_segments(
        tape, params_, encode_segments(tape, params_, fuse(tape, params_, uni), enc_offsets),
        enc_offsets, tgts);
    Tensor ce_uni = cross_entropy(tape, probs_uni, targets);

    StepStats stats;
    stats.ce_uni = ce_uni.item() / static_cast<double>(b);
    Tensor total = ce_uni;
    if (mix_step) {
      Tensor mixed = Tensor::uninit({total_rows, width});
      const double phi = mix_state_.phi;
      for (size_t slot = 0; slot < b; ++slot) {
        const auto& utt = train_[batch[slot]];
        const uint64_t mix_seed =
            derive_seed({config_.seed, stream::kMixDraws, static_cast<uint64_t>(*mix_step),
                         static_cast<uint64_t>(slot)});
        MixedStream ms = mix_streams(utt.audio, utt.visual, phi, mix_seed, config_.mix.orientation);
        std::memcpy(mixed.data->data() + enc_offsets[slot] * width, ms.frames.data->data(),
                    ms.frames.size() * sizeof(double));
      }
      Tensor probs_mix = decode_teacher_forced_segments(
          tape, params_, encode_segments(tape, params_, fuse(tape, params_, mixed), enc_offsets),
          enc_offsets, tgts);
      Tensor ce_mix = cross_entropy(tape, probs_mix, targets);
      Tensor jsd = jsd_loss(tape, probs_mix, probs_uni);
      stats.ce_mix = ce_mix.item() / static_cast<double>(b);
      stats.jsd = jsd.item() / static_cast<double>(b);
      // Step-pooled entropies over all target rows (the uncertainty signal is
      // measured on the same teacher-forced distributions the losses use,
      // before this step's update)
      stats.reading = UncertaintyReading{uncertainty(probs_uni), uncertainty(probs_mix)};
      total = total_loss(tape, ce_uni, ce_mix, jsd, config_.weights);
    }
    Tensor loss = scale(tape, total, 1.0 / static_cast<double>(b));
    expect(std::isfinite(loss.item()), Errc::NonFiniteLoss,
           "training aborted: non-finite loss at step");
    params_.zero_grads();
    tape.backward(loss);
    auto ptrs = params_.parameters();
    adam_.step(ptrs, lr_scale);
    return stats;
  }

  void log_stage1(long step, const StepStats& stats) {
    ordered_json record{{"step", step},        {"stage", stage_},
                        {"ce_uni", stats.ce_uni}, {"total", stats.ce_uni},
                        {"phi", mix_state_.phi},  {"streak", mix_state_.streak}};
    append_eval_fields(record, step);
    metrics_ << record.dump() << "\n";
  }

  void log_stage2(long step, const StepStats& stats) {
    const double total = stats.ce_uni + config_.weights.lambda1 * stats.ce_mix +
                         config_.weights.lambda2 * stats.jsd;
    ordered_json record{{"step", step},          {"stage", stage_},
                        {"ce_uni", stats.ce_uni}, {"ce_mix", stats.ce_mix},
                        {"jsd", stats.jsd},       {"total", total},
                        {"u_uni", stats.reading.u_uni}, {"u_mix", stats.reading.u_mix},
                        {"phi", mix_state_.phi},  {"streak", mix_state_.streak}};
    append_eval_fields(record, step);
    metrics_ << record.dump() << "\n";
  }

  void append_eval_fields(ordered_json& record, long step) {
    if ((step + 1) % config_.eval_every != 0) return;
    if (valid_.empty()) return;
    EvalSpec spec;
    spec.modality = stage_ == "pretrain"
                        ? EvalModality::Audio
                        : (config_.stage2_uni_modality == Modality::Audio ? EvalModality::Audio
                                                                          : EvalModality::Visual);
    EvalResult eval = evaluate_split(params_, valid_, spec);
    record["eval_wer"] = eval.wer;
    record["eval_bleu"] = eval.bleu;
  }

  void maybe_eval_checkpoint(bool final_step, long step) {
    if (final_step || (step + 1) % config_.eval_every == 0) save_checkpoint_file(step + 1);
  }

  fs::path checkpoint_path(long step) const {
    return run_dir_ / "checkpoints" / ("step-" + std::to_string(step) + ".mxck");
  }

  void save_checkpoint_file(long step) {
    std::vector<CheckpointEntryRef> entries;
    auto named = params_.named();
    for (auto& [name, t] : named) entries.push_back({"param." + name, t});
    // optimizer moments ride along as named tensors for exact resume
    std::vector<Tensor> moment_storage;
    moment_storage.reserve(named.size() * 2);
    auto& m = adam_.first_moments();
    auto& v = adam_.second_moments();
    for (size_t k = 0; k < named.size(); ++k) {
      moment_storage.push_back(Tensor::from(named[k].second->shape, m[k]));
      moment_storage.push_back(Tensor::from(named[k].second->shape, v[k]));
    }
    for (size_t k = 0; k < named.size(); ++k) {
      entries.push_back({"adam.m." + named[k].first, &moment_storage[2 * k]});
      entries.push_back({"adam.v." + named[k].first, &moment_storage[2 * k + 1]});
    }
    ordered_json meta{{"model_config", config_.model.to_json()},
                      {"stage", stage_},
                      {"next_step", step},
                      {"adam_steps", adam_.step_count()},
                      {"phi", mix_state_.phi},
                      {"streak", mix_state_.streak},
                      {"scheduler_fired", scheduler_fired_}};
    write_checkpoint(checkpoint_path(step), meta, entries);
  }

  // Restores parameters and, when resuming within the same stage, the
  // optimizer moments and curriculum state. Returns the step to resume from.
  long load_state(const fs::path& path, const std::string& target_stage) {
    Checkpoint ckpt = read_checkpoint(path);
    params_ = load_model_params(ckpt);
    expect(params_.config.to_json() == config_.model.to_json(), Errc::Validation,
           "checkpoint model config disagrees with the train config");
    auto ptrs = params_.parameters();
    adam_ = Adam(config_.optim, ptrs);
    mix_state_ = config_.mix.initial_state();
    const std::string from_stage = ckpt.meta.value("stage", std::string("pretrain"));
    if (from_stage != target_stage) return 0;  // fresh stage from pretrained weights
    // mid-stage resume: restore moments, curriculum and counters exactly
    auto named = params_.named();
    auto& m = adam_.first_moments();
    auto& v = adam_.second_moments();
    for (size_t k = 0; k < named.size(); ++k) {
      const Tensor* tm = ckpt.find("adam.m." + named[k].first);
      const Tensor* tv = ckpt.find("adam.v." + named[k].first);
      expect(tm != nullptr && tv != nullptr, Errc::BadVersion,
             "checkpoint is missing optimizer state for '" + named[k].first + "'");
      m[k] = tm->values();
      v[k] = tv->values();
    }
    adam_.set_step_count(ckpt.meta.value("adam_steps", 0L));
    mix_state_.phi = ckpt.meta.value("phi", config_.mix.phi_init);
    mix_state_.streak = ckpt.meta.value("streak", 0);
    scheduler_fired_ = ckpt.meta.value("scheduler_fired", false);
    return ckpt.meta.value("next_step", 0L);
  }

  TrainConfig config_;
  fs::path run_dir_;
  std::ofstream metrics_;
  std::vector<LoadedUtterance> train_, valid_;
  ModelParams params_;
  Adam adam_;
  MixState mix_state_;
  std::string stage_;
  bool scheduler_fired_ = false;
};

}  // namespace detail

inline TrainOutcome pretrain_audio(const TrainConfig& config, const fs::path& run_dir,
                                   const std::optional<fs::path>& init_checkpoint = {}) {
  detail::TrainRun run(config, run_dir);
  return run.pretrain(init_checkpoint);
}

inline TrainOutcome selflearn(const TrainConfig& config, const fs::path& init_checkpoint,
                              const fs::path& run_dir) {
  detail::TrainRun run(config, run_dir);
  return run.selflearn(init_checkpoint);
}

// ---------------------------------------------------------------------------
// Ablation driver: the four loss configurations, seed-matched data order, one
// shared pretraining per seed.
// ---------------------------------------------------------------------------

struct AblationRun {
  int config_id = 0;  // 1..4
  uint64_t seed = 0;
  fs::path run_dir;
  double test_bleu = 0.0;
  double test_wer = 0.0;
  bool scheduler_fired = false;
};

struct AblationSummary {
  std::vector<AblationRun> runs;
  std::array<double, 4> median_bleu{};
  bool ordered = false;          // median #4 >= #3 >= #2 >= #1
  double margin_4_vs_1 = 0.0;    // median BLEU gain of #4 over #1
};

inline LossWeights ablation_weights(int config_id) {
  switch (config_id) {
    case 1: return LossWeights{0.0, 0.0};
    case 2: return LossWeights{1.0, 0.0};
    case 3: return LossWeights{0.0, 1.0};
    case 4: return LossWeights{1.0, 1.0};
    default: throw Error(Errc::InvalidArgument, "ablation config id must be 1..4");
  }
}

namespace detail {
inline double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}
}  // namespace detail

inline AblationSummary run_ablation(const TrainConfig& base, const std::vector<uint64_t>& seeds,
                                    const fs::path& out_dir) {
  expect(!seeds.empty(), Errc::Validation, "ablation: no seeds given");
  fs::create_directories(out_dir / "runs");
  AblationSummary summary;
  auto test = load_split(base.corpus_dir, "test");
  for (uint64_t seed : seeds) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    const fs::path pre_dir = out_dir / ("pretrain-seed" + std::to_string(seed));
    TrainOutcome pre = pretrain_audio(cfg, pre_dir);
    for (int config_id = 1; config_id <= 4; ++config_id) {
      TrainConfig stage2 = cfg;
      stage2.weights = ablation_weights(config_id);
      const fs::path run_dir =
          out_dir / "runs" / ("seed" + std::to_string(seed) + "-config" + std::to_string(config_id));
      TrainOutcome outcome = selflearn(stage2, pre.final_checkpoint, run_dir);
      Checkpoint ckpt = read_checkpoint(outcome.final_checkpoint);
      ModelParams params = load_model_params(ckpt);
      EvalSpec spec;
      spec.modality = EvalModality::Visual;
      EvalResult eval = evaluate_split(params, test, spec);
      write_eval_report(run_dir / "eval" / "test.report.json", eval,
                        ordered_json{{"seed", seed},
                                     {"config_id", config_id},
                                     {"eval", spec.to_json()}});
      AblationRun run;
      run.config_id = config_id;
      run.seed = seed;
      run.run_dir = run_dir;
      run.test_bleu = eval.bleu;
      run.test_wer = eval.wer;
      run.scheduler_fired = outcome.scheduler_fired;
      summary.runs.push_back(run);
    }
  }
  for (int config_id = 1; config_id <= 4; ++config_id) {
    std::vector<double> bleus;
    for (const auto& run : summary.runs)
      if (run.config_id == config_id) bleus.push_back(run.test_bleu);
    summary.median_bleu[static_cast<size_t>(config_id - 1)] = detail::median3(bleus);
  }
  summary.ordered = summary.median_bleu[3] >= summary.median_bleu[2] &&
                    summary.median_bleu[2] >= summary.median_bleu[1] &&
                    summary.median_bleu[1] >= summary.median_bleu[0];
  summary.margin_4_vs_1 = summary.median_bleu[3] - summary.median_bleu[0];
  return summary;
}

inline void write_ablation_summary(const fs::path& out_dir, const AblationSummary& summary) {
  ordered_json runs = ordered_json::array();
  for (const auto& run : summary.runs)
    runs.push_back(ordered_json{{"config_id", run.config_id},
                                {"seed", run.seed},
                                {"run_dir", run.run_dir.string()},
                                {"test_bleu", run.test_bleu},
                                {"test_wer", run.test_wer},
                                {"scheduler_fired", run.scheduler_fired}});
  ordered_json j{{"runs", runs},
                 {"median_bleu",
                  ordered_json{{"config1", summary.median_bleu[0]},
                               {"config2", summary.median_bleu[1]},
                               {"config3", summary.median_bleu[2]},
                               {"config4", summary.median_bleu[3]}}},
                 {"ordered", summary.ordered},
                 {"margin_4_vs_1", summary.margin_4_vs_1}};
  std::ofstream out(out_dir / "ablation.summary.json", std::ios::binary | std::ios::trunc);
  out << j.dump(2) << "\n";

  std::ofstream text(out_dir / "ablation.summary.txt", std::ios::binary | std::ios::trunc);
  text << "config   losses                 median BLEU\n";
  const char* labels[4] = {"#1 ce_uni", "#2 ce_uni+ce_mix", "#3 ce_uni+jsd",
                           "#4 ce_uni+ce_mix+jsd"};
  for (int i = 0; i < 4; ++i) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-8d %-22s %10.3f\n", i + 1, labels[i],
                  summary.median_bleu[static_cast<size_t>(i)]);
    text << line;
  }
  char tail[96];
  std::snprintf(tail, sizeof(tail), "margin #4 - #1: %.3f   ordered: %s\n",
                summary.margin_4_vs_1, summary.ordered ? "yes" : "no");
  text << tail;
}

}  // namespace mixspeech
