// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "mixspeech/mixspeech.hpp"
#include "support/tmpdir.hpp"

using namespace mixspeech;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

// Small corpus + small model so a full two-stage run takes seconds.
CorpusSpec small_corpus_spec() {
  CorpusSpec spec;
  spec.n_train = 32;
  spec.n_valid = 8;
  spec.n_test = 8;
  spec.len_min = 3;
  spec.len_max = 6;
  spec.feature_dim = 6;
  spec.master_seed = 9;
  return spec;
}

TrainConfig small_train_config(const fs::path& corpus_dir) {
  TrainConfig cfg;
  cfg.corpus_dir = corpus_dir.string();
  cfg.seed = 5;
  cfg.model.feature_dim = 6;
  cfg.model.model_dim = 16;
  cfg.model.encoder_layers = 1;
  cfg.model.decoder_layers = 1;
  cfg.model.attention_heads = 2;
  cfg.model.ffn_dim = 24;
  cfg.model.max_positions = 64;
  cfg.stage1_steps = 30;
  cfg.stage2_steps = 20;
  cfg.batch_size = 4;
  cfg.eval_every = 10;
  return cfg;
}

std::string slurp(const fs::path& p) { return mixspeech::detail::read_file_bytes(p); }

std::vector<ordered_json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<ordered_json> records;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) records.push_back(ordered_json::parse(line));
  return records;
}

}  // namespace

TEST_CASE("zero pretrain steps leaves the initialization untouched", "[train]") {
  testsupport::TmpDir tmp("train0");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  cfg.stage1_steps = 0;
  TrainOutcome out = pretrain_audio(cfg, tmp.path() / "run");
  ModelParams loaded = load_model_params(read_checkpoint(out.final_checkpoint));
  ModelParams fresh = init_model(cfg.model, derive_seed({cfg.seed, stream::kInit}));
  for (auto& [name, t] : fresh.named()) {
    const Tensor* other = nullptr;
    for (auto& [n2, t2] : loaded.named())
      if (n2 == name) other = t2;
    REQUIRE(*other->data == *t->data);
  }
}

TEST_CASE("pretraining reduces the training loss", "[train]") {
  testsupport::TmpDir tmp("trainloss");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  cfg.stage1_steps = 200;
  pretrain_audio(cfg, tmp.path() / "run");
  auto records = read_jsonl(tmp.path() / "run" / "metrics.jsonl");
  REQUIRE(records.size() >= 200);
  // per-step totals swing with sampled utterance lengths; compare window means
  auto window_mean = [&](size_t begin, size_t end) {
    double sum = 0.0;
    for (size_t i = begin; i < end; ++i) sum += records[i].at("total").get<double>();
    return sum / static_cast<double>(end - begin);
  };
  REQUIRE(window_mean(180, 200) < window_mean(0, 20));
}

TEST_CASE("identical configs give byte-identical metrics", "[train]") {
  testsupport::TmpDir tmp("traindet");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  TrainOutcome pre_a = pretrain_audio(cfg, tmp.path() / "a1");
  selflearn(cfg, pre_a.final_checkpoint, tmp.path() / "a2");
  TrainOutcome pre_b = pretrain_audio(cfg, tmp.path() / "b1");
  selflearn(cfg, pre_b.final_checkpoint, tmp.path() / "b2");
  REQUIRE(slurp(tmp.path() / "a1" / "metrics.jsonl") == slurp(tmp.path() / "b1" / "metrics.jsonl"));
  REQUIRE(slurp(tmp.path() / "a2" / "metrics.jsonl") == slurp(tmp.path() / "b2" / "metrics.jsonl"));
}

TEST_CASE("metrics are independent of the worker thread count", "[train]") {
  testsupport::TmpDir tmp("trainthreads");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  setenv("MIXSPEECH_THREADS", "1", 1);
  TrainOutcome pre1 = pretrain_audio(cfg, tmp.path() / "t1");
  setenv("MIXSPEECH_THREADS", "4", 1);
  TrainOutcome pre4 = pretrain_audio(cfg, tmp.path() / "t4");
  unsetenv("MIXSPEECH_THREADS");
  REQUIRE(slurp(tmp.path() / "t1" / "metrics.jsonl") == slurp(tmp.path() / "t4" / "metrics.jsonl"));
  REQUIRE(slurp(pre1.final_checkpoint) == slurp(pre4.final_checkpoint));
}

TEST_CASE("disabled mixing keeps phi frozen and logs no mixed fields", "[train]") {
  testsupport::TmpDir tmp("trainfrozen");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  TrainOutcome pre = pretrain_audio(cfg, tmp.path() / "pre");
  cfg.weights = LossWeights{0.0, 0.0};
  TrainOutcome out = selflearn(cfg, pre.final_checkpoint, tmp.path() / "run");
  REQUIRE_FALSE(out.scheduler_fired);
  for (const auto& record : read_jsonl(tmp.path() / "run" / "metrics.jsonl")) {
    if (record.contains("event")) continue;
    REQUIRE_FALSE(record.contains("u_mix"));
    REQUIRE(record.at("phi").get<double>() == Approx(cfg.mix.phi_init));
  }
}

TEST_CASE("phi trajectory is non-decreasing and bounded in stage 2", "[train]") {
  testsupport::TmpDir tmp("trainphi");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  cfg.stage2_steps = 60;
  TrainOutcome pre = pretrain_audio(cfg, tmp.path() / "pre");
  selflearn(cfg, pre.final_checkpoint, tmp.path() / "run");
  double prev = cfg.mix.phi_init;
  for (const auto& record : read_jsonl(tmp.path() / "run" / "metrics.jsonl")) {
    if (record.contains("event")) continue;
    const double phi = record.at("phi").get<double>();
    REQUIRE(phi >= 0.1);
    REQUIRE(phi <= 0.9);
    REQUIRE(phi >= prev);
    prev = phi;
  }
}

TEST_CASE("mid-run checkpoint resume reproduces the uninterrupted run", "[train]") {
  testsupport::TmpDir tmp("trainresume");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  TrainOutcome pre = pretrain_audio(cfg, tmp.path() / "pre");

  TrainOutcome full = selflearn(cfg, pre.final_checkpoint, tmp.path() / "full");
  // the run checkpoints every eval_every=10 steps; resume from step 10
  const fs::path mid = tmp.path() / "full" / "checkpoints" / "step-10.mxck";
  REQUIRE(fs::exists(mid));
  TrainOutcome resumed = selflearn(cfg, mid, tmp.path() / "resumed");

  auto full_records = read_jsonl(tmp.path() / "full" / "metrics.jsonl");
  auto tail_records = read_jsonl(tmp.path() / "resumed" / "metrics.jsonl");
  std::vector<ordered_json> full_tail(full_records.begin() + 10, full_records.end());
  REQUIRE(full_tail.size() == tail_records.size());
  for (size_t i = 0; i < tail_records.size(); ++i) REQUIRE(full_tail[i] == tail_records[i]);
  REQUIRE(slurp(full.final_checkpoint) == slurp(resumed.final_checkpoint));
}

TEST_CASE("evaluation hooks: references as hypotheses score perfectly", "[train]") {
  testsupport::TmpDir tmp("evalrefs");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto test = load_split(tmp.path() / "corpus", "test");
  std::vector<std::vector<int>> refs;
  AlignmentCounts totals;
  for (const auto& u : test) {
    refs.emplace_back(u.tgt_tokens.begin() + 1, u.tgt_tokens.end() - 1);
    totals += wer(refs.back(), refs.back()).second;
  }
  REQUIRE(corpus_bleu(refs, refs) == 100.0);
  REQUIRE(wer_value(totals) == 0.0);
}

TEST_CASE("visual evaluation ignores the snr flag", "[train]") {
  testsupport::TmpDir tmp("evalvisual");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  cfg.stage1_steps = 10;
  TrainOutcome pre = pretrain_audio(cfg, tmp.path() / "pre");
  ModelParams params = load_model_params(read_checkpoint(pre.final_checkpoint));
  auto test = load_split(tmp.path() / "corpus", "test");
  EvalSpec clean;
  clean.modality = EvalModality::Visual;
  EvalSpec noisy = clean;
  noisy.snr_db = -10.0;
  EvalResult a = evaluate_split(params, test, clean);
  EvalResult b = evaluate_split(params, test, noisy);
  REQUIRE(a.bleu == b.bleu);
  REQUIRE(a.wer == b.wer);
}

TEST_CASE("mixed evaluation requires phi", "[train]") {
  EvalSpec spec;
  spec.modality = EvalModality::Mixed;
  REQUIRE_THROWS_AS(spec.validate(), Error);
  spec.phi = 0.5;
  REQUIRE_NOTHROW(spec.validate());
}

TEST_CASE("eval report round-trips and micro-averages", "[train]") {
  testsupport::TmpDir tmp("evalreport");
  generate_corpus(small_corpus_spec(), tmp.path() / "corpus");
  auto cfg = small_train_config(tmp.path() / "corpus");
  cfg.stage1_steps = 5;
  TrainOutcome pre = pretrain_audio(cfg, tmp.path() / "pre");
  ModelParams params = load_model_params(read_checkpoint(pre.final_checkpoint));
  auto test = load_split(tmp.path() / "corpus", "test");
  EvalSpec spec;
  spec.modality = EvalModality::Audio;
  EvalResult result = evaluate_split(params, test, spec);
  const fs::path report_path = tmp.path() / "test.report.json";
  write_eval_report(report_path, result, spec.to_json());
  ordered_json report = read_eval_report(report_path);
  REQUIRE(report.at("wer").get<double>() == Approx(result.wer));
  REQUIRE(report.at("bleu").get<double>() == Approx(result.bleu));
  // micro-average: the corpus WER equals recomputing from the summed counts
  AlignmentCounts totals;
  for (const auto& u : report.at("utterances")) {
    AlignmentCounts c;
    c.substitutions = u.at("substitutions").get<size_t>();
    c.deletions = u.at("deletions").get<size_t>();
    c.insertions = u.at("insertions").get<size_t>();
    c.ref_len = u.at("ref_len").get<size_t>();
    totals += c;
  }
  REQUIRE(wer_value(totals) == Approx(report.at("wer").get<double>()).epsilon(1e-12));
  REQUIRE(fs::exists(tmp.path() / "test.hyps.jsonl"));
}

TEST_CASE("config json round trip is strict", "[train]") {
  testsupport::TmpDir tmp("cfg");
  auto cfg = small_train_config(tmp.path());
  TrainConfig parsed = TrainConfig::from_json(json::parse(cfg.to_json().dump()));
  REQUIRE(parsed.to_json() == cfg.to_json());
  json bad = json::parse(cfg.to_json().dump());
  bad["mystery"] = 1;
  REQUIRE_THROWS_AS(TrainConfig::from_json(bad), Error);
}
