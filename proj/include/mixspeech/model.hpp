// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// The three-module network: a fusion front-end over modality-concatenated
// frames, a bidirectional self-attention speech encoder, and an autoregressive
// translation decoder with cross-attention. One parameter set serves every
// modality of input; training and inference differ only in what gets fed in.
#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mixspeech/config.hpp"
#include "mixspeech/corpus.hpp"
#include "mixspeech/rng.hpp"
#include "mixspeech/tensor.hpp"

namespace mixspeech {

struct ModelConfig {
  int feature_dim = 16;  // per-stream D; the fuser consumes 2D-wide frames
  int model_dim = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int attention_heads = 4;
  int ffn_dim = 128;
  int max_positions = 256;
  int tgt_vocab = 60;

  void validate() const {
    expect(feature_dim >= 1 && model_dim >= 1 && ffn_dim >= 1, Errc::Validation,
           "model config: dimensions must be positive");
    expect(encoder_layers >= 1 && decoder_layers >= 1, Errc::Validation,
           "model config: layer counts must be positive");
    expect(attention_heads >= 1 && model_dim % attention_heads == 0, Errc::Validation,
           "model config: model_dim must be divisible by attention_heads");
    expect(max_positions >= 2, Errc::Validation, "model config: max_positions too small");
    expect(tgt_vocab > kNumReserved, Errc::Validation,
           "model config: tgt_vocab must exceed the reserved ids");
  }

  static ModelConfig from_json(const json& j) {
    JsonReader r(j, "model config");
    ModelConfig c;
    c.feature_dim = r.optional("feature_dim", c.feature_dim);
    c.model_dim = r.optional("model_dim", c.model_dim);
    c.encoder_layers = r.optional("encoder_layers", c.encoder_layers);
    c.decoder_layers = r.optional("decoder_layers", c.decoder_layers);
    c.attention_heads = r.optional("attention_heads", c.attention_heads);
    c.ffn_dim = r.optional("ffn_dim", c.ffn_dim);
    c.max_positions = r.optional("max_positions", c.max_positions);
    c.tgt_vocab = r.optional("tgt_vocab", c.tgt_vocab);
    r.finish();
    c.validate();
    return c;
  }

  ordered_json to_json() const {
    return ordered_json{{"feature_dim", feature_dim},     {"model_dim", model_dim},
                        {"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
                        {"attention_heads", attention_heads}, {"ffn_dim", ffn_dim},
                        {"max_positions", max_positions},  {"tgt_vocab", tgt_vocab}};
  }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  Tensor ln1_g, ln1_b;
  AttentionParams attn;
  Tensor ln2_g, ln2_b;
  FfnParams ffn;
};

struct DecoderLayerParams {
  Tensor ln1_g, ln1_b;
  AttentionParams self_attn;
  Tensor ln2_g, ln2_b;
  AttentionParams cross_attn;
  Tensor ln3_g, ln3_b;
  FfnParams ffn;
};

struct ModelParams {
  ModelConfig config;
  Tensor fuser_w, fuser_b;  // 2D -> H affine, tanh nonlinearity
  std::vector<EncoderLayerParams> encoder;
  Tensor enc_ln_g, enc_ln_b;
  Tensor tgt_embed;  // V x H
  std::vector<DecoderLayerParams> decoder;
  Tensor dec_ln_g, dec_ln_b;
  Tensor out_w, out_b;  // H -> V
  Tensor positions;     // sinusoidal, not learned

  // Learned parameters with stable names; the order defines the optimizer
  // slot layout and the checkpoint layout.
  std::vector<std::pair<std::string, Tensor*>> named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto attn = [&](const std::string& prefix, AttentionParams& a) {
      out.emplace_back(prefix + ".wq", &a.wq);
      out.emplace_back(prefix + ".bq", &a.bq);
      out.emplace_back(prefix + ".wk", &a.wk);
      out.emplace_back(prefix + ".bk", &a.bk);
      out.emplace_back(prefix + ".wv", &a.wv);
      out.emplace_back(prefix + ".bv", &a.bv);
      out.emplace_back(prefix + ".wo", &a.wo);
      out.emplace_back(prefix + ".bo", &a.bo);
    };
    auto ffn = [&](const std::string& prefix, FfnParams& f) {
      out.emplace_back(prefix + ".w1", &f.w1);
      out.emplace_back(prefix + ".b1", &f.b1);
      out.emplace_back(prefix + ".w2", &f.w2);
      out.emplace_back(prefix + ".b2", &f.b2);
    };
    out.emplace_back("fuser.w", &fuser_w);
    out.emplace_back("fuser.b", &fuser_b);
    for (size_t l = 0; l < encoder.size(); ++l) {
      const std::string p = "enc." + std::to_string(l);
      out.emplace_back(p + ".ln1.g", &encoder[l].ln1_g);
      out.emplace_back(p + ".ln1.b", &encoder[l].ln1_b);
      attn(p + ".attn", encoder[l].attn);
      out.emplace_back(p + ".ln2.g", &encoder[l].ln2_g);
      out.emplace_back(p + ".ln2.b", &encoder[l].ln2_b);
      ffn(p + ".ffn", encoder[l].ffn);
    }
    out.emplace_back("enc_ln.g", &enc_ln_g);
    out.emplace_back("enc_ln.b", &enc_ln_b);
    out.emplace_back("tgt_embed", &tgt_embed);
    for (size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "dec." + std::to_string(l);
      out.emplace_back(p + ".ln1.g", &decoder[l].ln1_g);
      out.emplace_back(p + ".ln1.b", &decoder[l].ln1_b);
      attn(p + ".self", decoder[l].self_attn);
      out.emplace_back(p + ".ln2.g", &decoder[l].ln2_g);
      out.emplace_back(p + ".ln2.b", &decoder[l].ln2_b);
      attn(p + ".cross", decoder[l].cross_attn);
      out.emplace_back(p + ".ln3.g", &decoder[l].ln3_g);
      out.emplace_back(p + ".ln3.b", &decoder[l].ln3_b);
      ffn(p + ".ffn", decoder[l].ffn);
    }
    out.emplace_back("dec_ln.g", &dec_ln_g);
    out.emplace_back("dec_ln.b", &dec_ln_b);
    out.emplace_back("out.w", &out_w);
    out.emplace_back("out.b", &out_b);
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, p] : named()) out.push_back(p);
    return out;
  }

  void zero_grads() {
    for (Tensor* p : parameters()) {
      p->ensure_grad();
      p->zero_grad();
    }
  }

  void attach(Tape& tape) {
    for (Tensor* p : parameters()) tape.watch(*p);
  }

  size_t parameter_count() {
    size_t n = 0;
    for (Tensor* p : parameters()) n += p->size();
    return n;
  }
};

namespace detail {

inline Tensor sinusoidal_positions(int max_positions, int dim) {
  Tensor pos = Tensor::zeros({static_cast<size_t>(max_positions), static_cast<size_t>(dim)});
  for (int t = 0; t < max_positions; ++t) {
    for (int i = 0; i < dim; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pos.at(static_cast<size_t>(t), static_cast<size_t>(i)) = std::sin(t * rate);
      if (i + 1 < dim)
        pos.at(static_cast<size_t>(t), static_cast<size_t>(i + 1)) = std::cos(t * rate);
    }
  }
  return pos;
}

}  // namespace detail

// Gaussian(0, 0.02) weight matrices, zero biases, unit layer-norm gains.
inline ModelParams init_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  const size_t d2 = 2 * static_cast<size_t>(config.feature_dim);
  const size_t h = static_cast<size_t>(config.model_dim);
  const size_t f = static_cast<size_t>(config.ffn_dim);
  const size_t v = static_cast<size_t>(config.tgt_vocab);

  p.fuser_w = Tensor::zeros({d2, h});
  p.fuser_b = Tensor::zeros({h});
  auto make_attn = [&]() {
    AttentionParams a;
    a.wq = Tensor::zeros({h, h});
    a.bq = Tensor::zeros({h});
    a.wk = Tensor::zeros({h, h});
    a.bk = Tensor::zeros({h});
    a.wv = Tensor::zeros({h, h});
    a.bv = Tensor::zeros({h});
    a.wo = Tensor::zeros({h, h});
    a.bo = Tensor::zeros({h});
    return a;
  };
  auto make_ffn = [&]() {
    FfnParams fp;
    fp.w1 = Tensor::zeros({h, f});
    fp.b1 = Tensor::zeros({f});
    fp.w2 = Tensor::zeros({f, h});
    fp.b2 = Tensor::zeros({h});
    return fp;
  };
  auto make_ln = [&](Tensor& g, Tensor& b) {
    g = Tensor::from({h}, std::vector<double>(h, 1.0));
    b = Tensor::zeros({h});
  };
  p.encoder.resize(static_cast<size_t>(config.encoder_layers));
  for (auto& layer : p.encoder) {
    make_ln(layer.ln1_g, layer.ln1_b);
    layer.attn = make_attn();
    make_ln(layer.ln2_g, layer.ln2_b);
    layer.ffn = make_ffn();
  }
  make_ln(p.enc_ln_g, p.enc_ln_b);
  p.tgt_embed = Tensor::zeros({v, h});
  p.decoder.resize(static_cast<size_t>(config.decoder_layers));
  for (auto& layer : p.decoder) {
    make_ln(layer.ln1_g, layer.ln1_b);
    layer.self_attn = make_attn();
    make_ln(layer.ln2_g, layer.ln2_b);
    layer.cross_attn = make_attn();
    make_ln(layer.ln3_g, layer.ln3_b);
    layer.ffn = make_ffn();
  }
  make_ln(p.dec_ln_g, p.dec_ln_b);
  p.out_w = Tensor::zeros({h, v});
  p.out_b = Tensor::zeros({v});
  p.positions = detail::sinusoidal_positions(config.max_positions, config.model_dim);

  // Fill weight matrices (2-d tensors other than layer norms); biases and
  // norm parameters keep their zeros/ones.
  size_t index = 0;
  for (auto& [name, t] : p.named()) {
    ++index;
    if (t->shape.size() != 2) continue;
    Rng rng(derive_seed({seed, stream::kInit, index}));
    for (auto& w : *t->data) w = 0.02 * rng.normal();
  }
  return p;
}

namespace detail {

inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return affine(tape, x, w, b);
}

// Fused multi-head scaled dot-product attention over projected q/k/v
// matrices ([Tq,H] and [Tk,H], H = heads * dh), block-diagonal over segments
// so a whole batch of independent sequences runs through one node. Segment s
// holds query rows [q_offsets[s], q_offsets[s+1]) attending to key rows
// [k_offsets[s], k_offsets[s+1]). One tape node; the backward pass replays the
// per-head softmax jacobian exactly. Equivalent to the composed
// slice/scores/softmax/context graph, which the tests keep as an oracle.
inline Tensor scaled_dot_attention_segments(Tape& tape, const Tensor& q, const Tensor& k,
                                            const Tensor& v, int heads, bool causal,
                                            const std::vector<size_t>& q_offsets,
                                            const std::vector<size_t>& k_offsets) {
  detail::expect_2d("scaled_dot_attention", q);
  expect(q.shape[1] == k.shape[1] && k.shape == v.shape, Errc::ShapeMismatch,
         "scaled_dot_attention: projection shapes disagree: " + shape_str(q.shape) + " vs " +
             shape_str(k.shape) + " vs " + shape_str(v.shape));
  expect(q_offsets.size() >= 2 && q_offsets.size() == k_offsets.size() &&
             q_offsets.front() == 0 && k_offsets.front() == 0 && q_offsets.back() == q.rows() &&
             k_offsets.back() == k.rows(),
         Errc::ShapeMismatch, "scaled_dot_attention: malformed segment offsets");
  const size_t h = q.cols();
  expect(heads >= 1 && h % static_cast<size_t>(heads) == 0, Errc::ShapeMismatch,
         "scaled_dot_attention: width not divisible by head count");
  const size_t dh = h / static_cast<size_t>(heads);
  const size_t nseg = q_offsets.size() - 1;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (size_t s = 0; s < nseg; ++s) {
    expect(q_offsets[s] < q_offsets[s + 1] && k_offsets[s] < k_offsets[s + 1],
           Errc::ShapeMismatch, "scaled_dot_attention: empty segment");
    expect(!causal || q_offsets[s + 1] - q_offsets[s] == k_offsets[s + 1] - k_offsets[s],
           Errc::ShapeMismatch, "scaled_dot_attention: causal masking needs square scores");
  }

  // attention probabilities, saved for backward: per segment, `heads`
  // consecutive tq_s x tk_s blocks
  std::vector<size_t> attn_base(nseg + 1, 0);
  for (size_t s = 0; s < nseg; ++s)
    attn_base[s + 1] = attn_base[s] + static_cast<size_t>(heads) *
                                          (q_offsets[s + 1] - q_offsets[s]) *
                                          (k_offsets[s + 1] - k_offsets[s]);
  auto attn = std::make_shared<std::vector<double>>(attn_base[nseg]);

  Tensor out = Tensor::uninit({q.rows(), h});
  auto pack = [dh, h](std::vector<double>& dst, const Buffer& src, size_t row0, size_t rows,
                      size_t start) {
    dst.resize(rows * dh);
    for (size_t i = 0; i < rows; ++i)
      std::memcpy(&dst[i * dh], &src[(row0 + i) * h + start], dh * sizeof(double));
  };
  {
    std::vector<double> qh, kh, vh, ctx;
    for (size_t s = 0; s < nseg; ++s) {
      const size_t q0 = q_offsets[s], tq = q_offsets[s + 1] - q0;
      const size_t k0 = k_offsets[s], tk = k_offsets[s + 1] - k0;
      for (int head = 0; head < heads; ++head) {
        const size_t start = static_cast<size_t>(head) * dh;
        pack(qh, *q.data, q0, tq, start);
        pack(kh, *k.data, k0, tk, start);
        pack(vh, *v.data, k0, tk, start);
        double* a = attn->data() + attn_base[s] + static_cast<size_t>(head) * tq * tk;
        std::fill(a, a + tq * tk, 0.0);
        detail::mm_nt_acc(a, qh.data(), kh.data(), tq, dh, tk);
        for (size_t i = 0; i < tq; ++i) {
          double* row = a + i * tk;
          const size_t limit = causal ? i + 1 : tk;
          double mx = -std::numeric_limits<double>::infinity();
          for (size_t j = 0; j < limit; ++j) {
            row[j] *= inv_scale;
            mx = std::max(mx, row[j]);
          }
          double sum = 0.0;
          for (size_t j = 0; j < limit; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          const double inv = 1.0 / sum;
          for (size_t j = 0; j < limit; ++j) row[j] *= inv;
          for (size_t j = limit; j < tk; ++j) row[j] = 0.0;
        }
        ctx.assign(tq * dh, 0.0);
        detail::mm_nn_acc(ctx.data(), a, vh.data(), tq, tk, dh);
        for (size_t i = 0; i < tq; ++i)
          std::memcpy(&(*out.data)[(q0 + i) * h + start], &ctx[i * dh], dh * sizeof(double));
      }
    }
  }

  const int iq = tape.input_id(q), ik = tape.input_id(k), iv = tape.input_id(v);
  auto qv = q.data, kv2 = k.data, vv = v.data;
  const size_t q_rows = q.rows(), k_rows = k.rows();
  tape.record(out, {iq, ik}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    double* dq = iq >= 0 ? t.adj_buf(iq, q_rows * h) : nullptr;
    double* dk = ik >= 0 ? t.adj_buf(ik, k_rows * h) : nullptr;
    double* dv = iv >= 0 ? t.adj_buf(iv, k_rows * h) : nullptr;
    std::vector<double> qh, kh, vh, doh, da, dqh, dkh, dvh;
    auto pack = [dh, h](std::vector<double>& dst, const Buffer& src, size_t row0, size_t rows,
                        size_t start) {
      dst.resize(rows * dh);
      for (size_t i = 0; i < rows; ++i)
        std::memcpy(&dst[i * dh], &src[(row0 + i) * h + start], dh * sizeof(double));
    };
    for (size_t s = 0; s < nseg; ++s) {
      const size_t q0 = q_offsets[s], tq = q_offsets[s + 1] - q0;
      const size_t k0 = k_offsets[s], tk = k_offsets[s + 1] - k0;
      for (int head = 0; head < heads; ++head) {
        const size_t start = static_cast<size_t>(head) * dh;
        const double* a = attn->data() + attn_base[s] + static_cast<size_t>(head) * tq * tk;
        pack(qh, *qv, q0, tq, start);
        pack(kh, *kv2, k0, tk, start);
        pack(vh, *vv, k0, tk, start);
        doh.resize(tq * dh);
        for (size_t i = 0; i < tq; ++i)
          std::memcpy(&doh[i * dh], &g[(q0 + i) * h + start], dh * sizeof(double));
        // dA = dO * V^T, then the softmax jacobian row by row (masked entries
        // hold A == 0 and drop out automatically)
        da.assign(tq * tk, 0.0);
        detail::mm_nt_acc(da.data(), doh.data(), vh.data(), tq, dh, tk);
        for (size_t i = 0; i < tq; ++i) {
          double* dai = &da[i * tk];
          const double* ai = a + i * tk;
          double dot = 0.0;
          for (size_t j = 0; j < tk; ++j) dot += dai[j] * ai[j];
          for (size_t j = 0; j < tk; ++j) dai[j] = ai[j] * (dai[j] - dot) * inv_scale;
        }
        if (dv) {
          // dV = A^T * dO
          dvh.assign(tk * dh, 0.0);
          detail::mm_tn_acc(dvh.data(), a, doh.data(), tk, tq, dh);
          for (size_t i = 0; i < tk; ++i)
            for (size_t j = 0; j < dh; ++j) dv[(k0 + i) * h + start + j] += dvh[i * dh + j];
        }
        if (dq) {
          // dQ = dS * K
          dqh.assign(tq * dh, 0.0);
          detail::mm_nn_acc(dqh.data(), da.data(), kh.data(), tq, tk, dh);
          for (size_t i = 0; i < tq; ++i)
            for (size_t j = 0; j < dh; ++j) dq[(q0 + i) * h + start + j] += dqh[i * dh + j];
        }
        if (dk) {
          // dK = dS^T * Q
          dkh.assign(tk * dh, 0.0);
          detail::mm_tn_acc(dkh.data(), da.data(), qh.data(), tk, tq, dh);
          for (size_t i = 0; i < tk; ++i)
            for (size_t j = 0; j < dh; ++j) dk[(k0 + i) * h + start + j] += dkh[i * dh + j];
        }
      }
    }
  });
  return out;
}

inline Tensor scaled_dot_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                   int heads, bool causal) {
  return scaled_dot_attention_segments(tape, q, k, v, heads, causal, {0, q.rows()},
                                       {0, k.rows()});
}

// Multi-head attention block. Queries come from `q_in`; keys and values from
// `kv_in` (equal to q_in for self-attention).
inline Tensor attention(Tape& tape, const AttentionParams& a, const Tensor& q_in,
                        const Tensor& kv_in, int heads, bool causal,
                        const std::vector<size_t>& q_offsets,
                        const std::vector<size_t>& k_offsets) {
  Tensor q = linear(tape, q_in, a.wq, a.bq);
  Tensor k = linear(tape, kv_in, a.wk, a.bk);
  Tensor v = linear(tape, kv_in, a.wv, a.bv);
  return linear(tape,
                scaled_dot_attention_segments(tape, q, k, v, heads, causal, q_offsets, k_offsets),
                a.wo, a.bo);
}

inline Tensor ffn_block(Tape& tape, const FfnParams& f, const Tensor& x) {
  return linear(tape, relu(tape, linear(tape, x, f.w1, f.b1)), f.w2, f.b2);
}

// Per-segment position rows: every segment restarts at position 0.
inline Tensor position_rows(const ModelParams& p, const std::vector<size_t>& offsets) {
  const size_t cols = p.positions.cols();
  Tensor rows = Tensor::uninit({offsets.back(), cols});
  for (size_t s = 0; s + 1 < offsets.size(); ++s)
    std::memcpy(rows.data->data() + offsets[s] * cols, p.positions.data->data(),
                (offsets[s + 1] - offsets[s]) * cols * sizeof(double));
  return rows;
}

}  // namespace detail

// Fusion front-end over modality-concatenated frames: affine 2D -> H plus a
// tanh nonlinearity.
inline Tensor fuse(Tape& tape, ModelParams& p, const Tensor& e_concat) {
  expect(e_concat.shape.size() == 2 &&
             e_concat.cols() == 2 * static_cast<size_t>(p.config.feature_dim),
         Errc::ShapeMismatch,
         "fuse: expected T x " + std::to_string(2 * p.config.feature_dim) + " input, got " +
             shape_str(e_concat.shape));
  return tanh(tape, detail::linear(tape, e_concat, p.fuser_w, p.fuser_b));
}

// Bidirectional self-attention stack producing the contextual embedding.
// Rows hold one or more independent sequences, delimited by `offsets`
// (attention never crosses a segment boundary; positions restart per
// segment). The `use_positions` hook exists for the permutation-equivariance
// test.
inline Tensor encode_segments(Tape& tape, ModelParams& p, const Tensor& e_f,
                              const std::vector<size_t>& offsets, bool use_positions = true) {
  expect(e_f.shape.size() == 2 && e_f.cols() == static_cast<size_t>(p.config.model_dim),
         Errc::ShapeMismatch, "encode: expected T x H input, got " + shape_str(e_f.shape));
  for (size_t s = 0; s + 1 < offsets.size(); ++s)
    expect(offsets[s + 1] - offsets[s] <= static_cast<size_t>(p.config.max_positions),
           Errc::InvalidArgument,
           "encode: sequence length " + std::to_string(offsets[s + 1] - offsets[s]) +
               " exceeds max_positions " + std::to_string(p.config.max_positions));
  Tensor x = e_f;
  if (use_positions) x = add(tape, x, detail::position_rows(p, offsets));
  for (auto& layer : p.encoder) {
    Tensor a = layernorm_rows(tape, x, layer.ln1_g, layer.ln1_b);
    x = add(tape, x,
            detail::attention(tape, layer.attn, a, a, p.config.attention_heads, false, offsets,
                              offsets));
    Tensor f = layernorm_rows(tape, x, layer.ln2_g, layer.ln2_b);
    x = add(tape, x, detail::ffn_block(tape, layer.ffn, f));
  }
  return layernorm_rows(tape, x, p.enc_ln_g, p.enc_ln_b);
}

inline Tensor encode(Tape& tape, ModelParams& p, const Tensor& e_f, bool use_positions = true) {
  return encode_segments(tape, p, e_f, {0, e_f.rows()}, use_positions);
}

// Teacher-forced decode over one or more sequences. Decoder segment i holds
// the BOS-prefixed inputs of utterance i (its final gold token is predicted,
// never consumed) and cross-attends to encoder segment i. Row t of the result
// is the model distribution over the t-th target token of its segment given
// the gold tokens before it; causal masking never lets a row see later
// positions.
inline Tensor decode_teacher_forced_segments(Tape& tape, ModelParams& p, const Tensor& e_p,
                                             const std::vector<size_t>& enc_offsets,
                                             const std::vector<std::vector<int>>& tgt_tokens) {
  expect(enc_offsets.size() == tgt_tokens.size() + 1, Errc::ShapeMismatch,
         "decode_teacher_forced: need one encoder segment per target sequence");
  std::vector<int> inputs;
  std::vector<size_t> dec_offsets{0};
  for (const auto& tgt : tgt_tokens) {
    expect(tgt.size() >= 2 && tgt.front() == kBos, Errc::InvalidArgument,
           "decode_teacher_forced: target sequence must start with BOS");
    for (int w : tgt)
      expect(w >= 0 && w < p.config.tgt_vocab, Errc::InvalidArgument,
             "decode_teacher_forced: token id " + std::to_string(w) + " out of range [0," +
                 std::to_string(p.config.tgt_vocab) + ")");
    expect(tgt.size() - 1 <= static_cast<size_t>(p.config.max_positions), Errc::InvalidArgument,
           "decode_teacher_forced: sequence length exceeds max_positions");
    inputs.insert(inputs.end(), tgt.begin(), tgt.end() - 1);
    dec_offsets.push_back(inputs.size());
  }
  Tensor x =
      add(tape, embed(tape, p.tgt_embed, inputs), detail::position_rows(p, dec_offsets));
  for (auto& layer : p.decoder) {
    Tensor a = layernorm_rows(tape, x, layer.ln1_g, layer.ln1_b);
    x = add(tape, x,
            detail::attention(tape, layer.self_attn, a, a, p.config.attention_heads, true,
                              dec_offsets, dec_offsets));
    Tensor c = layernorm_rows(tape, x, layer.ln2_g, layer.ln2_b);
    x = add(tape, x,
            detail::attention(tape, layer.cross_attn, c, e_p, p.config.attention_heads, false,
                              dec_offsets, enc_offsets));
    Tensor f = layernorm_rows(tape, x, layer.ln3_g, layer.ln3_b);
    x = add(tape, x, detail::ffn_block(tape, layer.ffn, f));
  }
  x = layernorm_rows(tape, x, p.dec_ln_g, p.dec_ln_b);
  Tensor logits = detail::linear(tape, x, p.out_w, p.out_b);
  return softmax_rows(tape, logits);
}

inline Tensor decode_teacher_forced(Tape& tape, ModelParams& p, const Tensor& e_p,
                                    const std::vector<int>& tgt_tokens) {
  return decode_teacher_forced_segments(tape, p, e_p, {0, e_p.rows()}, {tgt_tokens});
}

// Greedy autoregressive decode from BOS; stops at EOS or after max_len tokens.
// Ties break toward the lowest token id. Returns the generated tokens without
// BOS/EOS.
inline std::vector<int> greedy_decode(ModelParams& p, const Tensor& e_p, size_t max_len) {
  expect(max_len + 1 <= static_cast<size_t>(p.config.max_positions), Errc::InvalidArgument,
         "greedy_decode: max_len exceeds max_positions");
  std::vector<int> tokens{kBos};
  std::vector<int> out;
  for (size_t step = 0; step < max_len; ++step) {
    Tape tape;
    std::vector<int> probe = tokens;
    probe.push_back(kEos);  // placeholder final target; only the inputs matter
    Tensor probs = decode_teacher_forced(tape, p, e_p, probe);
    const size_t last = probs.rows() - 1;
    int best = 0;
    double best_p = probs.at(last, 0);
    for (size_t j = 1; j < probs.cols(); ++j)
      if (probs.at(last, j) > best_p) {
        best_p = probs.at(last, j);
        best = static_cast<int>(j);
      }
    if (best == kEos) break;
    out.push_back(best);
    tokens.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "MXCK", u16 LE version, u32 LE header length, UTF-8 JSON
// header {meta, params:[{name, shape, offset}]}, then raw 64-bit LE floats.
// Offsets are byte offsets into the payload region. Round trips are bit-exact.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[4] = {'M', 'X', 'C', 'K'};
constexpr uint16_t kCheckpointVersion = 1;

struct CheckpointEntryRef {
  std::string name;
  const Tensor* tensor;
};

inline void write_checkpoint(const std::filesystem::path& path, const ordered_json& meta,
                             const std::vector<CheckpointEntryRef>& entries) {
  ordered_json params = ordered_json::array();
  size_t offset = 0;
  for (const auto& e : entries) {
    params.push_back(
        ordered_json{{"name", e.name}, {"shape", e.tensor->shape}, {"offset", offset}});
    offset += e.tensor->size() * sizeof(double);
  }
  const std::string header = ordered_json{{"meta", meta}, {"params", params}}.dump();
  std::string bytes;
  bytes.reserve(10 + header.size() + offset);
  bytes.append(kCheckpointMagic, 4);
  detail::put_le<uint16_t>(bytes, kCheckpointVersion);
  detail::put_le<uint32_t>(bytes, static_cast<uint32_t>(header.size()));
  bytes.append(header);
  for (const auto& e : entries) {
    const auto& values = *e.tensor->data;
    const size_t start = bytes.size();
    bytes.resize(start + values.size() * sizeof(double));
    std::memcpy(bytes.data() + start, values.data(), values.size() * sizeof(double));
  }
  detail::write_file_bytes(path, bytes);
}

struct Checkpoint {
  ordered_json meta;
  std::vector<std::pair<std::string, Tensor>> entries;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  }
};

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  expect(bytes.size() >= 10, Errc::Truncated, "checkpoint truncated header: " + path.string());
  expect(std::memcmp(bytes.data(), kCheckpointMagic, 4) == 0, Errc::BadMagic,
         "checkpoint bad magic: " + path.string());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint16_t version = detail::get_le<uint16_t>(raw + 4);
  expect(version == kCheckpointVersion, Errc::BadVersion,
         "checkpoint version mismatch (" + std::to_string(version) + "): " + path.string());
  const uint32_t header_len = detail::get_le<uint32_t>(raw + 6);
  expect(bytes.size() >= 10 + static_cast<size_t>(header_len), Errc::Truncated,
         "checkpoint truncated JSON header: " + path.string());
  ordered_json header =
      ordered_json::parse(bytes.substr(10, header_len), nullptr, /*allow_exceptions=*/false);
  expect(!header.is_discarded() && header.contains("params") && header.contains("meta"),
         Errc::BadVersion, "checkpoint malformed header: " + path.string());
  const size_t payload_start = 10 + header_len;
  Checkpoint ckpt;
  ckpt.meta = header["meta"];
  for (const auto& entry : header["params"]) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<size_t>>();
    const size_t offset = entry.at("offset").get<size_t>();
    Tensor t = Tensor::zeros(shape);
    const size_t bytes_needed = t.size() * sizeof(double);
    expect(payload_start + offset + bytes_needed <= bytes.size(), Errc::Truncated,
           "checkpoint truncated payload at parameter '" + name + "': " + path.string());
    std::memcpy(t.data->data(), bytes.data() + payload_start + offset, bytes_needed);
    ckpt.entries.emplace_back(name, std::move(t));
  }
  return ckpt;
}

// Rebuilds model parameters from a checkpoint produced by the train pipeline.
// Shape disagreements are reported with the offending parameter's name.
inline ModelParams load_model_params(const Checkpoint& ckpt) {
  expect(ckpt.meta.contains("model_config"), Errc::BadVersion,
         "checkpoint meta is missing model_config");
  ModelParams params = init_model(ModelConfig::from_json(ckpt.meta.at("model_config")), 0);
  for (auto& [name, dst] : params.named()) {
    const Tensor* src = ckpt.find("param." + name);
    expect(src != nullptr, Errc::BadVersion, "checkpoint is missing parameter '" + name + "'");
    expect(src->shape == dst->shape, Errc::ShapeMismatch,
           "checkpoint parameter '" + name + "' has shape " + shape_str(src->shape) +
               ", expected " + shape_str(dst->shape));
    *dst->data = *src->data;
  }
  return params;
}

}  // namespace mixspeech
