// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Random composed-graph generator for gradient checking. A graph is sampled
// once as a replayable recipe so the finite-difference oracle can re-evaluate
// the same computation after nudging a leaf value.
#pragma once

#include <cstdint>
#include <vector>

#include "mixspeech/rng.hpp"
#include "mixspeech/tensor.hpp"

namespace testgraph {

using mixspeech::Rng;
using mixspeech::Tape;
using mixspeech::Tensor;

enum class OpKind {
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Tanh,
  Relu,
  ExpOfTanh,  // exp(tanh(x)): keeps magnitudes bounded
  LogOfExp,   // log(exp(tanh(x))): exercises log on safely positive input
  SoftmaxRows,
  LogSoftmax,  // log(softmax_rows(tanh(x))): bounded logits keep FD stable
  CausalMask,
  Embed,
  ConcatFeatures,
  SliceCols,
  GatherCols,
  Transpose,
  LayerNorm,
  MeanAll,
};

struct Instr {
  OpKind kind;
  int a = -1, b = -1, c = -1;  // operand slots (c: layernorm bias)
  double scalar = 1.0;
  size_t start = 0, len = 0;
  std::vector<int> ids;
};

struct Recipe {
  std::vector<std::vector<size_t>> leaf_shapes;
  std::vector<Instr> instrs;
  int loss_a = -1, loss_b = -1;  // loss = 0.5*mean(a) + 0.5*mean(b)
};

// Builds a random recipe with `n_leaves` 2-d leaves and roughly `n_ops` ops.
inline Recipe make_recipe(uint64_t seed, int n_leaves, int n_ops) {
  Rng rng(seed);
  Recipe r;
  std::vector<std::vector<size_t>> shapes;  // per slot
  for (int i = 0; i < n_leaves; ++i) {
    const size_t rows = static_cast<size_t>(rng.uniform_int(1, 4));
    const size_t cols = static_cast<size_t>(rng.uniform_int(1, 4));
    r.leaf_shapes.push_back({rows, cols});
    shapes.push_back({rows, cols});
  }
  auto pick_2d = [&]() -> int {
    for (int tries = 0; tries < 64; ++tries) {
      const int s = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(shapes.size()) - 1));
      if (shapes[static_cast<size_t>(s)].size() == 2) return s;
    }
    return 0;
  };
  for (int k = 0; k < n_ops; ++k) {
    Instr in;
    const int a = pick_2d();
    const auto sa = shapes[static_cast<size_t>(a)];
    in.a = a;
    switch (rng.uniform_int(0, 13)) {
      case 0: {  // matmul with a fresh-shaped partner
        int b = pick_2d();
        // find any slot with rows == sa.cols
        bool found = false;
        for (int tries = 0; tries < 64 && !found; ++tries) {
          b = pick_2d();
          found = shapes[static_cast<size_t>(b)][0] == sa[1];
        }
        if (!found) continue;
        in.kind = OpKind::MatMul;
        in.b = b;
        shapes.push_back({sa[0], shapes[static_cast<size_t>(b)][1]});
        break;
      }
      case 1: {
        int b = -1;
        for (int tries = 0; tries < 64; ++tries) {
          const int cand = pick_2d();
          if (shapes[static_cast<size_t>(cand)] == sa) {
            b = cand;
            break;
          }
        }
        if (b < 0) continue;
        in.kind = rng.uniform01() < 0.5 ? OpKind::Add : (rng.uniform01() < 0.5 ? OpKind::Sub : OpKind::Mul);
        in.b = b;
        shapes.push_back(sa);
        break;
      }
      case 2:
        in.kind = OpKind::Scale;
        in.scalar = 0.25 + rng.uniform01();
        shapes.push_back(sa);
        break;
      case 3:
        in.kind = OpKind::Tanh;
        shapes.push_back(sa);
        break;
      case 4:
        in.kind = OpKind::Relu;
        shapes.push_back(sa);
        break;
      case 5:
        in.kind = rng.uniform01() < 0.5 ? OpKind::ExpOfTanh : OpKind::LogOfExp;
        shapes.push_back(sa);
        break;
      case 6:
        in.kind = rng.uniform01() < 0.5 ? OpKind::SoftmaxRows : OpKind::LogSoftmax;
        shapes.push_back(sa);
        break;
      case 7:
        if (sa[0] != sa[1]) continue;
        in.kind = OpKind::CausalMask;
        shapes.push_back(sa);
        break;
      case 8: {  // embed: treat `a` as a table
        in.kind = OpKind::Embed;
        const size_t n = static_cast<size_t>(rng.uniform_int(1, 4));
        for (size_t i = 0; i < n; ++i)
          in.ids.push_back(static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(sa[0]) - 1)));
        shapes.push_back({n, sa[1]});
        break;
      }
      case 9: {
        int b = -1;
        for (int tries = 0; tries < 64; ++tries) {
          const int cand = pick_2d();
          if (shapes[static_cast<size_t>(cand)][0] == sa[0]) {
            b = cand;
            break;
          }
        }
        if (b < 0) continue;
        in.kind = OpKind::ConcatFeatures;
        in.b = b;
        shapes.push_back({sa[0], sa[1] + shapes[static_cast<size_t>(b)][1]});
        break;
      }
      case 10: {
        in.kind = OpKind::SliceCols;
        in.start = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(sa[1]) - 1));
        in.len = static_cast<size_t>(rng.uniform_int(1, static_cast<int64_t>(sa[1] - in.start)));
        shapes.push_back({sa[0], in.len});
        break;
      }
      case 11: {
        in.kind = OpKind::GatherCols;
        for (size_t i = 0; i < sa[0]; ++i)
          in.ids.push_back(static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(sa[1]) - 1)));
        shapes.push_back({sa[0]});
        break;
      }
      case 12:
        in.kind = OpKind::Transpose;
        shapes.push_back({sa[1], sa[0]});
        break;
      case 13:
        in.kind = OpKind::LayerNorm;
        shapes.push_back(sa);
        break;
    }
    r.instrs.push_back(in);
  }
  // loss over the last two 2-d-or-1-d slots
  r.loss_a = static_cast<int>(shapes.size()) - 1;
  r.loss_b = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(shapes.size()) - 1));
  return r;
}

// Executes the recipe on the given leaf tensors; returns the scalar loss.
// When `tape_out`/`watch` are provided the leaves are watched for gradients.
inline double run_recipe(const Recipe& r, std::vector<Tensor>& leaves, Tape* tape_out = nullptr) {
  Tape local;
  Tape& tape = tape_out ? *tape_out : local;
  for (auto& l : leaves) tape.watch(l);
  std::vector<Tensor> slots;
  for (auto& l : leaves) slots.push_back(l);
  for (const auto& in : r.instrs) {
    const Tensor& a = slots[static_cast<size_t>(in.a)];
    switch (in.kind) {
      case OpKind::MatMul:
        slots.push_back(matmul(tape, a, slots[static_cast<size_t>(in.b)]));
        break;
      case OpKind::Add:
        slots.push_back(add(tape, a, slots[static_cast<size_t>(in.b)]));
        break;
      case OpKind::Sub:
        slots.push_back(sub(tape, a, slots[static_cast<size_t>(in.b)]));
        break;
      case OpKind::Mul:
        slots.push_back(mul(tape, a, slots[static_cast<size_t>(in.b)]));
        break;
      case OpKind::Scale:
        slots.push_back(scale(tape, a, in.scalar));
        break;
      case OpKind::Tanh:
        slots.push_back(tanh(tape, a));
        break;
      case OpKind::Relu:
        slots.push_back(relu(tape, a));
        break;
      case OpKind::ExpOfTanh:
        slots.push_back(exp(tape, tanh(tape, a)));
        break;
      case OpKind::LogOfExp:
        slots.push_back(log(tape, exp(tape, tanh(tape, a))));
        break;
      case OpKind::SoftmaxRows:
        slots.push_back(softmax_rows(tape, a));
        break;
      case OpKind::LogSoftmax:
        slots.push_back(log(tape, softmax_rows(tape, tanh(tape, a))));
        break;
      case OpKind::CausalMask:
        slots.push_back(softmax_rows(tape, causal_mask(tape, a)));
        break;
      case OpKind::Embed:
        slots.push_back(embed(tape, a, in.ids));
        break;
      case OpKind::ConcatFeatures:
        slots.push_back(concat_features(tape, a, slots[static_cast<size_t>(in.b)]));
        break;
      case OpKind::SliceCols:
        slots.push_back(slice_cols(tape, a, in.start, in.len));
        break;
      case OpKind::GatherCols:
        slots.push_back(gather_cols(tape, a, in.ids));
        break;
      case OpKind::Transpose:
        slots.push_back(transpose(tape, a));
        break;
      case OpKind::LayerNorm: {
        const size_t width = a.shape[1];
        // deterministic unit gain / zero bias constants; gradient flow through
        // gain/bias is covered by the model tests
        Tensor gain = Tensor::from({width}, std::vector<double>(width, 1.0));
        Tensor bias = Tensor::zeros({width});
        slots.push_back(layernorm_rows(tape, a, gain, bias));
        break;
      }
      case OpKind::MeanAll:
        slots.push_back(mean_all(tape, a));
        break;
    }
  }
  Tensor la = mean_all(tape, slots[static_cast<size_t>(r.loss_a)]);
  Tensor lb = mean_all(tape, slots[static_cast<size_t>(r.loss_b)]);
  Tensor loss = add(tape, scale(tape, la, 0.5), scale(tape, lb, 0.5));
  if (tape_out) tape.backward(loss);
  return loss.item();
}

inline std::vector<Tensor> make_leaves(const Recipe& r, uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> leaves;
  for (const auto& s : r.leaf_shapes) {
    Tensor t = Tensor::zeros(s);
    for (auto& v : *t.data) v = rng.normal();
    leaves.push_back(t);
  }
  return leaves;
}

}  // namespace testgraph
