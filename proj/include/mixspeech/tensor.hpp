// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense double tensors.
// A Tape records matrix-granular primitive ops as they execute (define-by-run)
// and replays them in reverse to accumulate exact gradients. Tapes are built
// fresh for every forward pass and are confined to one thread; Tensors that
// carry no tape handle are plain values and may be shared read-only.
#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "mixspeech/common.hpp"

namespace mixspeech {

// log() is guarded so loss terms never produce -inf. Inputs at or below the
// guard have derivative zero.
constexpr double kLogGuard = 1e-12;
constexpr double kLayerNormEps = 1e-5;
// Additive mask value for attention logits; exp() underflows it to exactly 0.
constexpr double kMaskedLogit = -1e30;

class Tape;

namespace detail {
// std::allocator with default-initialization: vector<double, ...>(n) skips the
// zero fill. Ops that fully overwrite their output use it via Tensor::uninit.
template <class T>
struct DefaultInitAlloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = DefaultInitAlloc<U>;
  };
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0)
      ::new (static_cast<void*>(p)) U;
    else
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
}  // namespace detail

using Buffer = std::vector<double, detail::DefaultInitAlloc<double>>;

struct Tensor {
  std::vector<size_t> shape;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Buffer> grad;   // shape-congruent with data when present
  int node = -1;              // handle into the tape that produced this tensor
  const Tape* tape = nullptr; // owner of `node`; other tapes treat this tensor as a constant

  Tensor() = default;

  static Tensor zeros(std::vector<size_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<Buffer>(check_shape(t.shape), 0.0);
    return t;
  }

  // Storage without the zero fill, for ops that write every element.
  static Tensor uninit(std::vector<size_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<Buffer>(check_shape(t.shape));
    return t;
  }

  static Tensor from(std::vector<size_t> shape, const std::vector<double>& values) {
    Tensor t;
    t.shape = std::move(shape);
    expect(check_shape(t.shape) == values.size(), Errc::ShapeMismatch,
           "tensor: value count does not match shape");
    t.data = std::make_shared<Buffer>(values.begin(), values.end());
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  size_t size() const { return data ? data->size() : 0; }
  size_t rows() const { return shape.size() == 2 ? shape[0] : 0; }
  size_t cols() const { return shape.size() == 2 ? shape[1] : 0; }
  double& at(size_t r, size_t c) { return (*data)[r * shape[1] + c]; }
  double at(size_t r, size_t c) const { return (*data)[r * shape[1] + c]; }
  double item() const {
    expect(size() == 1, Errc::InvalidArgument, "tensor: item() on non-scalar");
    return (*data)[0];
  }

  // plain-vector copies, mainly for tests and serialization
  std::vector<double> values() const { return {data->begin(), data->end()}; }
  std::vector<double> grad_values() const { return {grad->begin(), grad->end()}; }

  bool has_grad() const { return static_cast<bool>(grad); }
  void ensure_grad() {
    if (!grad) grad = std::make_shared<Buffer>(size(), 0.0);
  }
  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  }

  // Detached copy of the values (no tape handle, no grad).
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<Buffer>(*data);
    return t;
  }

 private:
  static size_t check_shape(const std::vector<size_t>& shape) {
    expect(!shape.empty(), Errc::ShapeMismatch, "tensor: empty shape");
    size_t n = 1;
    for (size_t d : shape) {
      expect(d > 0, Errc::ShapeMismatch, "tensor: zero-sized dimension");
      n *= d;
    }
    return n;
  }
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn_acc(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T, with B stored as [n,k]. Eight explicit accumulator
// lanes keep the dot products SIMD-friendly with a fixed summation order.
inline void mm_nt_acc(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
      size_t p = 0;
      for (; p + 8 <= k; p += 8)
        for (size_t l = 0; l < 8; ++l) lanes[l] += ai[p + l] * bj[p + l];
      double acc =
          ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
      for (; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C[m,n] += A^T * B, with A stored as [k,m]
inline void mm_tn_acc(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
  for (size_t r = 0; r < k; ++r) {
    const double* ar = a + r * m;
    const double* br = b + r * n;
    for (size_t i = 0; i < m; ++i) {
      const double ari = ar[i];
      double* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += ari * br[j];
    }
  }
}

}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable leaf. backward() accumulates d(loss)/d(t) into
  // t.grad. The tensor itself is not modified here, so several tapes (one per
  // thread) may watch the same parameter concurrently.
  void watch(Tensor& t) {
    expect(t.data != nullptr, Errc::InvalidArgument, "watch: tensor has no storage");
    const void* key = t.data.get();
    if (leaf_index_.count(key)) return;
    Node node;
    node.size = t.size();
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    leaf_index_.emplace(key, static_cast<int>(watched_.size()));
    watched_.push_back({id, &t});
  }

  // Gradient of `loss` (a scalar recorded on this tape) with respect to every
  // watched leaf, accumulated into the leaves' grad buffers. Calling twice
  // without zeroing grads adds the gradients again.
  void backward(const Tensor& loss) {
    run_backward(loss);
    for (auto& w : watched_) {
      w.tensor->ensure_grad();
      const auto& adj = adjoints_[static_cast<size_t>(w.node)];
      if (adj.empty()) continue;
      auto& g = *w.tensor->grad;
      for (size_t i = 0; i < g.size(); ++i) g[i] += adj[i];
    }
  }

  // Two-phase variant for parallel batches: computes adjoints but leaves the
  // watched tensors untouched. Contributions are read with leaf_adjoint() and
  // merged by the caller in a fixed order.
  void backward_nowrite(const Tensor& loss) { run_backward(loss); }

  // Adjoint of a watched leaf after backward_nowrite(); nullptr when the loss
  // does not depend on it.
  const Buffer* leaf_adjoint(const Tensor& t) const {
    auto it = leaf_index_.find(t.data.get());
    if (it == leaf_index_.end()) return nullptr;
    const auto& adj = adjoints_[static_cast<size_t>(watched_[static_cast<size_t>(it->second)].node)];
    return adj.empty() ? nullptr : &adj;
  }

  size_t node_count() const { return nodes_.size(); }

  // --- used by the primitive ops ---

  int input_id(const Tensor& t) const {
    if (t.tape == this && t.node >= 0) return t.node;
    auto it = leaf_index_.find(t.data.get());
    if (it != leaf_index_.end()) return watched_[static_cast<size_t>(it->second)].node;
    return -1;  // constant: no gradient flows into it
  }

  using BackwardFn = std::function<void(Tape&, int self)>;

  void record(Tensor& out, std::array<int, 2> inputs, BackwardFn back) {
    Node node;
    node.in = inputs;
    node.size = out.size();
    node.back = std::move(back);
    out.node = static_cast<int>(nodes_.size());
    out.tape = this;
    nodes_.push_back(std::move(node));
  }

  const Buffer& adjoint(int id) const { return adjoints_[static_cast<size_t>(id)]; }

  // Zero-initialized adjoint buffer of node `id`; backward fns accumulate into it.
  double* adj_buf(int id, size_t n) {
    auto& v = adjoints_[static_cast<size_t>(id)];
    if (v.empty()) v.assign(n, 0.0);
    return v.data();
  }

 private:
  struct Node {
    std::array<int, 2> in{{-1, -1}};
    size_t size = 0;
    BackwardFn back;  // empty for leaves
  };

  struct Watched {
    int node;
    Tensor* tensor;
  };

  void run_backward(const Tensor& loss) {
    expect(loss.tape == this && loss.node >= 0, Errc::InvalidArgument,
           "backward: loss was not recorded on this tape");
    expect(loss.size() == 1, Errc::InvalidArgument,
           "backward: loss must be a scalar, got shape " + shape_str(loss.shape));
    adjoints_.assign(nodes_.size(), {});
    adjoints_[static_cast<size_t>(loss.node)] = {1.0};
    for (int i = loss.node; i >= 0; --i) {
      auto& node = nodes_[static_cast<size_t>(i)];
      if (adjoints_[static_cast<size_t>(i)].empty() || !node.back) continue;
      node.back(*this, i);
    }
  }

  std::vector<Node> nodes_;
  std::vector<Buffer> adjoints_;
  std::vector<Watched> watched_;
  std::unordered_map<const void*, int> leaf_index_;  // data ptr -> index into watched_
};

namespace detail {

inline void expect_2d(const char* op, const Tensor& t) {
  expect(t.shape.size() == 2, Errc::ShapeMismatch,
         std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape));
}

inline void expect_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  expect(a.shape == b.shape, Errc::ShapeMismatch,
         std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* /*op*/, Tape& tape, const Tensor& a, Fwd fwd, Bwd make_back) {
  Tensor out = Tensor::uninit(a.shape);
  const auto& x = *a.data;
  auto& y = *out.data;
  for (size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  const int ia = tape.input_id(a);
  tape.record(out, {ia, -1}, make_back(ia, a.data, out.data));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. Each checks its preconditions, computes the forward value and
// records a node so that backward() yields exact gradients of any downstream
// scalar.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_2d("matmul", a);
  detail::expect_2d("matmul", b);
  expect(a.cols() == b.rows(), Errc::ShapeMismatch,
         "matmul: inner dimensions disagree: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  detail::mm_nn_acc(out.data->data(), a.data->data(), b.data->data(), m, k, n);
  const int ia = tape.input_id(a), ib = tape.input_id(b);
  auto av = a.data, bv = b.data;
  tape.record(out, {ia, ib}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    if (ia >= 0) detail::mm_nt_acc(t.adj_buf(ia, m * k), g, bv->data(), m, n, k);
    if (ib >= 0) detail::mm_tn_acc(t.adj_buf(ib, k * n), av->data(), g, k, m, n);
  });
  return out;
}

// Fused x*W + b with the bias broadcast over rows. One node instead of a
// matmul/add pair; the hot path in every attention and feed-forward block.
inline Tensor affine(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::expect_2d("affine", x);
  detail::expect_2d("affine", w);
  expect(x.cols() == w.rows(), Errc::ShapeMismatch,
         "affine: inner dimensions disagree: " + shape_str(x.shape) + " vs " + shape_str(w.shape));
  expect(b.shape == std::vector<size_t>{w.cols()}, Errc::ShapeMismatch,
         "affine: bias must be [" + std::to_string(w.cols()) + "], got " + shape_str(b.shape));
  const size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor out = Tensor::uninit({m, n});
  for (size_t i = 0; i < m; ++i)
    std::memcpy(&(*out.data)[i * n], b.data->data(), n * sizeof(double));
  detail::mm_nn_acc(out.data->data(), x.data->data(), w.data->data(), m, k, n);
  const int ix = tape.input_id(x), iw = tape.input_id(w), ib = tape.input_id(b);
  auto xv = x.data, wv = w.data;
  tape.record(out, {ix, iw}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    if (ix >= 0) detail::mm_nt_acc(t.adj_buf(ix, m * k), g, wv->data(), m, n, k);
    if (iw >= 0) detail::mm_tn_acc(t.adj_buf(iw, k * n), xv->data(), g, k, m, n);
    if (ib >= 0) {
      double* db = t.adj_buf(ib, n);
      for (size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        for (size_t j = 0; j < n; ++j) db[j] += gi[j];
      }
    }
  });
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  detail::expect_2d("transpose", a);
  const size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::uninit({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) (*out.data)[j * m + i] = (*a.data)[i * n + j];
  const int ia = tape.input_id(a);
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double* g = t.adjoint(self).data();
    double* da = t.adj_buf(ia, m * n);
    for (size_t j = 0; j < n; ++j)
      for (size_t i = 0; i < m; ++i) da[i * n + j] += g[j * m + i];
  });
  return out;
}

// add with broadcasting over leading axes: b.shape must equal a suffix of
// a.shape (identical shapes included).
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool suffix = b.shape.size() <= a.shape.size() &&
                      std::equal(b.shape.begin(), b.shape.end(),
                                 a.shape.end() - static_cast<long>(b.shape.size()));
  expect(suffix, Errc::ShapeMismatch,
         "add: " + shape_str(b.shape) + " does not broadcast over " + shape_str(a.shape));
  const size_t bn = b.size();
  Tensor out = Tensor::uninit(a.shape);
  const auto& xa = *a.data;
  const auto& xb = *b.data;
  auto& y = *out.data;
  for (size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i % bn];
  const int ia = tape.input_id(a), ib = tape.input_id(b);
  const size_t an = a.size();
  tape.record(out, {ia, ib}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    if (ia >= 0) {
      double* da = t.adj_buf(ia, an);
      for (size_t i = 0; i < an; ++i) da[i] += g[i];
    }
    if (ib >= 0) {
      double* db = t.adj_buf(ib, bn);
      for (size_t i = 0; i < an; ++i) db[i % bn] += g[i];
    }
  });
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_same_shape("sub", a, b);
  Tensor out = Tensor::uninit(a.shape);
  const auto& xa = *a.data;
  const auto& xb = *b.data;
  auto& y = *out.data;
  for (size_t i = 0; i < y.size(); ++i) y[i] = xa[i] - xb[i];
  const int ia = tape.input_id(a), ib = tape.input_id(b);
  const size_t n = a.size();
  tape.record(out, {ia, ib}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    if (ia >= 0) {
      double* da = t.adj_buf(ia, n);
      for (size_t i = 0; i < n; ++i) da[i] += g[i];
    }
    if (ib >= 0) {
      double* db = t.adj_buf(ib, n);
      for (size_t i = 0; i < n; ++i) db[i] -= g[i];
    }
  });
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_same_shape("mul", a, b);
  Tensor out = Tensor::uninit(a.shape);
  const auto& xa = *a.data;
  const auto& xb = *b.data;
  auto& y = *out.data;
  for (size_t i = 0; i < y.size(); ++i) y[i] = xa[i] * xb[i];
  const int ia = tape.input_id(a), ib = tape.input_id(b);
  auto av = a.data, bv = b.data;
  const size_t n = a.size();
  tape.record(out, {ia, ib}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    if (ia >= 0) {
      double* da = t.adj_buf(ia, n);
      const double* xb2 = bv->data();
      for (size_t i = 0; i < n; ++i) da[i] += g[i] * xb2[i];
    }
    if (ib >= 0) {
      double* db = t.adj_buf(ib, n);
      const double* xa2 = av->data();
      for (size_t i = 0; i < n; ++i) db[i] += g[i] * xa2[i];
    }
  });
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  Tensor out = Tensor::uninit(a.shape);
  const auto& x = *a.data;
  auto& y = *out.data;
  for (size_t i = 0; i < x.size(); ++i) y[i] = c * x[i];
  const int ia = tape.input_id(a);
  const size_t n = a.size();
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double* g = t.adjoint(self).data();
    double* da = t.adj_buf(ia, n);
    for (size_t i = 0; i < n; ++i) da[i] += c * g[i];
  });
  return out;
}

inline Tensor tanh(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      "tanh", tape, a, [](double x) { return std::tanh(x); },
      [](int ia, std::shared_ptr<Buffer>, std::shared_ptr<Buffer> yv) {
        return [=](Tape& t, int self) {
          if (ia < 0) return;
          const double* g = t.adjoint(self).data();
          const double* y = yv->data();
          double* da = t.adj_buf(ia, yv->size());
          for (size_t i = 0; i < yv->size(); ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
        };
      });
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      "relu", tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](int ia, std::shared_ptr<Buffer> xv, std::shared_ptr<Buffer>) {
        return [=](Tape& t, int self) {
          if (ia < 0) return;
          const double* g = t.adjoint(self).data();
          const double* x = xv->data();
          double* da = t.adj_buf(ia, xv->size());
          for (size_t i = 0; i < xv->size(); ++i)
            if (x[i] > 0.0) da[i] += g[i];
        };
      });
}

inline Tensor exp(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      "exp", tape, a, [](double x) { return std::exp(x); },
      [](int ia, std::shared_ptr<Buffer>, std::shared_ptr<Buffer> yv) {
        return [=](Tape& t, int self) {
          if (ia < 0) return;
          const double* g = t.adjoint(self).data();
          const double* y = yv->data();
          double* da = t.adj_buf(ia, yv->size());
          for (size_t i = 0; i < yv->size(); ++i) da[i] += g[i] * y[i];
        };
      });
}

inline Tensor log(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      "log", tape, a, [](double x) { return std::log(x > kLogGuard ? x : kLogGuard); },
      [](int ia, std::shared_ptr<Buffer> xv, std::shared_ptr<Buffer>) {
        return [=](Tape& t, int self) {
          if (ia < 0) return;
          const double* g = t.adjoint(self).data();
          const double* x = xv->data();
          double* da = t.adj_buf(ia, xv->size());
          for (size_t i = 0; i < xv->size(); ++i)
            if (x[i] > kLogGuard) da[i] += g[i] / x[i];
        };
      });
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
  detail::expect_2d("softmax_rows", a);
  const size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::uninit(a.shape);
  const auto& x = *a.data;
  auto& y = *out.data;
  for (size_t i = 0; i < r; ++i) {
    const double* xi = &x[i * c];
    double* yi = &y[i * c];
    double mx = xi[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (size_t j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const double inv = 1.0 / sum;
    for (size_t j = 0; j < c; ++j) yi[j] *= inv;
  }
  const int ia = tape.input_id(a);
  auto yv = out.data;
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double* g = t.adjoint(self).data();
    const double* yy = yv->data();
    double* da = t.adj_buf(ia, r * c);
    for (size_t i = 0; i < r; ++i) {
      const double* gi = g + i * c;
      const double* yi = yy + i * c;
      double dot = 0.0;
      for (size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
      double* di = da + i * c;
      for (size_t j = 0; j < c; ++j) di[j] += yi[j] * (gi[j] - dot);
    }
  });
  return out;
}

// Sets entries above the diagonal of a square score matrix to a large negative
// value, so a following softmax assigns them probability exactly zero.
inline Tensor causal_mask(Tape& tape, const Tensor& a) {
  detail::expect_2d("causal_mask", a);
  expect(a.rows() == a.cols(), Errc::ShapeMismatch,
         "causal_mask: expected square scores, got " + shape_str(a.shape));
  const size_t n = a.rows();
  Tensor out = Tensor::uninit(a.shape);
  const auto& x = *a.data;
  auto& y = *out.data;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) y[i * n + j] = j <= i ? x[i * n + j] : kMaskedLogit;
  const int ia = tape.input_id(a);
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double* g = t.adjoint(self).data();
    double* da = t.adj_buf(ia, n * n);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j <= i; ++j) da[i * n + j] += g[i * n + j];
  });
  return out;
}

// Gathers rows of an embedding table.
inline Tensor embed(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  detail::expect_2d("embed", table);
  expect(!ids.empty(), Errc::InvalidArgument, "embed: empty id sequence");
  const size_t v = table.rows(), h = table.cols();
  for (int id : ids)
    expect(id >= 0 && static_cast<size_t>(id) < v, Errc::InvalidArgument,
           "embed: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  Tensor out = Tensor::uninit({ids.size(), h});
  for (size_t t = 0; t < ids.size(); ++t)
    std::memcpy(&(*out.data)[t * h], &(*table.data)[static_cast<size_t>(ids[t]) * h],
                h * sizeof(double));
  const int it = tape.input_id(table);
  auto ids_copy = ids;
  tape.record(out, {it, -1}, [=](Tape& t, int self) {
    if (it < 0) return;
    const double* g = t.adjoint(self).data();
    double* dt = t.adj_buf(it, v * h);
    for (size_t s = 0; s < ids_copy.size(); ++s) {
      double* row = dt + static_cast<size_t>(ids_copy[s]) * h;
      const double* gs = g + s * h;
      for (size_t j = 0; j < h; ++j) row[j] += gs[j];
    }
  });
  return out;
}

// Concatenation along the last (feature) axis of two 2-d tensors.
inline Tensor concat_features(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::expect_2d("concat_features", a);
  detail::expect_2d("concat_features", b);
  expect(a.rows() == b.rows(), Errc::ShapeMismatch,
         "concat_features: row counts disagree: " + shape_str(a.shape) + " vs " +
             shape_str(b.shape));
  const size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out = Tensor::uninit({r, ca + cb});
  for (size_t i = 0; i < r; ++i) {
    std::memcpy(&(*out.data)[i * (ca + cb)], &(*a.data)[i * ca], ca * sizeof(double));
    std::memcpy(&(*out.data)[i * (ca + cb) + ca], &(*b.data)[i * cb], cb * sizeof(double));
  }
  const int ia = tape.input_id(a), ib = tape.input_id(b);
  tape.record(out, {ia, ib}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    if (ia >= 0) {
      double* da = t.adj_buf(ia, r * ca);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < ca; ++j) da[i * ca + j] += g[i * (ca + cb) + j];
    }
    if (ib >= 0) {
      double* db = t.adj_buf(ib, r * cb);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < cb; ++j) db[i * cb + j] += g[i * (ca + cb) + ca + j];
    }
  });
  return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& a, size_t start, size_t len) {
  detail::expect_2d("slice_cols", a);
  expect(start + len <= a.cols() && len > 0, Errc::ShapeMismatch,
         "slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
             ") out of range for " + shape_str(a.shape));
  const size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::uninit({r, len});
  for (size_t i = 0; i < r; ++i)
    std::memcpy(&(*out.data)[i * len], &(*a.data)[i * c + start], len * sizeof(double));
  const int ia = tape.input_id(a);
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double* g = t.adjoint(self).data();
    double* da = t.adj_buf(ia, r * c);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < len; ++j) da[i * c + start + j] += g[i * len + j];
  });
  return out;
}

// out[t] = a[t, ids[t]]; one element per row.
inline Tensor gather_cols(Tape& tape, const Tensor& a, const std::vector<int>& ids) {
  detail::expect_2d("gather_cols", a);
  expect(ids.size() == a.rows(), Errc::ShapeMismatch,
         "gather_cols: need one column index per row of " + shape_str(a.shape));
  const size_t r = a.rows(), c = a.cols();
  for (int id : ids)
    expect(id >= 0 && static_cast<size_t>(id) < c, Errc::InvalidArgument,
           "gather_cols: column " + std::to_string(id) + " out of range [0," + std::to_string(c) +
               ")");
  Tensor out = Tensor::uninit({r});
  for (size_t t = 0; t < r; ++t) (*out.data)[t] = (*a.data)[t * c + static_cast<size_t>(ids[t])];
  const int ia = tape.input_id(a);
  auto ids_copy = ids;
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double* g = t.adjoint(self).data();
    double* da = t.adj_buf(ia, r * c);
    for (size_t s = 0; s < r; ++s) da[s * c + static_cast<size_t>(ids_copy[s])] += g[s];
  });
  return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  (*out.data)[0] = std::accumulate(a.data->begin(), a.data->end(), 0.0);
  const int ia = tape.input_id(a);
  const size_t n = a.size();
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double g = t.adjoint(self)[0];
    double* da = t.adj_buf(ia, n);
    for (size_t i = 0; i < n; ++i) da[i] += g;
  });
  return out;
}

inline Tensor mean_all(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  const size_t n = a.size();
  (*out.data)[0] = std::accumulate(a.data->begin(), a.data->end(), 0.0) / static_cast<double>(n);
  const int ia = tape.input_id(a);
  tape.record(out, {ia, -1}, [=](Tape& t, int self) {
    if (ia < 0) return;
    const double g = t.adjoint(self)[0] / static_cast<double>(n);
    double* da = t.adj_buf(ia, n);
    for (size_t i = 0; i < n; ++i) da[i] += g;
  });
  return out;
}

// Row-wise layer normalization with learned gain and bias.
inline Tensor layernorm_rows(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias) {
  detail::expect_2d("layernorm_rows", x);
  expect(gain.shape == std::vector<size_t>{x.cols()} && bias.shape == gain.shape,
         Errc::ShapeMismatch,
         "layernorm_rows: gain/bias must be [" + std::to_string(x.cols()) + "], got " +
             shape_str(gain.shape) + " and " + shape_str(bias.shape));
  const size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::uninit(x.shape);
  auto xhat = std::make_shared<Buffer>(r * c);
  auto inv_std = std::make_shared<Buffer>(r);
  const auto& xv = *x.data;
  const auto& gv = *gain.data;
  auto& y = *out.data;
  for (size_t i = 0; i < r; ++i) {
    const double* xi = &xv[i * c];
    double mu = 0.0;
    for (size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[i] = is;
    for (size_t j = 0; j < c; ++j) {
      const double xh = (xi[j] - mu) * is;
      (*xhat)[i * c + j] = xh;
      y[i * c + j] = gv[j] * xh;
    }
  }
  const int ix = tape.input_id(x), ig = tape.input_id(gain);
  auto gv_p = gain.data;
  // One node covers (x, gain); the bias term is routed through add() below so
  // every node keeps at most two inputs.
  tape.record(out, {ix, ig}, [=](Tape& t, int self) {
    const double* g = t.adjoint(self).data();
    const double* xh = xhat->data();
    if (ig >= 0) {
      double* dg = t.adj_buf(ig, c);
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) dg[j] += g[i * c + j] * xh[i * c + j];
    }
    if (ix >= 0) {
      double* dx = t.adj_buf(ix, r * c);
      const double* gw = gv_p->data();
      for (size_t i = 0; i < r; ++i) {
        const double* gi = g + i * c;
        const double* xhi = xh + i * c;
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t j = 0; j < c; ++j) {
          const double dxh = gi[j] * gw[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhi[j];
        }
        const double inv_c = 1.0 / static_cast<double>(c);
        const double is = (*inv_std)[i];
        for (size_t j = 0; j < c; ++j) {
          const double dxh = gi[j] * gw[j];
          dx[i * c + j] += is * (dxh - inv_c * sum_dxhat - xhi[j] * inv_c * sum_dxhat_xhat);
        }
      }
    }
  });
  return add(tape, out, bias);
}

}  // namespace mixspeech
