// SPDX-License-Identifier: Apache-2.0
#include "sure/nn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

#if defined(__x86_64__)
#include <immintrin.h>
#endif

#include "sure/error.hpp"

namespace sure::nn {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

std::vector<double>& scratch_a() {
  thread_local std::vector<double> s;
  return s;
}

std::vector<double>& scratch_b() {
  thread_local std::vector<double> s;
  return s;
}

void transpose_into(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace

namespace {

// Every C element is a chain of fused multiply-adds over p = 0..k-1 in
// order, starting from 0 (or the old value when accumulating). The tiles
// below only change which elements are in flight together, so results are
// independent of m, of the tile path taken and of batch composition.
#if defined(__AVX512F__)
constexpr std::size_t kLanes = 8;
using Vec = __m512d;
inline Vec vload(const double* p) { return _mm512_loadu_pd(p); }
inline void vstore(double* p, Vec v) { _mm512_storeu_pd(p, v); }
inline Vec vzero() { return _mm512_setzero_pd(); }
inline Vec vset1(double x) { return _mm512_set1_pd(x); }
inline Vec vfma(Vec a, Vec b, Vec c) { return _mm512_fmadd_pd(a, b, c); }
#elif defined(__AVX2__) && defined(__FMA__)
constexpr std::size_t kLanes = 4;
using Vec = __m256d;
inline Vec vload(const double* p) { return _mm256_loadu_pd(p); }
inline void vstore(double* p, Vec v) { _mm256_storeu_pd(p, v); }
inline Vec vzero() { return _mm256_setzero_pd(); }
inline Vec vset1(double x) { return _mm256_set1_pd(x); }
inline Vec vfma(Vec a, Vec b, Vec c) { return _mm256_fmadd_pd(a, b, c); }
#else
#define SURE_SCALAR_GEMM 1
#endif

#ifndef SURE_SCALAR_GEMM
// R rows x (W * kLanes) columns of C.
template <std::size_t R, std::size_t W>
inline void tile(std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool accumulate) {
  Vec acc[R][W];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t w = 0; w < W; ++w) acc[r][w] = accumulate ? vload(c + r * n + w * kLanes) : vzero();
  }
  for (std::size_t p = 0; p < k; ++p) {
    Vec bv[W];
    for (std::size_t w = 0; w < W; ++w) bv[w] = vload(b + p * n + w * kLanes);
    for (std::size_t r = 0; r < R; ++r) {
      const Vec av = vset1(a[r * k + p]);
      for (std::size_t w = 0; w < W; ++w) acc[r][w] = vfma(av, bv[w], acc[r][w]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t w = 0; w < W; ++w) vstore(c + r * n + w * kLanes, acc[r][w]);
  }
}

template <std::size_t R>
inline void row_block(std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool accumulate) {
  constexpr std::size_t W = kLanes == 8 ? 4 : 2;  // keeps R*W accumulators in registers
  std::size_t j = 0;
  for (; j + W * kLanes <= n; j += W * kLanes) tile<R, W>(n, k, a, b + j, c + j, accumulate);
  for (; j + kLanes <= n; j += kLanes) tile<R, 1>(n, k, a, b + j, c + j, accumulate);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < R; ++r) {
      double acc = accumulate ? c[r * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[r * k + p], b[p * n + j], acc);
      c[r * n + j] = acc;
    }
  }
}
#endif

}  // namespace

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  if (ta == Trans::yes) {
    transpose_into(a, k, m, scratch_a());
    a = scratch_a().data();
  }
  if (tb == Trans::yes) {
    transpose_into(b, n, k, scratch_b());
    b = scratch_b().data();
  }
#ifdef SURE_SCALAR_GEMM
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[p * n + j], acc);
      c[i * n + j] = acc;
    }
  }
#else
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<4>(n, k, a + i * k, b, c + i * n, accumulate);
  for (; i < m; ++i) row_block<1>(n, k, a + i * k, b, c + i * n, accumulate);
#endif
}

// ---------------------------------------------------------------------------
// Gradients

const Tensor* Gradients::find(const Parameter& p) const noexcept {
  for (const auto& item : items_) {
    if (item.param == &p) return &item.grad;
  }
  return nullptr;
}

const Tensor& Gradients::at(const Parameter& p) const {
  const Tensor* g = find(p);
  if (!g) throw TapeError("no gradient recorded for parameter '" + p.name + "'");
  return *g;
}

double Gradients::global_norm() const noexcept {
  double s = 0.0;
  for (const auto& item : items_) s += item.grad.squared_norm();
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Tape bookkeeping

void Tape::require_open() const {
  if (consumed_) throw TapeError("tape already consumed by backward(); record a new forward pass");
}

const Tape::Node& Tape::node(Var v) const {
  if (v.index >= nodes_.size()) throw TapeError("variable does not belong to this tape");
  return nodes_[v.index];
}

Var Tape::push(std::string op, Tensor value, bool requires_grad, BackwardFn backward) {
  require_open();
  if (check_finite_ && !value.all_finite()) {
    throw NumericError(op, "output " + shape_string(value.shape()) + " contains NaN or Inf");
  }
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.index);
  if (!n.grad_allocated) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.grad_allocated = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_.at(v.index).requires_grad) return;
  Tensor& buf = grad_buffer(v);
  require_same_shape("accumulate", buf, g);
  double* d = buf.data();
  const double* s = g.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] += s[i];
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad_allocated) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

Var Tape::input(Tensor value) { return push("input", std::move(value), false, nullptr); }

Var Tape::param(Parameter& p, bool differentiate) {
  Var v = push("param:" + p.name, p.value, differentiate, [](Tape&, const Tensor&) {});
  nodes_.back().param = &p;
  nodes_.back().param_version = p.version;
  return v;
}

Var Tape::custom(std::string name, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  bool rg = false;
  for (Var in : inputs) rg = rg || requires_grad(in);
  return push(std::move(name), std::move(value), rg, std::move(backward));
}

Gradients Tape::backward(Var output) {
  const Tensor& out = value(output);
  return backward(output, Tensor(out.shape(), 1.0));
}

Gradients Tape::backward(Var output, const Tensor& seed) {
  require_open();
  require_same_shape("backward seed", value(output), seed);
  for (const Node& n : nodes_) {
    if (n.param && n.param->version != n.param_version) {
      throw TapeError("parameter '" + n.param->name + "' was modified after this tape recorded it");
    }
  }
  consumed_ = true;
  if (nodes_[output.index].requires_grad) {
    accumulate(output, seed);
    for (std::size_t i = output.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.grad_allocated || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }
  Gradients grads;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (!n.param || !n.requires_grad) continue;
    Tensor g = n.grad_allocated ? n.grad : Tensor(n.value.shape(), 0.0);
    if (check_finite_ && !g.all_finite()) {
      throw NumericError("backward:" + n.param->name, "gradient contains NaN or Inf");
    }
    // The same parameter may be registered twice; merge so each appears once.
    bool merged = false;
    for (auto& item : grads.items()) {
      if (item.param == n.param) {
        for (std::size_t e = 0; e < g.size(); ++e) item.grad[e] += g[e];
        merged = true;
        break;
      }
    }
    if (!merged) grads.items().push_back({n.param, std::move(g)});
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Primitives

Var Tape::matmul(Var a, Var b, Trans ta, Trans tb) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_rank("matmul", A, 2);
  require_rank("matmul", B, 2);
  const std::size_t m = ta == Trans::no ? A.dim(0) : A.dim(1);
  const std::size_t k = ta == Trans::no ? A.dim(1) : A.dim(0);
  const std::size_t kb = tb == Trans::no ? B.dim(0) : B.dim(1);
  const std::size_t n = tb == Trans::no ? B.dim(1) : B.dim(0);
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Tensor out = Tensor::uninitialized({m, n});
  gemm(ta, tb, m, n, k, A.data(), B.data(), out.data(), false);
  const bool rg = requires_grad(a) || requires_grad(b);
  return push("matmul", std::move(out), rg, [a, b, ta, tb, m, n, k](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      if (ta == Trans::no) {
        gemm(Trans::no, tb == Trans::no ? Trans::yes : Trans::no, m, k, n, g.data(), B.data(), ga.data(), true);
      } else {
        gemm(tb, Trans::yes, k, m, n, B.data(), g.data(), ga.data(), true);
      }
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      if (tb == Trans::no) {
        gemm(ta == Trans::no ? Trans::yes : Trans::no, Trans::no, k, n, m, A.data(), g.data(), gb.data(), true);
      } else {
        gemm(Trans::yes, ta, n, k, m, g.data(), A.data(), gb.data(), true);
      }
    }
  });
}

Var Tape::bmm(Var a, Var b, Trans ta, Trans tb) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_rank("bmm", A, 3);
  require_rank("bmm", B, 3);
  if (A.dim(0) != B.dim(0)) throw ShapeError("bmm: batch extents differ");
  const std::size_t batch = A.dim(0);
  const std::size_t m = ta == Trans::no ? A.dim(1) : A.dim(2);
  const std::size_t k = ta == Trans::no ? A.dim(2) : A.dim(1);
  const std::size_t kb = tb == Trans::no ? B.dim(1) : B.dim(2);
  const std::size_t n = tb == Trans::no ? B.dim(2) : B.dim(1);
  if (k != kb) {
    throw ShapeError("bmm: inner extents differ, " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Tensor out = Tensor::uninitialized({batch, m, n});
  const std::size_t sa = m * k, sb = k * n, sc = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(ta, tb, m, n, k, A.data() + i * sa, B.data() + i * sb, out.data() + i * sc, false);
  }
  const bool rg = requires_grad(a) || requires_grad(b);
  return push("bmm", std::move(out), rg, [=](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < batch; ++i) {
        const double* gi = g.data() + i * sc;
        const double* bi = B.data() + i * sb;
        double* gai = ga.data() + i * sa;
        if (ta == Trans::no) {
          gemm(Trans::no, tb == Trans::no ? Trans::yes : Trans::no, m, k, n, gi, bi, gai, true);
        } else {
          gemm(tb, Trans::yes, k, m, n, bi, gi, gai, true);
        }
      }
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < batch; ++i) {
        const double* gi = g.data() + i * sc;
        const double* ai = A.data() + i * sa;
        double* gbi = gb.data() + i * sb;
        if (tb == Trans::no) {
          gemm(ta == Trans::no ? Trans::yes : Trans::no, Trans::no, k, n, m, ai, gi, gbi, true);
        } else {
          gemm(Trans::yes, ta, n, k, m, gi, ai, gbi, true);
        }
      }
    }
  });
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape("add", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return push("add", std::move(out), requires_grad(a) || requires_grad(b), [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape("mul", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return push("mul", std::move(out), requires_grad(a) || requires_grad(b), [a, b](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Var Tape::scale(Var a, double s) {
  Tensor out = value(a);
  for (double& v : out.values()) v *= s;
  return push("scale", std::move(out), requires_grad(a), [a, s](Tape& t, const Tensor& g) {
    if (!t.requires_grad(a)) return;
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var Tape::add_row(Var x, Var bias) {
  const Tensor& X = value(x);
  const Tensor& Bv = value(bias);
  require_rank("add_row", Bv, 1);
  const std::size_t cols = X.cols();
  if (Bv.size() != cols) {
    throw ShapeError("add_row: bias " + shape_string(Bv.shape()) + " does not match " + shape_string(X.shape()));
  }
  Tensor out = X;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += Bv[c];
  }
  return push("add_row", std::move(out), requires_grad(x) || requires_grad(bias),
              [x, bias, cols](Tape& t, const Tensor& g) {
                t.accumulate(x, g);
                if (t.requires_grad(bias)) {
                  Tensor& gb = t.grad_buffer(bias);
                  for (std::size_t r = 0; r < g.rows(); ++r) {
                    const double* row = g.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += row[c];
                  }
                }
              });
}

Var Tape::relu(Var x) {
  Tensor out = value(x);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return push("relu", std::move(out), requires_grad(x), [x](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    const Tensor& X = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += X[i] > 0.0 ? g[i] : 0.0;
  });
}

Var Tape::dropout(Var x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const Tensor& X = value(x);
  auto mask = std::make_shared<std::vector<double>>(X.size());
  const double keep = 1.0 / (1.0 - rate);
  Tensor out = X;
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0 : keep;
    out[i] *= (*mask)[i];
  }
  return push("dropout", std::move(out), requires_grad(x), [x, mask](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x)) return;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  const Tensor& Bv = value(bias);
  const std::size_t cols = X.cols();
  if (G.size() != cols || Bv.size() != cols) throw ShapeError("layer_norm: gain/bias size must equal row width");
  const std::size_t rows = X.rows();
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out = Tensor::uninitialized(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * G[c] + Bv[c];
    }
  }
  const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  return push("layer_norm", std::move(out), rg, [=](Tape& t, const Tensor& g) {
    const Tensor& G = t.value(gain);
    if (t.requires_grad(gain)) {
      Tensor& gg = t.grad_buffer(gain);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * (*xhat)[r * cols + c];
      }
    }
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    }
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      const double inv_n = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double d = g[r * cols + c] * G[c];
          mean_d += d;
          mean_dx += d * (*xhat)[r * cols + c];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        const double is = (*inv_std)[r];
        for (std::size_t c = 0; c < cols; ++c) {
          const double d = g[r * cols + c] * G[c];
          gx[r * cols + c] += is * (d - mean_d - (*xhat)[r * cols + c] * mean_dx);
        }
      }
    }
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n, double scale) {
  double mx = in[0] * scale;
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i] * scale);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] * scale - mx);
    s += out[i];
  }
  const double inv = 1.0 / s;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace

Var Tape::softmax(Var x) {
  const Tensor& X = value(x);
  const std::size_t cols = X.cols();
  Tensor out = Tensor::uninitialized(X.shape());
  for (std::size_t r = 0; r < X.rows(); ++r) softmax_row(X.data() + r * cols, out.data() + r * cols, cols, 1.0);
  Var self = push("softmax", std::move(out), requires_grad(x), nullptr);
  if (requires_grad(x)) {
    nodes_.back().backward = [x, self, cols](Tape& t, const Tensor& g) {
      const Tensor& P = t.value(self);
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t r = 0; r < P.rows(); ++r) {
        const double* p = P.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * p[c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += p[c] * (gr[c] - dot);
      }
    };
  }
  return self;
}

Var Tape::causal_softmax(Var scores, double scale, std::span<const std::size_t> query_pos) {
  const Tensor& S = value(scores);
  require_rank("causal_softmax", S, 3);
  const std::size_t n = S.dim(0), Lq = S.dim(1), Lk = S.dim(2);
  auto pos = std::make_shared<std::vector<std::size_t>>(query_pos.begin(), query_pos.end());
  if (pos->empty()) {
    if (Lq != Lk) throw ShapeError("causal_softmax: square scores required without query positions");
    for (std::size_t i = 0; i < Lq; ++i) pos->push_back(i);
  }
  if (pos->size() != Lq) throw ShapeError("causal_softmax: one position per query row required");
  for (std::size_t p : *pos) {
    if (p >= Lk) throw ShapeError("causal_softmax: query position beyond key length");
  }
  Tensor out(S.shape(), 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < Lq; ++i) {
      const std::size_t off = (b * Lq + i) * Lk;
      softmax_row(S.data() + off, out.data() + off, (*pos)[i] + 1, scale);
    }
  }
  Var self = push("causal_softmax", std::move(out), requires_grad(scores), nullptr);
  if (requires_grad(scores)) {
    nodes_.back().backward = [scores, self, n, Lq, Lk, scale, pos](Tape& t, const Tensor& g) {
      const Tensor& P = t.value(self);
      Tensor& gs = t.grad_buffer(scores);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < Lq; ++i) {
          const std::size_t off = (b * Lq + i) * Lk;
          const std::size_t len = (*pos)[i] + 1;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[off + j] * P[off + j];
          for (std::size_t j = 0; j < len; ++j) gs[off + j] += scale * P[off + j] * (g[off + j] - dot);
        }
      }
    };
  }
  return self;
}

Var Tape::cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& X = value(logits);
  require_rank("cross_entropy", X, 2);
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  if (targets.size() != rows) throw ShapeError("cross_entropy: one target per logit row required");
  auto probs = std::make_shared<std::vector<double>>(X.size());
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  Tensor out = Tensor::uninitialized({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if ((*tgt)[r] >= cols) throw ShapeError("cross_entropy: target id out of range");
    const double* xr = X.data() + r * cols;
    double mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(xr[c] - mx);
      (*probs)[r * cols + c] = e;
      s += e;
    }
    for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] /= s;
    out[r] = -(xr[(*tgt)[r]] - mx - std::log(s));
  }
  return push("cross_entropy", std::move(out), requires_grad(logits), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double y = c == (*tgt)[r] ? 1.0 : 0.0;
        gx[r * cols + c] += g[r] * ((*probs)[r * cols + c] - y);
      }
    }
  });
}

Var Tape::embedding(Var table, std::span<const std::size_t> ids) {
  const Tensor& W = value(table);
  require_rank("embedding", W, 2);
  const std::size_t vocab = W.dim(0), d = W.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  if (idx->empty()) throw ShapeError("embedding: empty id list");
  Tensor out = Tensor::uninitialized({idx->size(), d});
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= vocab) {
      throw ShapeError("embedding: id " + std::to_string((*idx)[r]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(W.data() + (*idx)[r] * d, d, out.data() + r * d);
  }
  return push("embedding", std::move(out), requires_grad(table), [table, idx, d](Tape& t, const Tensor& g) {
    Tensor& gw = t.grad_buffer(table);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = gw.data() + (*idx)[r] * d;
      const double* src = g.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var Tape::gather_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& X = value(x);
  const std::size_t cols = X.cols();
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  if (idx->empty()) throw ShapeError("gather_rows: empty row list");
  Tensor out = Tensor::uninitialized({idx->size(), cols});
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= X.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(X.data() + (*idx)[r] * cols, cols, out.data() + r * cols);
  }
  return push("gather_rows", std::move(out), requires_grad(x), [x, idx, cols](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = gx.data() + (*idx)[r] * cols;
      const double* src = g.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

Var Tape::split_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor& X = value(x);
  require_rank("split_heads", X, 2);
  const std::size_t d = X.dim(1);
  if (X.dim(0) != batch * seq || heads == 0 || d % heads != 0) {
    throw ShapeError("split_heads: " + shape_string(X.shape()) + " incompatible with batch=" +
                     std::to_string(batch) + " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  Tensor out = Tensor::uninitialized({batch * heads, seq, dh});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      const double* src = X.data() + (b * seq + t) * d;
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(src + h * dh, dh, out.data() + ((b * heads + h) * seq + t) * dh);
      }
    }
  }
  return push("split_heads", std::move(out), requires_grad(x), [=](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < seq; ++t) {
        double* dst = gx.data() + (b * seq + t) * d;
        for (std::size_t h = 0; h < heads; ++h) {
          const double* src = g.data() + ((b * heads + h) * seq + t) * dh;
          for (std::size_t e = 0; e < dh; ++e) dst[h * dh + e] += src[e];
        }
      }
    }
  });
}

Var Tape::merge_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor& X = value(x);
  require_rank("merge_heads", X, 3);
  if (X.dim(0) != batch * heads || X.dim(1) != seq) throw ShapeError("merge_heads: layout mismatch");
  const std::size_t dh = X.dim(2), d = dh * heads;
  Tensor out = Tensor::uninitialized({batch * seq, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      double* dst = out.data() + (b * seq + t) * d;
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(X.data() + ((b * heads + h) * seq + t) * dh, dh, dst + h * dh);
      }
    }
  }
  return push("merge_heads", std::move(out), requires_grad(x), [=](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < seq; ++t) {
        const double* src = g.data() + (b * seq + t) * d;
        for (std::size_t h = 0; h < heads; ++h) {
          double* dst = gx.data() + ((b * heads + h) * seq + t) * dh;
          for (std::size_t e = 0; e < dh; ++e) dst[e] += src[h * dh + e];
        }
      }
    }
  });
}

Var Tape::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  return push("sum", Tensor::scalar(s), requires_grad(x), [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (double& v : gx.values()) v += g[0];
  });
}

Var Tape::mean(Var x) {
  const double n = static_cast<double>(value(x).size());
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  return push("mean", Tensor::scalar(s / n), requires_grad(x), [x, n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (double& v : gx.values()) v += g[0] / n;
  });
}

}  // namespace sure::nn
