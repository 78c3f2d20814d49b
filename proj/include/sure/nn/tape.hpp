// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sure/nn/tensor.hpp"
#include "sure/rng.hpp"

namespace sure::nn {

/// A named tensor owned by a model. `version` is bumped on every in-place
/// update so a tape can detect that a recorded value went stale.
struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
  std::uint64_t version = 0;

  void touch() noexcept { ++version; }
};

struct ParamGrad {
  Parameter* param;
  Tensor grad;
};

/// Gradients for every parameter registered as differentiable on a tape,
/// in registration order. Unused parameters carry an all-zero gradient.
class Gradients {
 public:
  std::vector<ParamGrad>& items() noexcept { return items_; }
  const std::vector<ParamGrad>& items() const noexcept { return items_; }
  const Tensor* find(const Parameter& p) const noexcept;
  const Tensor& at(const Parameter& p) const;
  double global_norm() const noexcept;

 private:
  std::vector<ParamGrad> items_;
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t index = 0;
};

enum class Trans : std::uint8_t { no, yes };

/// Reverse-mode automatic differentiation over dense tensors.
///
/// Every primitive appends one record holding its output value and a
/// closure that maps the output gradient to input gradients. Records are
/// appended in execution order, so reverse iteration is a valid topological
/// order for backward(). A tape is single-use: once backward() ran it
/// refuses further recording or a second backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  Var input(Tensor value);
  /// Registers a parameter. With `differentiate` false it behaves as a constant.
  Var param(Parameter& p, bool differentiate);
  Var param(Parameter& p) { return param(p, !p.frozen); }

  // Linear algebra.
  Var matmul(Var a, Var b, Trans ta = Trans::no, Trans tb = Trans::no);
  /// Batched matmul over the leading extent of two rank-3 tensors.
  Var bmm(Var a, Var b, Trans ta = Trans::no, Trans tb = Trans::no);

  // Elementwise.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  /// Adds a rank-1 bias to every row.
  Var add_row(Var x, Var bias);
  Var relu(Var x);
  Var dropout(Var x, double rate, Rng& rng);

  // Normalisation and probabilities.
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var softmax(Var x);
  /// Softmax over the last extent of a (n, Lq, Lk) score tensor after
  /// multiplying by `scale`. Query row i may attend keys 0..query_pos[i];
  /// an empty `query_pos` means Lq == Lk and row i sits at position i.
  Var causal_softmax(Var scores, double scale, std::span<const std::size_t> query_pos = {});
  /// Per-row negative log-likelihood of `targets` under softmax(logits).
  Var cross_entropy(Var logits, std::span<const std::size_t> targets);

  // Indexing and layout.
  Var embedding(Var table, std::span<const std::size_t> ids);
  Var gather_rows(Var x, std::span<const std::size_t> rows);
  Var split_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads);
  Var merge_heads(Var x, std::size_t batch, std::size_t seq, std::size_t heads);

  // Reductions.
  Var sum(Var x);
  Var mean(Var x);

  /// Records a user-supplied primitive. `backward` receives the output
  /// gradient and must call accumulate() for its inputs.
  Var custom(std::string name, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient of `v` (no-op when `v` needs no gradient).
  void accumulate(Var v, const Tensor& g);
  /// Gradient buffer of `v`, allocated as zeros on first access.
  Tensor& grad_buffer(Var v);
  /// Gradient of any recorded value after backward(); zeros if untouched.
  Tensor grad(Var v) const;

  Gradients backward(Var output);
  Gradients backward(Var output, const Tensor& seed);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_allocated = false;
    BackwardFn backward;
    Parameter* param = nullptr;
    std::uint64_t param_version = 0;
  };

  Var push(std::string op, Tensor value, bool requires_grad, BackwardFn backward);
  void require_open() const;
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool check_finite_;
  bool consumed_ = false;
};

/// C (m x n) = op(A) * op(B) (+ C when accumulate). Row-major, contiguous.
/// Row i of C depends only on row i of op(A), so batching sequences
/// together never changes per-sequence results.
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate);

}  // namespace sure::nn
