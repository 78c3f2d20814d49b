// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sure/nn/gradcheck.hpp"
#include "sure/nn/tape.hpp"
#include "sure/rng.hpp"

namespace sure {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

/// Decoder-only transformer dimensions plus the adapter hyperparameters.
struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t model_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_seq_len = 64;
  std::size_t mlp_ratio = 4;
  double dropout_rate = 0.1;
  std::size_t lora_rank = 8;
  double lora_alpha = 32.0;
  double lora_init_std = 0.02;  // std of the Gaussian used for A

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void validate(const ModelConfig& config);

enum class AdapterMode : std::uint8_t { none, fast, slow };

const char* to_string(AdapterMode mode);

/// Low-rank update on one projection: delta W = (alpha / r) * B * A with
/// A of shape (r x d_in) and B of shape (d_out x r).
struct LoraAdapter {
  nn::Parameter a;
  nn::Parameter b;
  std::size_t rank = 0;
  double alpha = 0.0;

  double scale() const noexcept { return alpha / static_cast<double>(rank); }
  std::size_t parameter_count() const noexcept { return a.value.size() + b.value.size(); }
  /// Dense (d_out x d_in) delta, used for weight merging and tests.
  nn::Tensor delta() const;
};

/// One adapter per adapted projection, ordered layer by layer as (query, value).
struct AdapterSet {
  std::vector<LoraAdapter> adapters;

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  LoraAdapter& query(std::size_t layer) { return adapters.at(2 * layer); }
  LoraAdapter& value(std::size_t layer) { return adapters.at(2 * layer + 1); }
  const LoraAdapter& query(std::size_t layer) const { return adapters.at(2 * layer); }
  const LoraAdapter& value(std::size_t layer) const { return adapters.at(2 * layer + 1); }
};

struct TransformerBlock {
  nn::Parameter ln1_gain, ln1_bias;
  nn::Parameter wq, wk, wv, wo;  // (d_out x d_in)
  nn::Parameter ln2_gain, ln2_bias;
  nn::Parameter w1, b1, w2, b2;
};

/// Target positions [begin, end): token t is predicted from tokens < t.
struct TargetSpan {
  std::size_t begin = 1;
  std::size_t end = 1;

  std::size_t length() const noexcept { return end > begin ? end - begin : 0; }
  friend bool operator==(const TargetSpan&, const TargetSpan&) = default;
};

struct NllResult {
  double total_nll = 0.0;
  std::size_t token_count = 0;
};

struct ForwardOptions {
  AdapterMode mode = AdapterMode::fast;
  bool training = false;             // enables dropout; requires dropout_rng
  Rng* dropout_rng = nullptr;
  bool differentiate_adapters = true;
  bool differentiate_base = false;   // gradient checks only
};

/// Frozen random base transformer with a fast and a slow adapter set on the
/// query and value projections of every attention layer.
///
/// Base weights are frozen at construction; only the fast adapters receive
/// gradients. The slow set is written exclusively by EMA or mirroring.
class DualAdapterModel {
 public:
  DualAdapterModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  /// Records the forward pass for a batch of equal-length sequences and
  /// returns the final normalised hidden states at `positions` (every
  /// position when empty), laid out as (batch * positions) x d. Only the
  /// last layer is restricted to the requested rows; keys and values always
  /// cover the full prefix, so outputs are identical to the unrestricted pass.
  nn::Var hidden_states(nn::Tape& tape, std::span<const TokenSeq> batch, const ForwardOptions& opts,
                        std::span<const std::size_t> positions = {});

  /// Projects selected hidden rows to vocabulary logits.
  nn::Var project(nn::Tape& tape, nn::Var hidden, std::span<const std::size_t> rows, const ForwardOptions& opts);

  /// Mean token cross-entropy over the target spans of a batch; the
  /// training objective. Every sequence must have the same length.
  nn::Var span_loss(nn::Tape& tape, std::span<const TokenSeq> batch, std::span<const TargetSpan> spans,
                    const ForwardOptions& opts);

  /// Evaluation-mode logits for every position, (len x vocab).
  nn::Tensor forward_logits(const TokenSeq& tokens, AdapterMode mode);

  NllResult sequence_nll(const TokenSeq& tokens, TargetSpan span, AdapterMode mode);
  /// Evaluation-mode NLL for many sequences; equal-length sequences are
  /// batched. Results match sequence_nll bit for bit.
  std::vector<NllResult> batch_nll(std::span<const TokenSeq> batch, std::span<const TargetSpan> spans,
                                   AdapterMode mode);
  /// Greedy prediction at the positions of each span (teacher forced on the
  /// input prefix). Returns one token per span position.
  std::vector<std::vector<Token>> greedy_labels(std::span<const TokenSeq> batch, std::span<const TargetSpan> spans,
                                                AdapterMode mode);

  AdapterSet& fast() noexcept { return fast_; }
  AdapterSet& slow() noexcept { return slow_; }
  const AdapterSet& fast() const noexcept { return fast_; }
  const AdapterSet& slow() const noexcept { return slow_; }
  AdapterSet& adapters(AdapterMode mode);

  /// Sets the slow adapters equal to the fast ones.
  void copy_fast_to_slow();

  std::vector<nn::Parameter*> base_parameters();
  std::vector<const nn::Parameter*> base_parameters() const;
  /// Base, then fast, then slow parameters; the serialization order.
  std::vector<nn::Parameter*> all_parameters();
  std::vector<const nn::Parameter*> all_parameters() const;

  std::vector<TransformerBlock>& blocks() noexcept { return blocks_; }
  nn::Parameter& token_embedding() noexcept { return tok_emb_; }
  nn::Parameter& position_embedding() noexcept { return pos_emb_; }
  nn::Parameter& final_gain() noexcept { return lnf_gain_; }
  nn::Parameter& final_bias() noexcept { return lnf_bias_; }
  nn::Parameter& head_weight() noexcept { return head_w_; }
  nn::Parameter& head_bias() noexcept { return head_b_; }

 private:
  void check_tokens(std::span<const TokenSeq> batch) const;
  nn::Var linear(nn::Tape& tape, nn::Var x, nn::Parameter& w, const ForwardOptions& opts);
  nn::Var adapted(nn::Tape& tape, nn::Var x, nn::Parameter& w, LoraAdapter* adapter, const ForwardOptions& opts);
  nn::Var base_param(nn::Tape& tape, nn::Parameter& p, const ForwardOptions& opts);

  ModelConfig config_;
  nn::Parameter tok_emb_, pos_emb_;
  std::vector<TransformerBlock> blocks_;
  nn::Parameter lnf_gain_, lnf_bias_;
  nn::Parameter head_w_, head_b_;  // head_w_ is (vocab x d)
  AdapterSet fast_, slow_;
};

/// Gradient check of the whole model (base weights and both adapter paths,
/// dropout active with a replayed mask) on a tiny configuration.
nn::GradCheckReport check_model_gradients(double tolerance, std::uint64_t seed = 7);

}  // namespace sure
