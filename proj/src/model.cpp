// SPDX-License-Identifier: Apache-2.0
#include "sure/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "sure/error.hpp"

namespace sure {

using nn::Parameter;
using nn::Tape;
using nn::Tensor;
using nn::Trans;
using nn::Var;

void validate(const ModelConfig& c) {
  if (c.vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
  if (c.model_dim == 0 || c.layers == 0 || c.heads == 0) throw ConfigError("model: dimensions must be positive");
  if (c.model_dim % c.heads != 0) throw ConfigError("model: model_dim must be divisible by heads");
  if (c.max_seq_len < 2) throw ConfigError("model: max_seq_len must be at least 2");
  if (c.mlp_ratio == 0) throw ConfigError("model: mlp_ratio must be positive");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) throw ConfigError("model: dropout_rate must lie in [0, 1)");
  if (c.lora_rank == 0) throw ConfigError("model: lora_rank must be positive");
  if (!(c.lora_alpha > 0.0)) throw ConfigError("model: lora_alpha must be positive");
  if (!(c.lora_init_std >= 0.0)) throw ConfigError("model: lora_init_std must be non-negative");
}

const char* to_string(AdapterMode mode) {
  switch (mode) {
    case AdapterMode::none: return "none";
    case AdapterMode::fast: return "fast";
    case AdapterMode::slow: return "slow";
  }
  return "?";
}

Tensor LoraAdapter::delta() const {
  const std::size_t d_out = b.value.dim(0), d_in = a.value.dim(1);
  Tensor out({d_out, d_in});
  nn::gemm(Trans::no, Trans::no, d_out, d_in, rank, b.value.data(), a.value.data(), out.data(), false);
  for (double& v : out.values()) v *= scale();
  return out;
}

std::vector<Parameter*> AdapterSet::parameters() {
  std::vector<Parameter*> out;
  for (auto& ad : adapters) {
    out.push_back(&ad.a);
    out.push_back(&ad.b);
  }
  return out;
}

std::vector<const Parameter*> AdapterSet::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& ad : adapters) {
    out.push_back(&ad.a);
    out.push_back(&ad.b);
  }
  return out;
}

namespace {

Parameter gaussian(std::string name, nn::Shape shape, double sd, Rng& rng) {
  Parameter p{std::move(name), Tensor(std::move(shape)), true, 0};
  for (double& v : p.value.values()) v = rng.normal(0.0, sd);
  return p;
}

Parameter constant(std::string name, nn::Shape shape, double fill) {
  return Parameter{std::move(name), Tensor(std::move(shape), fill), true, 0};
}

}  // namespace

DualAdapterModel::DualAdapterModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  validate(config_);
  const std::size_t d = config_.model_dim, V = config_.vocab_size, ff = d * config_.mlp_ratio;
  const Rng root(seed);
  Rng base = root.split(1);
  Rng lora = root.split(2);
  const double proj_sd = 1.0 / std::sqrt(static_cast<double>(d));

  tok_emb_ = gaussian("tok_emb", {V, d}, 1.0, base);
  pos_emb_ = gaussian("pos_emb", {config_.max_seq_len, d}, 1.0, base);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    TransformerBlock blk;
    blk.ln1_gain = constant(pre + "ln1.gain", {d}, 1.0);
    blk.ln1_bias = constant(pre + "ln1.bias", {d}, 0.0);
    blk.wq = gaussian(pre + "wq", {d, d}, proj_sd, base);
    blk.wk = gaussian(pre + "wk", {d, d}, proj_sd, base);
    blk.wv = gaussian(pre + "wv", {d, d}, proj_sd, base);
    blk.wo = gaussian(pre + "wo", {d, d}, proj_sd, base);
    blk.ln2_gain = constant(pre + "ln2.gain", {d}, 1.0);
    blk.ln2_bias = constant(pre + "ln2.bias", {d}, 0.0);
    blk.w1 = gaussian(pre + "w1", {ff, d}, proj_sd, base);
    blk.b1 = constant(pre + "b1", {ff}, 0.0);
    blk.w2 = gaussian(pre + "w2", {d, ff}, 1.0 / std::sqrt(static_cast<double>(ff)), base);
    blk.b2 = constant(pre + "b2", {d}, 0.0);
    blocks_.push_back(std::move(blk));
  }
  lnf_gain_ = constant("lnf.gain", {d}, 1.0);
  lnf_bias_ = constant("lnf.bias", {d}, 0.0);
  head_w_ = gaussian("head.w", {V, d}, proj_sd, base);
  head_b_ = constant("head.b", {V}, 0.0);

  const std::size_t r = config_.lora_rank;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    for (const char* proj : {"q", "v"}) {
      const std::string name = "fast.layer" + std::to_string(l) + "." + proj;
      LoraAdapter ad;
      ad.rank = r;
      ad.alpha = config_.lora_alpha;
      ad.a = gaussian(name + ".A", {r, d}, config_.lora_init_std, lora);
      ad.a.frozen = false;
      ad.b = constant(name + ".B", {d, r}, 0.0);
      ad.b.frozen = false;
      fast_.adapters.push_back(std::move(ad));
    }
  }
  slow_ = fast_;
  for (auto& ad : slow_.adapters) {
    ad.a.name.replace(0, 4, "slow");
    ad.b.name.replace(0, 4, "slow");
    ad.a.frozen = true;
    ad.b.frozen = true;
  }
}

AdapterSet& DualAdapterModel::adapters(AdapterMode mode) {
  if (mode == AdapterMode::slow) return slow_;
  return fast_;
}

void DualAdapterModel::copy_fast_to_slow() {
  for (std::size_t i = 0; i < fast_.adapters.size(); ++i) {
    slow_.adapters[i].a.value = fast_.adapters[i].a.value;
    slow_.adapters[i].b.value = fast_.adapters[i].b.value;
    slow_.adapters[i].a.touch();
    slow_.adapters[i].b.touch();
  }
}

std::vector<Parameter*> DualAdapterModel::base_parameters() {
  std::vector<Parameter*> out{&tok_emb_, &pos_emb_};
  for (auto& b : blocks_) {
    for (Parameter* p : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                         &b.b1, &b.w2, &b.b2}) {
      out.push_back(p);
    }
  }
  for (Parameter* p : {&lnf_gain_, &lnf_bias_, &head_w_, &head_b_}) out.push_back(p);
  return out;
}

std::vector<const Parameter*> DualAdapterModel::base_parameters() const {
  auto mut = const_cast<DualAdapterModel*>(this)->base_parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Parameter*> DualAdapterModel::all_parameters() {
  auto out = base_parameters();
  for (Parameter* p : fast_.parameters()) out.push_back(p);
  for (Parameter* p : slow_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> DualAdapterModel::all_parameters() const {
  auto mut = const_cast<DualAdapterModel*>(this)->all_parameters();
  return {mut.begin(), mut.end()};
}

void DualAdapterModel::check_tokens(std::span<const TokenSeq> batch) const {
  if (batch.empty()) throw ShapeError("model: empty batch");
  const std::size_t len = batch.front().size();
  for (const auto& seq : batch) {
    if (seq.empty()) throw ShapeError("model: empty token sequence");
    if (seq.size() != len) throw ShapeError("model: sequences in one batch must have equal length");
    if (seq.size() > config_.max_seq_len) {
      throw ShapeError("model: sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                       std::to_string(config_.max_seq_len));
    }
    for (Token t : seq) {
      if (t >= config_.vocab_size) {
        throw ShapeError("model: token " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(config_.vocab_size));
      }
    }
  }
}

Var DualAdapterModel::base_param(Tape& tape, Parameter& p, const ForwardOptions& opts) {
  return tape.param(p, opts.differentiate_base);
}

Var DualAdapterModel::linear(Tape& tape, Var x, Parameter& w, const ForwardOptions& opts) {
  return tape.matmul(x, base_param(tape, w, opts), Trans::no, Trans::yes);
}

Var DualAdapterModel::adapted(Tape& tape, Var x, Parameter& w, LoraAdapter* adapter, const ForwardOptions& opts) {
  Var y = linear(tape, x, w, opts);
  if (!adapter) return y;
  const bool diff = opts.differentiate_adapters;
  Var down = tape.matmul(x, tape.param(adapter->a, diff && (!adapter->a.frozen || opts.differentiate_base)),
                         Trans::no, Trans::yes);
  Var up = tape.matmul(down, tape.param(adapter->b, diff && (!adapter->b.frozen || opts.differentiate_base)),
                       Trans::no, Trans::yes);
  return tape.add(y, tape.scale(up, adapter->scale()));
}

Var DualAdapterModel::hidden_states(Tape& tape, std::span<const TokenSeq> batch, const ForwardOptions& opts,
                                   std::span<const std::size_t> positions) {
  check_tokens(batch);
  if (opts.training && config_.dropout_rate > 0.0 && !opts.dropout_rng) {
    throw Error("model: training forward needs a dropout generator");
  }
  const std::size_t B = batch.size(), L = batch.front().size(), H = config_.heads;
  const std::size_t dh = config_.model_dim / H;
  for (std::size_t p : positions) {
    if (p >= L) throw ShapeError("model: requested position beyond sequence length");
  }
  std::vector<std::size_t> ids, pos;
  ids.reserve(B * L);
  pos.reserve(B * L);
  for (const auto& seq : batch) {
    for (std::size_t t = 0; t < L; ++t) {
      ids.push_back(seq[t]);
      pos.push_back(t);
    }
  }
  const bool drop = opts.training && config_.dropout_rate > 0.0;
  const bool prune = !positions.empty() && positions.size() < L;
  AdapterSet* set = opts.mode == AdapterMode::none ? nullptr : &adapters(opts.mode);
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var x = tape.add(tape.embedding(base_param(tape, tok_emb_, opts), ids),
                   tape.embedding(base_param(tape, pos_emb_, opts), pos));
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    TransformerBlock& blk = blocks_[l];
    const bool last = l + 1 == blocks_.size();
    Var h = tape.layer_norm(x, base_param(tape, blk.ln1_gain, opts), base_param(tape, blk.ln1_bias, opts));
    Var k = linear(tape, h, blk.wk, opts);
    Var v = adapted(tape, h, blk.wv, set ? &set->value(l) : nullptr, opts);
    Var out;
    if (last && prune) {
      const std::size_t P = positions.size();
      std::vector<std::size_t> sel;
      sel.reserve(B * P);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p : positions) sel.push_back(b * L + p);
      }
      Var q = adapted(tape, tape.gather_rows(h, sel), blk.wq, set ? &set->query(l) : nullptr, opts);
      Var scores = tape.bmm(tape.split_heads(q, B, P, H), tape.split_heads(k, B, L, H), Trans::no, Trans::yes);
      Var probs = tape.causal_softmax(scores, att_scale, positions);
      out = tape.merge_heads(tape.bmm(probs, tape.split_heads(v, B, L, H)), B, P, H);
      x = tape.gather_rows(x, sel);
    } else {
      Var q = adapted(tape, h, blk.wq, set ? &set->query(l) : nullptr, opts);
      Var scores = tape.bmm(tape.split_heads(q, B, L, H), tape.split_heads(k, B, L, H), Trans::no, Trans::yes);
      Var probs = tape.causal_softmax(scores, att_scale);
      out = tape.merge_heads(tape.bmm(probs, tape.split_heads(v, B, L, H)), B, L, H);
    }
    out = linear(tape, out, blk.wo, opts);
    if (drop) out = tape.dropout(out, config_.dropout_rate, *opts.dropout_rng);
    x = tape.add(x, out);

    Var h2 = tape.layer_norm(x, base_param(tape, blk.ln2_gain, opts), base_param(tape, blk.ln2_bias, opts));
    Var f = tape.relu(tape.add_row(linear(tape, h2, blk.w1, opts), base_param(tape, blk.b1, opts)));
    f = tape.add_row(linear(tape, f, blk.w2, opts), base_param(tape, blk.b2, opts));
    if (drop) f = tape.dropout(f, config_.dropout_rate, *opts.dropout_rng);
    x = tape.add(x, f);
  }
  Var hidden = tape.layer_norm(x, base_param(tape, lnf_gain_, opts), base_param(tape, lnf_bias_, opts));
  if (!positions.empty() && !prune) {
    // Every position requested explicitly; reorder to match the layout.
    std::vector<std::size_t> sel;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t p : positions) sel.push_back(b * L + p);
    }
    hidden = tape.gather_rows(hidden, sel);
  }
  return hidden;
}

Var DualAdapterModel::project(Tape& tape, Var hidden, std::span<const std::size_t> rows, const ForwardOptions& opts) {
  Var sel = tape.gather_rows(hidden, rows);
  return tape.add_row(tape.matmul(sel, base_param(tape, head_w_, opts), Trans::no, Trans::yes),
                      base_param(tape, head_b_, opts));
}

namespace {

struct SpanLayout {
  std::vector<TokenSeq> inputs;
  std::vector<std::size_t> positions;  // shared query positions, or empty
  std::vector<std::size_t> rows;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> owner;  // batch index of each row
};

SpanLayout layout_spans(std::span<const TokenSeq> batch, std::span<const TargetSpan> spans) {
  if (batch.size() != spans.size()) throw ShapeError("model: one target span per sequence required");
  if (batch.empty()) throw ShapeError("model: empty batch");
  std::size_t input_len = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TargetSpan& s = spans[i];
    if (s.length() == 0) throw Error("model: empty target span");
    if (s.begin < 1 || s.end > batch[i].size()) {
      throw ShapeError("model: target span [" + std::to_string(s.begin) + ", " + std::to_string(s.end) +
                       ") outside sequence of length " + std::to_string(batch[i].size()));
    }
    input_len = std::max(input_len, s.end - 1);
  }
  SpanLayout out;
  const bool shared = std::all_of(spans.begin(), spans.end(), [&](const TargetSpan& s) { return s == spans[0]; });
  if (shared) {
    for (std::size_t t = spans[0].begin; t < spans[0].end; ++t) out.positions.push_back(t - 1);
  }
  const std::size_t row_stride = shared ? out.positions.size() : input_len;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].size() < input_len) throw ShapeError("model: sequence shorter than the batch input length");
    out.inputs.emplace_back(batch[i].begin(), batch[i].begin() + static_cast<std::ptrdiff_t>(input_len));
    for (std::size_t t = spans[i].begin; t < spans[i].end; ++t) {
      out.rows.push_back(i * row_stride + (shared ? t - spans[0].begin : t - 1));
      out.targets.push_back(batch[i][t]);
      out.owner.push_back(i);
    }
  }
  return out;
}

}  // namespace

Var DualAdapterModel::span_loss(Tape& tape, std::span<const TokenSeq> batch, std::span<const TargetSpan> spans,
                                const ForwardOptions& opts) {
  SpanLayout lay = layout_spans(batch, spans);
  Var hidden = hidden_states(tape, lay.inputs, opts, lay.positions);
  Var logits = project(tape, hidden, lay.rows, opts);
  return tape.mean(tape.cross_entropy(logits, lay.targets));
}

Tensor DualAdapterModel::forward_logits(const TokenSeq& tokens, AdapterMode mode) {
  Tape tape;
  ForwardOptions opts;
  opts.mode = mode;
  opts.differentiate_adapters = false;
  const std::vector<TokenSeq> batch{tokens};
  Var hidden = hidden_states(tape, batch, opts);
  std::vector<std::size_t> rows(tokens.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return tape.value(project(tape, hidden, rows, opts));
}

NllResult DualAdapterModel::sequence_nll(const TokenSeq& tokens, TargetSpan span, AdapterMode mode) {
  const std::vector<TokenSeq> batch{tokens};
  const std::vector<TargetSpan> spans{span};
  return batch_nll(batch, spans, mode).front();
}

namespace {

constexpr std::size_t kEvalChunk = 64;

/// Groups indices by required input length so every chunk is batchable.
std::vector<std::vector<std::size_t>> eval_chunks(std::span<const TokenSeq> batch, std::span<const TargetSpan> spans) {
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < batch.size(); ++i) by_len[spans[i].end].push_back(i);
  std::vector<std::vector<std::size_t>> chunks;
  for (auto& [len, idx] : by_len) {
    for (std::size_t s = 0; s < idx.size(); s += kEvalChunk) {
      chunks.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                          idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + kEvalChunk)));
    }
  }
  return chunks;
}

}  // namespace

std::vector<NllResult> DualAdapterModel::batch_nll(std::span<const TokenSeq> batch, std::span<const TargetSpan> spans,
                                                   AdapterMode mode) {
  if (batch.size() != spans.size()) throw ShapeError("model: one target span per sequence required");
  std::vector<NllResult> out(batch.size());
  ForwardOptions opts;
  opts.mode = mode;
  opts.differentiate_adapters = false;
  for (const auto& chunk : eval_chunks(batch, spans)) {
    std::vector<TokenSeq> seqs;
    std::vector<TargetSpan> sp;
    for (std::size_t i : chunk) {
      seqs.push_back(batch[i]);
      sp.push_back(spans[i]);
    }
    SpanLayout lay = layout_spans(seqs, sp);
    Tape tape;
    Var hidden = hidden_states(tape, lay.inputs, opts, lay.positions);
    const Tensor& nll = tape.value(tape.cross_entropy(project(tape, hidden, lay.rows, opts), lay.targets));
    for (std::size_t r = 0; r < lay.rows.size(); ++r) {
      NllResult& res = out[chunk[lay.owner[r]]];
      res.total_nll += nll[r];
      res.token_count += 1;
    }
  }
  return out;
}

std::vector<std::vector<Token>> DualAdapterModel::greedy_labels(std::span<const TokenSeq> batch,
                                                                std::span<const TargetSpan> spans, AdapterMode mode) {
  if (batch.size() != spans.size()) throw ShapeError("model: one target span per sequence required");
  std::vector<std::vector<Token>> out(batch.size());
  ForwardOptions opts;
  opts.mode = mode;
  opts.differentiate_adapters = false;
  for (const auto& chunk : eval_chunks(batch, spans)) {
    std::vector<TokenSeq> seqs;
    std::vector<TargetSpan> sp;
    for (std::size_t i : chunk) {
      seqs.push_back(batch[i]);
      sp.push_back(spans[i]);
    }
    SpanLayout lay = layout_spans(seqs, sp);
    Tape tape;
    Var hidden = hidden_states(tape, lay.inputs, opts, lay.positions);
    const Tensor& logits = tape.value(project(tape, hidden, lay.rows, opts));
    const std::size_t V = logits.cols();
    for (std::size_t r = 0; r < lay.rows.size(); ++r) {
      const double* row = logits.data() + r * V;
      const auto best = static_cast<Token>(std::max_element(row, row + V) - row);
      out[chunk[lay.owner[r]]].push_back(best);
    }
  }
  return out;
}

}  // namespace sure

namespace sure {

nn::GradCheckReport check_model_gradients(double tolerance, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.model_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.max_seq_len = 8;
  cfg.mlp_ratio = 2;
  cfg.dropout_rate = 0.1;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 4.0;
  cfg.lora_init_std = 0.3;
  DualAdapterModel model(cfg, seed);
  // B starts at zero; give it mass so every adapter path carries gradient.
  Rng rng(seed ^ 0x5EEDULL);
  for (auto* p : model.fast().parameters()) {
    for (double& x : p->value.values()) x += 0.3 * rng.normal();
  }
  const std::vector<TokenSeq> batch{{1, 4, 7, 2, 9, 3}, {5, 0, 11, 6, 8, 10}};
  const std::vector<TargetSpan> spans{{1, 6}, {3, 6}};
  const Rng mask_seed(seed + 1);
  auto build = [&](nn::Tape& tape) {
    Rng mask = mask_seed;  // identical dropout masks on every evaluation
    ForwardOptions opts;
    opts.mode = AdapterMode::fast;
    opts.training = true;
    opts.dropout_rng = &mask;
    opts.differentiate_base = true;
    return model.span_loss(tape, batch, spans, opts);
  };
  std::vector<nn::Parameter*> params = model.base_parameters();
  for (auto* p : model.fast().parameters()) params.push_back(p);
  return nn::check_gradients(build, params, tolerance);
}

}  // namespace sure
