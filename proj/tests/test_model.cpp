// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "sure/error.hpp"
#include "sure/model.hpp"

using namespace sure;
using nn::Tensor;

namespace {

ModelConfig small_config(std::size_t layers = 1) {
  ModelConfig c;
  c.vocab_size = 16;
  c.model_dim = 8;
  c.layers = layers;
  c.heads = 2;
  c.max_seq_len = 8;
  c.mlp_ratio = 2;
  c.lora_rank = 2;
  c.lora_alpha = 4.0;
  return c;
}

void randomize_fast(DualAdapterModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto* p : m.fast().parameters()) {
    for (double& x : p->value.values()) x = 0.5 * rng.normal();
    p->touch();
  }
}

using Mat = std::vector<std::vector<double>>;

Mat rows_of(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

// y = x W^T (+ scale * (x A^T) B^T)
Mat dense(const Mat& x, const Tensor& w) {
  Mat y(x.size(), std::vector<double>(w.dim(0), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      for (std::size_t k = 0; k < w.dim(1); ++k) y[i][o] += x[i][k] * w.at(o, k);
    }
  }
  return y;
}

Mat adapted(const Mat& x, const Tensor& w, const LoraAdapter* ad) {
  Mat y = dense(x, w);
  if (!ad) return y;
  const Mat up = dense(dense(x, ad->a.value), ad->b.value);
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t o = 0; o < y[i].size(); ++o) y[i][o] += ad->scale() * up[i][o];
  }
  return y;
}

Mat layer_norm(const Mat& x, const Tensor& g, const Tensor& b) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return y;
}

// Straight-line evaluation-mode forward pass, written without the tape.
Mat reference_logits(DualAdapterModel& m, const TokenSeq& tokens, AdapterMode mode) {
  const auto& cfg = m.config();
  const std::size_t L = tokens.size(), d = cfg.model_dim, H = cfg.heads, dh = d / H;
  Mat x(L, std::vector<double>(d));
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      x[t][c] = m.token_embedding().value.at(tokens[t], c) + m.position_embedding().value.at(t, c);
    }
  }
  const AdapterSet* set = mode == AdapterMode::none ? nullptr : &m.adapters(mode);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto& blk = m.blocks()[l];
    const Mat h = layer_norm(x, blk.ln1_gain.value, blk.ln1_bias.value);
    const Mat q = adapted(h, blk.wq.value, set ? &set->query(l) : nullptr);
    const Mat k = dense(h, blk.wk.value);
    const Mat v = adapted(h, blk.wv.value, set ? &set->value(l) : nullptr);
    Mat att(L, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<double> s(i + 1);
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][hd * dh + c] * k[j][hd * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t c = 0; c < dh; ++c) att[i][hd * dh + c] += s[j] / z * v[j][hd * dh + c];
        }
      }
    }
    const Mat o = dense(att, blk.wo.value);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t c = 0; c < d; ++c) x[i][c] += o[i][c];
    }
    const Mat h2 = layer_norm(x, blk.ln2_gain.value, blk.ln2_bias.value);
    Mat f = dense(h2, blk.w1.value);
    for (auto& row : f) {
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = std::max(0.0, row[c] + blk.b1.value[c]);
    }
    const Mat f2 = dense(f, blk.w2.value);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t c = 0; c < d; ++c) x[i][c] += f2[i][c] + blk.b2.value[c];
    }
  }
  Mat logits = dense(layer_norm(x, m.final_gain().value, m.final_bias().value), m.head_weight().value);
  for (auto& row : logits) {
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += m.head_bias().value[c];
  }
  return logits;
}

double max_diff(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  }
  return worst;
}

}  // namespace

TEST_CASE("init: B is zero, slow equals fast, adapters do not change the output") {
  DualAdapterModel m(small_config(2), 4);
  for (const auto& ad : m.fast().adapters) {
    for (double v : ad.b.value.values()) CHECK(v == 0.0);
  }
  for (std::size_t i = 0; i < m.fast().adapters.size(); ++i) {
    CHECK(m.fast().adapters[i].a.value == m.slow().adapters[i].a.value);
    CHECK(m.fast().adapters[i].b.value == m.slow().adapters[i].b.value);
  }
  const TokenSeq toks{1, 5, 3, 9, 2};
  CHECK(m.forward_logits(toks, AdapterMode::fast) == m.forward_logits(toks, AdapterMode::none));
}

TEST_CASE("default rank 8, d 64: 1024 adapter parameters per projection") {
  DualAdapterModel m(ModelConfig{}, 0);
  for (const auto& ad : m.fast().adapters) CHECK(ad.parameter_count() == 1024);
  CHECK(m.fast().adapters.size() == 2 * ModelConfig{}.layers);
}

TEST_CASE("same seed gives identical weights") {
  DualAdapterModel a(small_config(), 12), b(small_config(), 12), c(small_config(), 13);
  const auto pa = a.all_parameters(), pb = b.all_parameters(), pc = c.all_parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value == pb[i]->value);
    differs = differs || !(pa[i]->value == pc[i]->value);
  }
  CHECK(differs);
}

TEST_CASE("slow mode matches fast mode after copying") {
  DualAdapterModel m(small_config(2), 1);
  randomize_fast(m, 2);
  const TokenSeq toks{3, 1, 4, 1, 5};
  CHECK_FALSE(m.forward_logits(toks, AdapterMode::fast) == m.forward_logits(toks, AdapterMode::slow));
  m.copy_fast_to_slow();
  CHECK(m.forward_logits(toks, AdapterMode::fast) == m.forward_logits(toks, AdapterMode::slow));
}

TEST_CASE("logits match a straight-line re-implementation") {
  for (std::size_t layers : {1u, 2u}) {
    DualAdapterModel m(small_config(layers), 21);
    randomize_fast(m, 22);
    const TokenSeq toks{7, 0, 15, 3};
    for (AdapterMode mode : {AdapterMode::none, AdapterMode::fast, AdapterMode::slow}) {
      CAPTURE(layers);
      CHECK(max_diff(rows_of(m.forward_logits(toks, mode)), reference_logits(m, toks, mode)) <= 1e-10);
    }
  }
}

TEST_CASE("adapter equals merged weights") {
  DualAdapterModel m(small_config(2), 5);
  randomize_fast(m, 6);
  const TokenSeq toks{2, 4, 6, 8, 10, 12};
  const Tensor adapted = m.forward_logits(toks, AdapterMode::fast);
  for (std::size_t l = 0; l < m.config().layers; ++l) {
    auto& blk = m.blocks()[l];
    for (auto [w, ad] : {std::pair{&blk.wq, &m.fast().query(l)}, std::pair{&blk.wv, &m.fast().value(l)}}) {
      const Tensor delta = ad->delta();
      for (std::size_t i = 0; i < w->value.size(); ++i) w->value[i] += delta[i];
      w->touch();
    }
  }
  const Tensor merged = m.forward_logits(toks, AdapterMode::none);
  double worst = 0.0;
  for (std::size_t i = 0; i < merged.size(); ++i) worst = std::max(worst, std::abs(merged[i] - adapted[i]));
  CHECK(worst <= 1e-10);
}

TEST_CASE("causality: later tokens do not change earlier logits") {
  DualAdapterModel m(small_config(2), 8);
  randomize_fast(m, 9);
  const TokenSeq a{1, 2, 3, 4, 5, 6}, b{1, 2, 3, 11, 0, 9};
  const Tensor la = m.forward_logits(a, AdapterMode::fast), lb = m.forward_logits(b, AdapterMode::fast);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t v = 0; v < la.cols(); ++v) CHECK(la.at(t, v) == lb.at(t, v));
  }
}

TEST_CASE("sequence_nll: uniform logits and forced targets") {
  DualAdapterModel m(small_config(), 3);
  // Zero head: every position predicts the uniform distribution.
  m.head_weight().value.fill(0.0);
  m.head_weight().touch();
  const TokenSeq toks{1, 2, 3, 4};
  const NllResult r = m.sequence_nll(toks, {1, 4}, AdapterMode::none);
  CHECK(r.token_count == 3);
  CHECK(r.total_nll == doctest::Approx(3.0 * std::log(16.0)).epsilon(1e-12));

  // A huge bias on token 3 makes it certain.
  m.head_bias().value[3] = 1e3;
  m.head_bias().touch();
  CHECK(m.sequence_nll(toks, {2, 3}, AdapterMode::none).total_nll == doctest::Approx(0.0));
  CHECK_THROWS(m.sequence_nll(toks, {2, 2}, AdapterMode::none));
}

TEST_CASE("sequence_nll matches direct log-softmax enumeration") {
  DualAdapterModel m(small_config(2), 31);
  randomize_fast(m, 32);
  const TokenSeq toks{4, 9, 1, 14, 6, 2};
  const TargetSpan span{2, 6};
  const Mat logits = reference_logits(m, toks, AdapterMode::fast);
  double oracle = 0.0;
  for (std::size_t t = span.begin; t < span.end; ++t) {
    const auto& row = logits[t - 1];
    double mx = -INFINITY, z = 0.0;
    for (double v : row) mx = std::max(mx, v);
    for (double v : row) z += std::exp(v - mx);
    oracle -= row[toks[t]] - mx - std::log(z);
  }
  const NllResult r = m.sequence_nll(toks, span, AdapterMode::fast);
  CHECK(std::abs(r.total_nll - oracle) <= 1e-10);
  CHECK(r.token_count == 4);

  // batch_nll is bit-identical to the single-sequence path.
  const std::vector<TokenSeq> batch{toks, TokenSeq{1, 1, 2, 3, 5, 8}};
  const std::vector<TargetSpan> spans{span, {1, 6}};
  const auto rs = m.batch_nll(batch, spans, AdapterMode::fast);
  CHECK(rs[0].total_nll == r.total_nll);
  CHECK(rs[1].total_nll == m.sequence_nll(batch[1], spans[1], AdapterMode::fast).total_nll);
}

TEST_CASE("input validation") {
  DualAdapterModel m(small_config(), 0);
  CHECK_THROWS_AS(m.forward_logits(TokenSeq{1, 16}, AdapterMode::none), ShapeError);
  CHECK_THROWS_AS(m.forward_logits(TokenSeq(9, 1), AdapterMode::none), ShapeError);
  ModelConfig bad = small_config();
  bad.heads = 3;
  CHECK_THROWS_AS(DualAdapterModel(bad, 0), ConfigError);
  bad = small_config();
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(DualAdapterModel(bad, 0), ConfigError);
}

TEST_CASE("whole-model gradient check") {
  const auto rep = check_model_gradients(1e-3);
  CHECK_MESSAGE(rep.passed, "max error " << rep.max_error);
}
