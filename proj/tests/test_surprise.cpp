// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sure/error.hpp"
#include "sure/surprise.hpp"

using namespace sure;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 16;
  c.model_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.max_seq_len = 8;
  c.mlp_ratio = 2;
  c.lora_rank = 2;
  return c;
}

// Head weights zeroed: every position predicts softmax(head bias).
DualAdapterModel constant_model(const std::vector<std::pair<Token, double>>& biases = {}) {
  DualAdapterModel m(tiny(), 1);
  m.head_weight().value.fill(0.0);
  m.head_weight().touch();
  for (auto [tok, b] : biases) m.head_bias().value[tok] = b;
  m.head_bias().touch();
  return m;
}

const ScoringSpans kSpans{{1, 4}, {3, 4}};

}  // namespace

TEST_CASE("uniform model: avg ln 16, sum 3 ln 16") {
  auto m = constant_model();
  const TokenSeq toks{2, 7, 1, 9};
  const auto avg = score(m, toks, SurpriseVariant::avg_sequence, kSpans);
  const auto sum = score(m, toks, SurpriseVariant::sum_sequence, kSpans);
  CHECK(avg.value == doctest::Approx(std::log(16.0)).epsilon(1e-12));
  CHECK(sum.value == doctest::Approx(3.0 * std::log(16.0)).epsilon(1e-12));
  CHECK(avg.token_count == 3);
  CHECK(avg.variant == SurpriseVariant::avg_sequence);
}

TEST_CASE("per-token probabilities 0.5 and 0.25 average to (ln 2 + ln 4) / 2") {
  // Fourteen tokens at logit 0 plus logits ln 28 and ln 14 give Z = 56,
  // so p(a) = 1/2 and p(b) = 1/4.
  const Token a = 3, b = 5;
  auto m = constant_model({{a, std::log(28.0)}, {b, std::log(14.0)}});
  const TokenSeq toks{0, a, b};
  const ScoringSpans spans{{1, 3}, {2, 3}};
  const auto s = score(m, toks, SurpriseVariant::avg_sequence, spans);
  CHECK(std::abs(s.value - (std::log(2.0) + std::log(4.0)) / 2.0) <= 1e-12);
}

TEST_CASE("certain label gives label_only surprise 0") {
  auto m = constant_model({{9, 1e3}});
  const TokenSeq toks{2, 7, 1, 9};
  CHECK(score(m, toks, SurpriseVariant::label_only, kSpans).value == doctest::Approx(0.0));
}

TEST_CASE("sum equals avg times token count") {
  DualAdapterModel m(tiny(), 4);
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    TokenSeq toks(6);
    for (auto& t : toks) t = static_cast<Token>(rng.below(16));
    const ScoringSpans spans{{1, 6}, {5, 6}};
    const auto avg = score(m, toks, SurpriseVariant::avg_sequence, spans);
    const auto sum = score(m, toks, SurpriseVariant::sum_sequence, spans);
    CHECK(sum.value == doctest::Approx(avg.value * static_cast<double>(avg.token_count)).epsilon(1e-14));
  }
}

TEST_CASE("raising every target probability lowers every variant") {
  const TokenSeq toks{4, 6, 6, 6};
  for (SurpriseVariant v : {SurpriseVariant::avg_sequence, SurpriseVariant::sum_sequence, SurpriseVariant::label_only}) {
    double prev = INFINITY;
    for (double bias : {0.0, 0.5, 1.0, 2.0}) {
      auto m = constant_model({{6, bias}});
      const double s = score(m, toks, v, kSpans).value;
      CHECK(s < prev);
      prev = s;
    }
  }
}

TEST_CASE("score_all matches score regardless of batch composition") {
  DualAdapterModel m(tiny(), 9);
  Rng rng(10);
  std::vector<TokenSeq> batch;
  for (int i = 0; i < 7; ++i) {
    TokenSeq toks(5);
    for (auto& t : toks) t = static_cast<Token>(rng.below(16));
    batch.push_back(toks);
  }
  const ScoringSpans spans{{1, 5}, {4, 5}};
  const auto all = score_all(m, batch, SurpriseVariant::avg_sequence, spans, AdapterMode::fast, 3);
  std::vector<TokenSeq> reversed(batch.rbegin(), batch.rend());
  const auto rev = score_all(m, reversed, SurpriseVariant::avg_sequence, spans, AdapterMode::fast, 3);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(all[i] == score(m, batch[i], SurpriseVariant::avg_sequence, spans, AdapterMode::fast, 3));
    CHECK(all[i] == rev[batch.size() - 1 - i]);
  }
}

TEST_CASE("empty sequence is rejected") {
  auto m = constant_model();
  CHECK_THROWS(score(m, TokenSeq{}, SurpriseVariant::avg_sequence, kSpans));
}

TEST_CASE("rank_top_k examples") {
  const std::vector<double> s{1, 3, 2};
  CHECK(rank_top_k(s, 2).indices == std::vector<std::size_t>{1, 2});
  const std::vector<double> eq{4, 4, 4, 4};
  CHECK(rank_top_k(eq, 2).indices == std::vector<std::size_t>{0, 1});
  const auto all = rank_top_k(s, 5);
  CHECK(all.truncated);
  CHECK(all.indices.size() == 3);
  CHECK(rank_top_k(s, 0).indices.empty());
  const std::vector<double> nan{1.0, NAN};
  CHECK_THROWS(rank_top_k(nan, 1));
}

TEST_CASE("rank_top_k agrees with a full-sort oracle") {
  Rng rng(77);
  std::vector<double> scores(1000);
  // Coarse values so ties actually occur.
  for (double& x : scores) x = static_cast<double>(rng.below(200));
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(10);
  CHECK(rank_top_k(scores, 10).indices == idx);
}

TEST_CASE("rank_top_k is permutation-equivariant on distinct scores") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(50);
    for (double& x : s) x = rng.uniform();
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> permuted(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) permuted[i] = s[perm[i]];
    const auto a = rank_top_k(s, 7).indices;
    const auto b = rank_top_k(permuted, 7).indices;
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(perm[b[i]] == a[i]);
  }
}

TEST_CASE("variant names round-trip") {
  for (SurpriseVariant v : {SurpriseVariant::avg_sequence, SurpriseVariant::sum_sequence, SurpriseVariant::label_only}) {
    CHECK(parse_surprise_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_surprise_variant("max"), ConfigError);
}
