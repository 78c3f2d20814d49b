// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>

#include "sure/error.hpp"
#include "sure/nn/gradcheck.hpp"
#include "sure/nn/sgd.hpp"
#include "sure/nn/tape.hpp"
#include "sure/rng.hpp"

using namespace sure;
using namespace sure::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = sd * rng.normal();
  return t;
}

Parameter make_param(const std::string& name, Shape shape, Rng& rng, double sd = 1.0) {
  return Parameter{name, random_tensor(std::move(shape), rng, sd)};
}

// Central differences on a scalar function of one parameter, used as an
// oracle independent of check_gradients().
Tensor numeric_grad(Parameter& p, const std::function<double()>& f, double h = 1e-5) {
  Tensor g(p.value.shape());
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double x = p.value[i];
    p.value[i] = x + h;
    const double up = f();
    p.value[i] = x - h;
    const double down = f();
    p.value[i] = x;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("forward: identity, uniform softmax, identity matmul") {
  Tape tape;
  Var x = tape.input(Tensor::vector({1, 2, 3}));
  CHECK(tape.value(x) == Tensor::vector({1, 2, 3}));

  Var s = tape.softmax(tape.input(Tensor::matrix(1, 4, {0, 0, 0, 0})));
  for (double v : tape.value(s).values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Var m = tape.matmul(tape.input(a), tape.input(Tensor::matrix(2, 2, {1, 0, 0, 1})));
  CHECK(tape.value(m) == a);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(3);
  Tape tape;
  Var s = tape.softmax(tape.input(random_tensor({7, 11}, rng, 5.0)));
  const Tensor& v = tape.value(s);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) sum += v.at(r, c);
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("shape mismatch is rejected with a description") {
  Tape tape;
  Var a = tape.input(Tensor({2, 3}));
  Var b = tape.input(Tensor({2, 3}));
  CHECK_THROWS_AS(tape.matmul(a, b), ShapeError);
  CHECK_THROWS_AS(tape.add(a, tape.input(Tensor({3, 2}))), ShapeError);
}

TEST_CASE("non-finite intermediate aborts with the operation name") {
  Tape tape;
  Var x = tape.input(Tensor::vector({1e308, 1e308}));
  try {
    tape.scale(x, 10.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.op() == "scale");
  }
}

TEST_CASE("backward: sum gives ones, x*x at 3 gives 6") {
  Parameter p{"x", Tensor::vector({1, 2, 3, 4})};
  Tape t1;
  const Gradients g1 = t1.backward(t1.sum(t1.param(p)));
  CHECK(g1.at(p) == Tensor::vector({1, 1, 1, 1}));

  Parameter q{"q", Tensor::vector({3})};
  Tape t2;
  Var v = t2.param(q);
  const Gradients g2 = t2.backward(t2.sum(t2.mul(v, v)));
  CHECK(g2.at(q)[0] == 6.0);
}

TEST_CASE("unused parameters get exactly zero gradient") {
  Rng rng(1);
  Parameter used = make_param("used", {3}, rng), unused = make_param("unused", {2, 2}, rng);
  Tape tape;
  Var u = tape.param(used);
  tape.param(unused);
  const Gradients g = tape.backward(tape.sum(u));
  for (double v : g.at(unused).values()) CHECK(v == 0.0);
}

TEST_CASE("a consumed tape refuses reuse") {
  Parameter p{"p", Tensor::vector({1})};
  Tape tape;
  Var y = tape.sum(tape.param(p));
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), TapeError);
  CHECK_THROWS_AS(tape.input(Tensor::vector({1})), TapeError);
}

TEST_CASE("cross-entropy gradient on a 3-class toy matches finite differences") {
  Parameter logits{"logits", Tensor::matrix(2, 3, {0.2, -1.0, 0.5, 1.5, 0.1, -0.3})};
  const std::vector<std::size_t> targets{2, 0};
  auto f = [&] {
    Tape t;
    return t.value(t.sum(t.cross_entropy(t.param(logits), targets)))[0];
  };
  Tape tape;
  const Gradients g = tape.backward(tape.sum(tape.cross_entropy(tape.param(logits), targets)));
  const Tensor num = numeric_grad(logits, f);
  for (std::size_t i = 0; i < num.size(); ++i) CHECK(rel_err(g.at(logits)[i], num[i]) <= 1e-4);
}

// Every primitive against central differences on random inputs, 10 seeds.
TEST_CASE("primitive gradients match central differences") {
  struct Case {
    const char* name;
    std::function<Var(Tape&, Var, Var)> op;
    Shape a, b;
  };
  std::vector<std::size_t> ids{0, 2, 1, 2};
  std::vector<std::size_t> rows{1, 0, 1};
  std::vector<std::size_t> tgt{0, 3, 1};
  std::vector<std::size_t> qpos{1, 2};
  const std::vector<Case> cases{
      {"matmul", [](Tape& t, Var a, Var b) { return t.matmul(a, b); }, {3, 4}, {4, 2}},
      {"matmul_tt", [](Tape& t, Var a, Var b) { return t.matmul(a, b, Trans::yes, Trans::yes); }, {4, 3}, {2, 4}},
      {"bmm", [](Tape& t, Var a, Var b) { return t.bmm(a, b); }, {2, 3, 4}, {2, 4, 2}},
      {"bmm_nt", [](Tape& t, Var a, Var b) { return t.bmm(a, b, Trans::no, Trans::yes); }, {2, 3, 4}, {2, 5, 4}},
      {"add", [](Tape& t, Var a, Var b) { return t.add(a, b); }, {3, 4}, {3, 4}},
      {"mul", [](Tape& t, Var a, Var b) { return t.mul(a, b); }, {3, 4}, {3, 4}},
      {"add_row", [](Tape& t, Var a, Var b) { return t.add_row(a, b); }, {3, 4}, {4}},
      {"scale", [](Tape& t, Var a, Var) { return t.scale(a, -1.7); }, {3, 4}, {1}},
      {"relu", [](Tape& t, Var a, Var) { return t.relu(a); }, {3, 4}, {1}},
      {"softmax", [](Tape& t, Var a, Var b) { return t.mul(t.softmax(a), b); }, {3, 4}, {3, 4}},
      {"causal_softmax", [](Tape& t, Var a, Var b) { return t.mul(t.causal_softmax(a, 0.7), b); }, {2, 3, 3}, {2, 3, 3}},
      {"causal_softmax_rows",
       [&](Tape& t, Var a, Var b) { return t.mul(t.causal_softmax(a, 0.7, qpos), b); }, {2, 2, 3}, {2, 2, 3}},
      {"layer_norm", [](Tape& t, Var a, Var b) { return t.layer_norm(a, b, b); }, {3, 4}, {4}},
      {"cross_entropy", [&](Tape& t, Var a, Var) { return t.cross_entropy(a, tgt); }, {3, 5}, {1}},
      {"embedding", [&](Tape& t, Var a, Var b) { return t.mul(t.embedding(a, ids), b); }, {3, 2}, {4, 2}},
      {"gather_rows", [&](Tape& t, Var a, Var b) { return t.mul(t.gather_rows(a, rows), b); }, {2, 3}, {3, 3}},
      {"split_merge",
       [](Tape& t, Var a, Var b) {
         Var s = t.split_heads(a, 2, 3, 2);
         return t.mul(t.merge_heads(t.mul(s, s), 2, 3, 2), b);
       },
       {6, 4}, {6, 4}},
      {"mean", [](Tape& t, Var a, Var b) { return t.mul(t.mean(t.mul(a, a)), b); }, {3, 4}, {1}},
  };
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      CAPTURE(c.name);
      CAPTURE(seed);
      Rng rng(seed);
      Parameter a = make_param("a", c.a, rng), b = make_param("b", c.b, rng);
      Rng w_rng(seed + 100);
      auto build = [&](Tape& t) {
        Var out = c.op(t, t.param(a), t.param(b));
        // Random projection so every output element matters.
        Rng proj = w_rng;
        Tensor w = random_tensor(t.value(out).shape(), proj);
        return t.sum(t.mul(out, t.input(std::move(w))));
      };
      std::vector<Parameter*> params{&a, &b};
      const auto rep = check_gradients(build, params, 1e-3);
      CHECK_MESSAGE(rep.passed, c.name << " max error " << rep.max_error);
    }
  }
}

TEST_CASE("dropout gradient uses the forward mask") {
  Rng rng(5);
  Parameter a = make_param("a", {4, 6}, rng);
  const Rng mask_seed(9);
  auto build = [&](Tape& t) {
    Rng m = mask_seed;
    return t.sum(t.mul(t.dropout(t.param(a), 0.3, m), t.param(a)));
  };
  std::vector<Parameter*> params{&a};
  CHECK(check_gradients(build, params, 1e-3).passed);
}

TEST_CASE("check_gradients: linear layer passes, corrupted derivative fails") {
  Rng rng(2);
  Parameter w = make_param("w", {3, 4}, rng), b = make_param("b", {3}, rng);
  const Tensor x = random_tensor({5, 4}, rng);
  auto linear = [&](Tape& t) { return t.sum(t.relu(t.add_row(t.matmul(t.input(x), t.param(w), Trans::no, Trans::yes), t.param(b)))); };
  std::vector<Parameter*> params{&w, &b};
  CHECK(check_gradients(linear, params, 1e-3).passed);

  // A square whose closure reports 3x instead of 2x.
  auto broken = [&](Tape& t) {
    Var in = t.param(w);
    Tensor v = t.value(in);
    for (double& e : v.values()) e *= e;
    Var sq = t.custom("bad_square", {in}, v, [in](Tape& tp, const Tensor& g) {
      Tensor d = tp.value(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = 3.0 * d[i] * g[i];
      tp.accumulate(in, d);
    });
    return t.sum(sq);
  };
  std::vector<Parameter*> wp{&w};
  const auto rep = check_gradients(broken, wp, 1e-3);
  CHECK_FALSE(rep.passed);
  CHECK(rep.max_error > 1e-1);
}

TEST_CASE("identical seeds give bit-identical forward and backward") {
  auto run = [] {
    Rng rng(11);
    Parameter a = make_param("a", {4, 5}, rng), b = make_param("b", {5, 3}, rng);
    Tape t;
    Var y = t.sum(t.softmax(t.matmul(t.param(a), t.param(b))));
    Var l = t.cross_entropy(t.matmul(t.param(a), t.param(b)), std::vector<std::size_t>{0, 1, 2, 0});
    Var total = t.add(t.sum(l), y);
    const double v = t.value(total)[0];
    Gradients g = t.backward(total);
    return std::make_pair(v, g.items().front().grad);
  };
  const auto r1 = run(), r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("sgd step") {
  Parameter p{"p", Tensor::vector({1.0})};
  Gradients g;
  g.items().push_back({&p, Tensor::vector({2.0})});
  Sgd sgd({0.5, std::nullopt});
  CHECK(sgd.step(g));
  CHECK(p.value[0] == 0.0);

  g.items()[0].grad = Tensor::vector({0.0});
  sgd.step(g);
  CHECK(p.value[0] == 0.0);

  SUBCASE("clipping scales by clip / norm") {
    Parameter q{"q", Tensor::vector({0.0, 0.0})};
    Gradients h;
    h.items().push_back({&q, Tensor::vector({6.0, 8.0})});
    Sgd clipped({1.0, 1.0});
    clipped.step(h);
    CHECK(q.value[0] == doctest::Approx(-0.6).epsilon(1e-14));
    CHECK(q.value[1] == doctest::Approx(-0.8).epsilon(1e-14));
  }
  SUBCASE("non-finite gradient rejects the step") {
    Parameter q{"q", Tensor::vector({1.0, 2.0})};
    Gradients h;
    h.items().push_back({&q, Tensor::vector({1.0, NAN})});
    Sgd s({0.1, std::nullopt});
    CHECK_FALSE(s.step(h));
    CHECK(s.rejected_steps() == 1);
    CHECK(q.value == Tensor::vector({1.0, 2.0}));
  }
  SUBCASE("frozen parameters never move") {
    Parameter q{"q", Tensor::vector({1.0}), true};
    Gradients h;
    h.items().push_back({&q, Tensor::vector({1.0})});
    Sgd s({0.1, std::nullopt});
    s.step(h);
    CHECK(q.value[0] == 1.0);
  }
  CHECK_THROWS_AS(Sgd({0.0, std::nullopt}), ConfigError);
}
