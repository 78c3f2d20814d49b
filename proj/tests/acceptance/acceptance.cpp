// SPDX-License-Identifier: Apache-2.0
// Runs the twelve acceptance criteria and prints one PASS/FAIL line each.
// Exit status 3 when a criterion fails that is not listed as a known failure,
// or when a listed one passes.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "sure/buffer.hpp"
#include "sure/checkpoint.hpp"
#include "sure/config.hpp"
#include "sure/experiment.hpp"
#include "sure/model.hpp"
#include "sure/theory.hpp"
#include "sure/trainer.hpp"

#ifndef SURE_ACCEPTANCE_PROFILE
#define SURE_ACCEPTANCE_PROFILE "desk.cfg"
#endif

using namespace sure;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// --- 1-5: exact properties ----------------------------------------------------

Outcome gradcheck() {
  const auto t0 = Clock::now();
  const auto rep = check_model_gradients(1e-3);
  const double s = seconds_since(t0);
  return {rep.passed && s < 60.0,
          fmt("max rel error %.2e over %zu tensors in %.1fs", rep.max_error, rep.entries.size(), s)};
}

Outcome ema_identity() {
  Rng rng(17);
  double worst = 0.0;
  for (double beta : {0.5, 0.9, 0.995}) {
    std::vector<double> s0(64), f[3];
    for (double& x : s0) x = rng.normal();
    nn::Tensor slow({64}, s0);
    for (auto& fi : f) {
      fi.resize(64);
      for (double& x : fi) x = rng.normal();
      ema_update(slow, nn::Tensor({64}, fi), beta);
    }
    for (std::size_t i = 0; i < 64; ++i) {
      const double closed = (1 - beta) * (f[2][i] + beta * f[1][i] + beta * beta * f[0][i]) + std::pow(beta, 3) * s0[i];
      worst = std::max(worst, std::abs(slow.values()[i] - closed));
    }
  }
  nn::Tensor toy = nn::Tensor::vector({1.0});
  ema_update(toy, nn::Tensor::vector({3.0}), 0.5);
  return {worst <= 1e-12 && toy.values()[0] == 2.0,
          fmt("max deviation %.1e; beta=0.5 toy -> %g", worst, toy.values()[0])};
}

Outcome buffer_quota() {
  auto candidates = [](std::size_t task, std::size_t n, Rng& rng) {
    std::vector<BufferEntry> out;
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back({TokenSeq{static_cast<Token>(i % 60000)}, task, SurpriseScore{rng.uniform()}, 0});
    }
    return out;
  };
  Rng rng(3);
  ReplayMemory m(300, BufferPolicy::surprise, Timing::sb_ub);
  for (std::size_t t = 0; t < 3; ++t) m.surprise_task_update(t, candidates(t, 400, rng));
  const auto up = m.surprise_task_update(3, candidates(3, 400, rng));
  bool counts_ok = up.quota == 75;
  for (auto [t, c] : m.counts_per_task()) counts_ok &= c == 75;

  // Fuzz: random task sizes, boundaries, reservoir offers, samples and rescoring.
  std::size_t ops = 0, violations = 0;
  for (std::size_t round = 0; round < 10; ++round) {
    const std::size_t cap = 1 + rng.below(200);
    ReplayMemory sur(cap, BufferPolicy::surprise, Timing::sa_ua, true);
    ReplayMemory res(cap, BufferPolicy::reservoir, Timing::online);
    std::map<std::size_t, std::size_t> avail;
    std::size_t task = 0;
    for (std::size_t i = 0; i < 1000; ++i, ++ops) {
      switch (rng.below(3)) {
        case 0:
          if (rng.below(25) == 0) {
            avail[task] = rng.below(2 * cap);
            sur.surprise_task_update(task, candidates(task, avail[task], rng));
            const std::size_t q = cap / (task + 1);
            for (std::size_t k = 0; k <= task; ++k) {
              const auto counts = sur.counts_per_task();
              const std::size_t c = counts.count(k) ? counts.at(k) : 0;
              violations += c != std::min(avail[k], q);
            }
            ++task;
          }
          break;
        case 1:
          res.reservoir_update({TokenSeq{1}, 0, std::nullopt, i}, rng);
          break;
        default: {
          const auto s = sur.sample(rng.below(cap + 3), rng);
          std::vector<SurpriseScore> sc(s.indices.size(), SurpriseScore{rng.uniform()});
          sur.rescore(s.indices, sc);
        }
      }
      violations += sur.size() > cap || res.size() > cap;
    }
  }
  return {counts_ok && violations == 0,
          fmt("S=300,d=4 quota %zu; %zu fuzz ops, %zu violations", up.quota, ops, violations)};
}

Outcome reservoir_stats() {
  constexpr std::size_t S = 5, n = 100, trials = 10000;
  std::vector<double> hits(n, 0.0);
  const Rng root(2024);
  for (std::size_t t = 0; t < trials; ++t) {
    ReplayMemory m(S, BufferPolicy::reservoir, Timing::online);
    Rng rng = root.split(t);
    for (std::size_t i = 0; i < n; ++i) m.reservoir_update({TokenSeq{static_cast<Token>(i)}, 0, std::nullopt, i}, rng);
    for (const auto& e : m.entries()) hits[e.tokens[0]] += 1.0;
  }
  const double p = 0.05, se = std::sqrt(p * (1 - p) / trials);
  double worst_z = 0.0;
  for (std::size_t probe : {0u, 49u, 99u}) worst_z = std::max(worst_z, std::abs(hits[probe] / trials - p) / se);
  return {worst_z <= 3.0, fmt("inclusion of items 1, 50, 100 within %.2f SE of 0.05", worst_z)};
}

Outcome metric_arithmetic() {
  const double a = round2(forgetting(80.83, 76.92));
  const double b = round2(forgetting(75.80, 78.10));
  return {a == 3.91 && b == -2.30, fmt("(80.83, 76.92) -> %.2f; (75.80, 78.10) -> %.2f", a, b)};
}

// --- 6-8: training runs ---------------------------------------------------------

struct GridRunner {
  ExperimentConfig cfg;
  TaskStream stream;
  std::vector<std::size_t> orders{0, 1, 2};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::map<std::string, double> cache;  // key -> mean FP in percent

  explicit GridRunner(ExperimentConfig c) : cfg(std::move(c)), stream(stream_for(cfg)) {}

  double mean_fp(Method m, const TrainSchedule& s) {
    std::ostringstream key;
    key << to_string(m) << '/' << s.beta << '/' << s.replay_interval << '/' << s.buffer_capacity;
    if (auto it = cache.find(key.str()); it != cache.end()) return it->second;
    double total = 0.0;
    for (std::size_t o : orders) {
      const auto order = order_permutation(cfg, o);
      for (std::uint64_t seed : seeds) {
        RunState st(cfg.model, s, stream.tasks.size(), seed);
        run_task_sequence(st, stream, order, s);
        total += final_performance(st.matrix);
      }
    }
    const double fp = 100.0 * total / static_cast<double>(orders.size() * seeds.size());
    std::printf("  [grid] %-16s beta=%g k=%zu S=%zu  FP %.2f\n", to_string(m), s.beta, s.replay_interval,
                s.buffer_capacity, fp);
    std::fflush(stdout);
    return cache[key.str()] = fp;
  }

  double mean_fp(Method m) { return mean_fp(m, schedule_for(cfg, m)); }
};

Outcome directional(GridRunner& g) {
  const auto t0 = Clock::now();
  const double seq = g.mean_fp(Method::seqft);
  const double res = g.mean_fp(Method::reservoir_replay);
  const double sur = g.mean_fp(Method::surprise_replay);
  const double slow = g.mean_fp(Method::slow_surprise);
  const double s = seconds_since(t0);
  const bool a = seq + 10.0 <= res, b = res <= sur + 1.0 && sur >= res, c = slow >= sur;
  return {a && b && c && s <= 1800.0,
          fmt("FP seqft %.2f, reservoir %.2f, surprise %.2f, slow surprise %.2f [%s|%s|%s] in %.0fs", seq, res, sur,
              slow, a ? "ok" : "x", b ? "ok" : "x", c ? "ok" : "x", s)};
}

Outcome beta_collapse(GridRunner& g) {
  auto s995 = schedule_for(g.cfg, Method::slow_surprise);
  s995.beta = 0.995;
  auto s999 = s995;
  s999.beta = 0.999;
  const double a = g.mean_fp(Method::slow_surprise, s995);
  const double b = g.mean_fp(Method::slow_surprise, s999);
  return {a - b >= 10.0, fmt("slow surprise FP %.2f at 0.995, %.2f at 0.999 (drop %.2f)", a, b, a - b)};
}

Outcome ratio_sweep(GridRunner& g) {
  const std::vector<std::size_t> ratios{2, 4, 8, 16};
  std::map<Method, std::vector<double>> fp;
  std::string detail;
  bool monotone = true;
  for (Method m : {Method::reservoir_replay, Method::surprise_replay}) {
    detail += std::string(detail.empty() ? "" : "; ") + to_string(m);
    for (std::size_t r : ratios) {
      auto s = schedule_for(g.cfg, m);
      s.buffer_capacity = 300;
      s.replay_interval = replay_interval_for_ratio(r, s.batch_size, s.replay_batch);
      fp[m].push_back(g.mean_fp(m, s));
      detail += fmt(" %.2f", fp[m].back());
      if (fp[m].size() > 1) monotone &= fp[m].back() <= fp[m][fp[m].size() - 2];
    }
  }
  const bool edge = fp[Method::surprise_replay].back() >= fp[Method::reservoir_replay].back();
  return {monotone && edge, fmt("FP at 1:2..1:16 %s [non-increasing %s, surprise>=reservoir at 1:16 %s]",
                                detail.c_str(), monotone ? "ok" : "x", edge ? "ok" : "x")};
}

// --- 9-11: theory harness -------------------------------------------------------

Outcome mmd_checks() {
  Rng rng(9);
  theory::Samples p(2000, theory::Point(2)), q(2000, theory::Point(2));
  for (auto* s : {&p, &q}) {
    for (auto& x : *s) {
      for (double& v : x) v = rng.normal();
    }
  }
  const double null = theory::mmd_unbiased(p, q).value;
  const double two = theory::mmd_unbiased({{0.0}, {0.0}}, {{1.0}, {1.0}}, 1.0).value;
  const double expected = 2.0 - 2.0 * std::exp(-0.5);
  return {std::abs(null) <= 0.01 && std::abs(two - expected) <= 1e-6,
          fmt("null |MMD^2| %.5f at n=2000; two-point %.10f vs %.10f", std::abs(null), two, expected)};
}

Outcome ema_variance() {
  const std::vector<double> iid_betas{0.9, 0.99};
  const auto iid = theory::ema_iid_control(1.0, iid_betas, 200000, 4, 5);
  double worst = 0.0;
  for (const auto& r : iid) worst = std::max(worst, std::abs(r.measured / r.predicted - 1.0));
  theory::QuadraticFamily f;
  f.dim = 4;
  const std::vector<double> grid{0.0, 0.5, 0.9, 0.99, 0.995};
  const auto q = theory::ema_quadratic_experiment(f, 0.1, grid, 40000, 20, 11);
  bool decreasing = true;
  std::string vars;
  for (std::size_t i = 0; i < q.rows.size(); ++i) {
    vars += fmt(" %.2e", q.rows[i].slow_variance);
    if (i) decreasing &= q.rows[i].slow_variance < q.rows[i - 1].slow_variance;
  }
  return {worst <= 0.05 && decreasing,
          fmt("iid worst relative error %.2f%%; quadratic variance over beta grid%s", 100 * worst, vars.c_str())};
}

Outcome complementarity() {
  theory::ComplementarityConfig cfg;
  const auto rep = theory::complementarity_experiment(cfg);
  const double tiny = rep.best_for_fraction(cfg.fractions.front()).forgetting;
  const double full = rep.best_for_fraction(cfg.fractions.back()).forgetting;
  const double worst = rep.worst_for_fraction(cfg.fractions.back()).forgetting;
  const double low = rep.minimum().forgetting;
  const double full_mmd = rep.mmd.back().mmd;
  const bool a = tiny >= 2 * full, b = worst >= 2 * low, c = full_mmd <= rep.null_threshold;
  return {a && b && c, fmt("F(tiny,best) %.4f vs F(full,best) %.4f; F(full,worst) %.4f vs min %.4f; "
                           "full-buffer MMD %.5f vs null %.5f",
                           tiny, full, worst, low, full_mmd, rep.null_threshold)};
}

// --- 12: reproducibility --------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome reproducibility(const ExperimentConfig& profile) {
  ExperimentConfig cfg = profile;
  cfg.stream.n_tasks = 3;
  cfg.stream.train_per_class = 32;
  cfg.stream.test_per_class = 8;
  cfg.methods = {Method::seqft, Method::reservoir_replay, Method::slow_surprise};
  cfg.orders = {0, 1};
  cfg.seeds = {0, 1};
  cfg.order_table.clear();
  const fs::path base = fs::temp_directory_path() / "sure-acceptance-repro";
  fs::remove_all(base);
  std::size_t mismatches = 0, compared = 0;
  auto run = [&](const char* name, std::size_t stop, bool resume) {
    cfg.output_dir = (base / name).string();
    cfg.stop_after_stage = stop;
    run_experiment(cfg, resume);
  };
  run("a", 0, false);
  run("b", 0, false);
  run("r", 2, false);
  run("r", 0, true);
  std::vector<fs::path> files{"summary.csv", "runs.csv"};
  for (Method m : cfg.methods) {
    for (std::size_t o : cfg.orders) {
      for (std::uint64_t s : cfg.seeds) {
        for (const char* f : {"accuracy_matrix.csv", "steps.jsonl", "checkpoint.bin"}) {
          files.push_back(fs::path(cell_path({m, o, s})) / f);
        }
      }
    }
  }
  for (const auto& f : files) {
    const std::string a = slurp(base / "a" / f);
    mismatches += a.empty() || a != slurp(base / "b" / f) || a != slurp(base / "r" / f);
    ++compared;
  }
  fs::remove_all(base);
  return {mismatches == 0, fmt("%zu artifacts compared across repeat and resumed runs, %zu differ", compared, mismatches)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string profile_path = SURE_ACCEPTANCE_PROFILE;
  std::vector<int> only, known;
  app.add_option("-p,--profile", profile_path, "Training profile for criteria 6-8 and 12");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 12));
  app.add_option("--known-failure", known, "Criteria expected to fail (still reported as FAIL)")
      ->delimiter(',')
      ->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig profile;
  try {
    profile = load_config_file(profile_path);
    validate(profile);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance: %s\n", e.what());
    return 1;
  }
  GridRunner grid(profile);

  const std::set<int> selected(only.begin(), only.end());
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient check", gradcheck},
      {"EMA identity", ema_identity},
      {"buffer quota", buffer_quota},
      {"reservoir inclusion", reservoir_stats},
      {"metric arithmetic", metric_arithmetic},
      {"directional ordering", [&] { return directional(grid); }},
      {"beta collapse", [&] { return beta_collapse(grid); }},
      {"replay-ratio sweep", [&] { return ratio_sweep(grid); }},
      {"MMD checks", mmd_checks},
      {"EMA variance", ema_variance},
      {"complementarity", complementarity},
      {"reproducibility and resume", [&] { return reproducibility(profile); }},
  };

  const std::set<int> expected(known.begin(), known.end());
  int failed = 0, unexpected = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    ++ran;
    failed += !out.pass;
    const bool listed = expected.count(id) > 0;
    unexpected += out.pass == listed;
    std::printf("[%s] %2d %s: %s (%.1fs)%s\n", out.pass ? "PASS" : "FAIL", id, criteria[i].first, out.detail.c_str(),
                seconds_since(t0), listed ? (out.pass ? " [listed as known failure]" : " [known failure]") : "");
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed; %d outcome(s) differ from the known-failure list\n", ran - failed, ran,
              unexpected);
  return unexpected ? 3 : 0;
}
