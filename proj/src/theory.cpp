// SPDX-License-Identifier: Apache-2.0
#include "sure/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sure/error.hpp"

namespace sure::theory {

double rbf(std::span<const double> x, std::span<const double> y, double bandwidth) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = x[i] - y[i];
    d2 += t * t;
  }
  return std::exp(-d2 / (2.0 * bandwidth * bandwidth));
}

namespace {

double dist(const Point& a, const Point& b) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d2);
}

void check_dims(const Samples& p, const Samples& q) {
  if (p.empty() || q.empty()) throw ShapeError("mmd: empty sample set");
  const std::size_t d = p.front().size();
  for (const auto* set : {&p, &q}) {
    for (const auto& x : *set) {
      if (x.size() != d) throw ShapeError("mmd: mismatched feature dimensions");
    }
  }
}

// Mean kernel value over pairs i != j of one set.
double within_u(const Samples& s, double h) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j) total += rbf(s[i], s[j], h);
  }
  const double n = static_cast<double>(s.size());
  return 2.0 * total / (n * (n - 1.0));
}

// Mean kernel value over all ordered pairs, diagonal included.
double within_v(const Samples& s, double h) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j) total += rbf(s[i], s[j], h);
  }
  const double n = static_cast<double>(s.size());
  return (2.0 * total + n) / (n * n);
}

double cross_mean(const Samples& p, const Samples& q, double h) {
  double total = 0.0;
  for (const auto& x : p) {
    for (const auto& y : q) total += rbf(x, y, h);
  }
  return total / (static_cast<double>(p.size()) * static_cast<double>(q.size()));
}

}  // namespace

double median_bandwidth(const Samples& p, const Samples& q, std::size_t max_points) {
  check_dims(p, q);
  Samples pool;
  pool.insert(pool.end(), p.begin(), p.begin() + static_cast<std::ptrdiff_t>(std::min(max_points, p.size())));
  pool.insert(pool.end(), q.begin(), q.begin() + static_cast<std::ptrdiff_t>(std::min(max_points, q.size())));
  std::vector<double> d;
  d.reserve(pool.size() * (pool.size() - 1) / 2);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t j = i + 1; j < pool.size(); ++j) {
      const double v = dist(pool[i], pool[j]);
      if (v > 0.0) d.push_back(v);
    }
  }
  if (d.empty()) return 1.0;  // every point identical; any bandwidth gives zero
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

MmdEstimate mmd_unbiased(const Samples& p, const Samples& q, std::optional<double> bandwidth) {
  check_dims(p, q);
  if (p.size() < 2 || q.size() < 2) throw ShapeError("mmd: each sample set needs at least two points");
  MmdEstimate out;
  out.bandwidth = bandwidth ? *bandwidth : median_bandwidth(p, q);
  if (!(out.bandwidth > 0.0)) throw ConfigError("mmd: bandwidth must be positive");
  out.n_p = p.size();
  out.n_q = q.size();
  out.value = within_u(p, out.bandwidth) + within_u(q, out.bandwidth) - 2.0 * cross_mean(p, q, out.bandwidth);
  return out;
}

// --- EMA on noisy quadratics -------------------------------------------------

void validate(const QuadraticFamily& f) {
  if (f.dim == 0) throw ConfigError("quadratic: dim must be positive");
  if (!(f.mu > 0.0)) throw ConfigError("quadratic: mu must be positive");
  if (!(f.sigma2 >= 0.0)) throw ConfigError("quadratic: sigma2 must be non-negative");
  if (f.tasks < 2) throw ConfigError("quadratic: need at least two tasks");
  if (!(f.drift >= 0.0)) throw ConfigError("quadratic: drift must be non-negative");
  if (!(f.data_sd >= 0.0)) throw ConfigError("quadratic: data_sd must be non-negative");
  if (f.samples_per_task == 0) throw ConfigError("quadratic: samples_per_task must be positive");
}

namespace {

std::size_t burn_in(double beta, double eta, double mu) {
  const double window = 1.0 / (1.0 - beta);
  return static_cast<std::size_t>(std::ceil(10.0 * window + 10.0 / (eta * mu)));
}

}  // namespace

EmaReport ema_quadratic_experiment(const QuadraticFamily& family, double eta, std::span<const double> betas,
                                   std::size_t steps, std::size_t seeds, std::uint64_t seed) {
  if (!(eta > 0.0)) throw ConfigError("ema experiment: eta must be positive");
  if (family.dim == 0 || !(family.mu > 0.0)) throw ConfigError("ema experiment: invalid quadratic");
  if (steps < 2 || seeds == 0) throw ConfigError("ema experiment: need steps >= 2 and seeds >= 1");
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("ema experiment: beta must lie in [0, 1)");
  }
  EmaReport rep;
  rep.eta = eta;
  rep.steps = steps;
  rep.seeds = seeds;
  const double a = 1.0 - eta * family.mu;
  const bool stable = std::abs(a) < 1.0;
  const double fast_var = stable ? eta * eta * family.sigma2 / (1.0 - a * a) : INFINITY;
  const double sd = std::sqrt(family.sigma2);
  const std::size_t D = family.dim;

  for (double beta : betas) {
    EmaRow row;
    row.beta = beta;
    row.predicted_slow_variance = fast_var * (1.0 - beta) * (1.0 + a * beta) / ((1.0 + beta) * (1.0 - a * beta));
    if (!stable) {
      row.diverged = true;
      rep.rows.push_back(row);
      continue;
    }
    const std::size_t burn = burn_in(beta, eta, family.mu);
    rep.burn_in_max = std::max(rep.burn_in_max, burn);
    for (std::size_t s = 0; s < seeds; ++s) {
      // Same noise stream for every beta: only the averaging differs.
      Rng rng = Rng(seed).split(s);
      std::vector<double> fast(D, 0.0), slow(D, 0.0);
      std::vector<double> f_sum(D, 0.0), f_sq(D, 0.0), s_sum(D, 0.0), s_sq(D, 0.0);
      for (std::size_t t = 0; t < burn + steps; ++t) {
        for (std::size_t i = 0; i < D; ++i) {
          const double g = family.mu * fast[i] + sd * rng.normal();
          fast[i] -= eta * g;
          slow[i] = beta * slow[i] + (1.0 - beta) * fast[i];
          if (t >= burn) {
            f_sum[i] += fast[i];
            f_sq[i] += fast[i] * fast[i];
            s_sum[i] += slow[i];
            s_sq[i] += slow[i] * slow[i];
          }
        }
        if (!std::isfinite(fast[0])) {
          row.diverged = true;
          break;
        }
      }
      const double n = static_cast<double>(steps);
      for (std::size_t i = 0; i < D; ++i) {
        row.fast_excess_risk += 0.5 * family.mu * f_sq[i] / n;
        row.slow_excess_risk += 0.5 * family.mu * s_sq[i] / n;
        row.fast_variance += (f_sq[i] / n - (f_sum[i] / n) * (f_sum[i] / n)) / static_cast<double>(D);
        row.slow_variance += (s_sq[i] / n - (s_sum[i] / n) * (s_sum[i] / n)) / static_cast<double>(D);
      }
    }
    const double ns = static_cast<double>(seeds);
    row.fast_excess_risk /= ns;
    row.slow_excess_risk /= ns;
    row.fast_variance /= ns;
    row.slow_variance /= ns;
    rep.rows.push_back(row);
  }
  return rep;
}

std::vector<IidEmaRow> ema_iid_control(double sigma2, std::span<const double> betas, std::size_t steps,
                                       std::size_t seeds, std::uint64_t seed) {
  if (!(sigma2 > 0.0) || steps < 2 || seeds == 0) throw ConfigError("ema control: invalid arguments");
  const double sd = std::sqrt(sigma2);
  std::vector<IidEmaRow> out;
  for (double beta : betas) {
    if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("ema control: beta must lie in [0, 1)");
    IidEmaRow row;
    row.beta = beta;
    row.predicted = sigma2 * (1.0 - beta) / (1.0 + beta);
    const auto burn = static_cast<std::size_t>(std::ceil(10.0 / (1.0 - beta)));
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng = Rng(seed).split(s);
      double ema = 0.0, sum = 0.0, sq = 0.0;
      for (std::size_t t = 0; t < burn + steps; ++t) {
        ema = beta * ema + (1.0 - beta) * sd * rng.normal();
        if (t >= burn) {
          sum += ema;
          sq += ema * ema;
        }
      }
      const double n = static_cast<double>(steps);
      row.measured += sq / n - (sum / n) * (sum / n);
    }
    row.measured /= static_cast<double>(seeds);
    out.push_back(row);
  }
  return out;
}

// --- selection vs integration --------------------------------------------------

const ComplementarityCell& ComplementarityReport::at(double fraction, double beta) const {
  for (const auto& c : cells) {
    if (c.fraction == fraction && c.beta == beta) return c;
  }
  throw ShapeError("complementarity: no such grid cell");
}

const ComplementarityCell& ComplementarityReport::best_for_fraction(double fraction) const {
  const ComplementarityCell* best = nullptr;
  for (const auto& c : cells) {
    if (c.fraction == fraction && (!best || c.forgetting < best->forgetting)) best = &c;
  }
  if (!best) throw ShapeError("complementarity: fraction not on the grid");
  return *best;
}

const ComplementarityCell& ComplementarityReport::worst_for_fraction(double fraction) const {
  const ComplementarityCell* worst = nullptr;
  for (const auto& c : cells) {
    if (c.fraction == fraction && (!worst || c.forgetting > worst->forgetting)) worst = &c;
  }
  if (!worst) throw ShapeError("complementarity: fraction not on the grid");
  return *worst;
}

const ComplementarityCell& ComplementarityReport::minimum() const {
  if (cells.empty()) throw ShapeError("complementarity: empty grid");
  return *std::min_element(cells.begin(), cells.end(),
                           [](const auto& x, const auto& y) { return x.forgetting < y.forgetting; });
}

namespace {

struct QuadraticWorld {
  std::vector<Point> optima;
  std::vector<Samples> data;  // per task
};

QuadraticWorld make_world(const QuadraticFamily& f, Rng& rng) {
  QuadraticWorld w;
  Point cur(f.dim, 0.0);
  for (std::size_t k = 0; k < f.tasks; ++k) {
    if (k > 0) {
      Point u(f.dim);
      double norm = 0.0;
      for (double& x : u) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < f.dim; ++i) cur[i] += f.drift * u[i] / norm;
    }
    w.optima.push_back(cur);
    Samples s(f.samples_per_task, Point(f.dim));
    for (auto& z : s) {
      for (std::size_t i = 0; i < f.dim; ++i) z[i] = cur[i] + f.data_sd * rng.normal();
    }
    w.data.push_back(std::move(s));
  }
  return w;
}

double excess(const Point& theta, const Point& opt, double mu) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) d2 += (theta[i] - opt[i]) * (theta[i] - opt[i]);
  return 0.5 * mu * d2;
}

double loss(const Point& theta, const Point& z, double mu) { return excess(theta, z, mu); }

// Empirical-measure MMD between a fixed buffer and the distribution behind
// `fresh`: V-statistic on the buffer, U-statistic on the fresh draw.
double buffer_mmd(const Samples& buffer, const Samples& fresh, double h) {
  if (buffer.size() < 1 || fresh.size() < 2) return 0.0;
  return within_v(buffer, h) + within_u(fresh, h) - 2.0 * cross_mean(buffer, fresh, h);
}

Samples loss_features(const Samples& zs, const std::vector<Point>& probes, double mu) {
  Samples out;
  out.reserve(zs.size());
  for (const auto& z : zs) {
    Point f;
    f.reserve(probes.size());
    for (const auto& p : probes) f.push_back(loss(p, z, mu));
    out.push_back(std::move(f));
  }
  return out;
}

Samples fresh_past(const QuadraticWorld& w, const QuadraticFamily& f, std::size_t n, Rng& rng) {
  Samples out(n, Point(f.dim));
  const std::size_t past = f.tasks - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& c = w.optima[i % past];
    for (std::size_t d = 0; d < f.dim; ++d) out[i][d] = c[d] + f.data_sd * rng.normal();
  }
  return out;
}

}  // namespace

ComplementarityReport complementarity_experiment(const ComplementarityConfig& cfg) {
  const QuadraticFamily& f = cfg.family;
  validate(f);
  if (cfg.fractions.empty() || cfg.betas.empty()) throw ConfigError("complementarity: grids must be nonempty");
  if (cfg.seeds == 0 || cfg.batch == 0) throw ConfigError("complementarity: seeds and batch must be positive");
  for (double fr : cfg.fractions) {
    if (!(fr > 0.0 && fr <= 1.0)) throw ConfigError("complementarity: fractions must lie in (0, 1]");
  }
  for (double b : cfg.betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("complementarity: beta must lie in [0, 1)");
  }
  const std::size_t n = f.samples_per_task;
  const std::size_t nf = cfg.fractions.size(), nb = cfg.betas.size();
  std::vector<std::vector<double>> forget(nf * nb);
  std::vector<double> mmd_sum(nf, 0.0);
  std::vector<double> null_draws;
  const std::size_t mmd_seeds = std::min<std::size_t>(cfg.seeds, 5);
  const std::size_t n_fresh = std::min<std::size_t>(2000, n * (f.tasks - 1));

  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    const Rng root = Rng(cfg.seed).split(s);
    Rng world_rng = root.split(1);
    const QuadraticWorld world = make_world(f, world_rng);
    // Nested buffers: every fraction keeps a prefix of one fixed permutation.
    std::vector<std::vector<std::size_t>> keep_order(f.tasks);
    Rng perm_rng = root.split(2);
    for (auto& ko : keep_order) {
      ko.resize(n);
      std::iota(ko.begin(), ko.end(), 0);
      perm_rng.shuffle(ko);
    }

    for (std::size_t fi = 0; fi < nf; ++fi) {
      const auto per_task = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.fractions[fi] * n)));
      for (std::size_t bi = 0; bi < nb; ++bi) {
        const double beta = cfg.betas[bi];
        Rng train_rng = root.split(3);  // common random numbers across cells
        Point theta(f.dim, 0.0), slow(f.dim, 0.0), grad(f.dim);
        std::vector<const Point*> buffer;
        for (std::size_t k = 0; k < f.tasks; ++k) {
          std::vector<std::size_t> order(n);
          std::iota(order.begin(), order.end(), 0);
          train_rng.shuffle(order);
          for (std::size_t start = 0; start < n; start += cfg.batch) {
            const std::size_t stop = std::min(n, start + cfg.batch);
            std::fill(grad.begin(), grad.end(), 0.0);
            std::size_t count = 0;
            auto add = [&](const Point& z) {
              for (std::size_t d = 0; d < f.dim; ++d) grad[d] += f.mu * (theta[d] - z[d]);
              ++count;
            };
            for (std::size_t i = start; i < stop; ++i) add(world.data[k][order[i]]);
            if (!buffer.empty()) {
              const std::size_t m = std::min(cfg.replay_batch, buffer.size());
              for (std::size_t r = 0; r < m; ++r) {
                const auto j = r + static_cast<std::size_t>(train_rng.below(buffer.size() - r));
                std::swap(buffer[r], buffer[j]);
                add(*buffer[r]);
              }
            }
            for (std::size_t d = 0; d < f.dim; ++d) {
              theta[d] -= cfg.eta * grad[d] / static_cast<double>(count);
              slow[d] = beta * slow[d] + (1.0 - beta) * theta[d];
            }
          }
          for (std::size_t i = 0; i < per_task; ++i) buffer.push_back(&world.data[k][keep_order[k][i]]);
        }
        double total = 0.0;
        for (std::size_t k = 0; k + 1 < f.tasks; ++k) total += excess(slow, world.optima[k], f.mu);
        forget[fi * nb + bi].push_back(total / static_cast<double>(f.tasks - 1));
      }

      if (s < mmd_seeds) {
        std::vector<Point> probes(world.optima.begin(), world.optima.end() - 1);
        Samples buf;
        for (std::size_t k = 0; k + 1 < f.tasks; ++k) {
          for (std::size_t i = 0; i < per_task; ++i) buf.push_back(world.data[k][keep_order[k][i]]);
        }
        Rng fresh_rng = root.split(4);
        const Samples fresh = loss_features(fresh_past(world, f, n_fresh, fresh_rng), probes, f.mu);
        const Samples bfeat = loss_features(buf, probes, f.mu);
        const double h = median_bandwidth(bfeat, fresh);
        mmd_sum[fi] += buffer_mmd(bfeat, fresh, h);
      }
    }

    if (s < mmd_seeds) {
      std::vector<Point> probes(world.optima.begin(), world.optima.end() - 1);
      const std::size_t half = n_fresh / 2;
      for (std::size_t d = 0; d < std::max<std::size_t>(1, cfg.null_draws / mmd_seeds); ++d) {
        Rng null_rng = root.split(100 + d);
        const Samples x = loss_features(fresh_past(world, f, half, null_rng), probes, f.mu);
        const Samples y = loss_features(fresh_past(world, f, half, null_rng), probes, f.mu);
        null_draws.push_back(std::abs(mmd_unbiased(x, y).value));
      }
    }
  }

  ComplementarityReport rep;
  for (std::size_t fi = 0; fi < nf; ++fi) {
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const auto& v = forget[fi * nb + bi];
      const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - m) * (x - m);
      const double se = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
      rep.cells.push_back({cfg.fractions[fi], cfg.betas[bi], m, se});
    }
    rep.mmd.push_back({cfg.fractions[fi], mmd_sum[fi] / static_cast<double>(mmd_seeds)});
  }
  std::sort(null_draws.begin(), null_draws.end());
  const auto q = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(null_draws.size()))) - 1;
  rep.null_threshold = null_draws[std::min(q, null_draws.size() - 1)];
  return rep;
}

// --- surprise vs gradient norm -------------------------------------------------

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

RankCorrelation spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: samples differ in length");
  RankCorrelation out;
  out.n = x.size();
  if (out.n < 3) return out;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(out.n);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < out.n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return out;  // a constant sample has no ranking
  out.defined = true;
  out.rho = sxy / std::sqrt(sxx * syy);
  if (out.n > 3 && std::abs(out.rho) < 1.0) {
    const double z = std::atanh(out.rho), se = 1.0 / std::sqrt(n - 3.0);
    out.ci_low = std::tanh(z - 1.959963984540054 * se);
    out.ci_high = std::tanh(z + 1.959963984540054 * se);
  } else {
    out.ci_low = out.ci_high = out.rho;
  }
  return out;
}

SurpriseGradientReport surprise_gradient_correlation(DualAdapterModel& model, std::span<const TokenSeq> data,
                                                     TargetSpan span) {
  SurpriseGradientReport rep;
  const std::vector<TargetSpan> spans{span};
  for (const auto& seq : data) {
    nn::Tape tape;
    ForwardOptions opts;
    opts.mode = AdapterMode::fast;
    const std::vector<TokenSeq> one{seq};
    nn::Var loss = model.span_loss(tape, one, spans, opts);
    rep.surprise.push_back(tape.value(loss)[0]);
    rep.gradient_norm.push_back(tape.backward(loss).global_norm());
  }
  rep.correlation = spearman(rep.surprise, rep.gradient_norm);
  return rep;
}

// --- tables -----------------------------------------------------------------

std::string to_csv(const EmaReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "beta,fast_excess_risk,slow_excess_risk,fast_variance,slow_variance,predicted_slow_variance,diverged\n";
  for (const auto& row : r.rows) {
    os << row.beta << ',' << row.fast_excess_risk << ',' << row.slow_excess_risk << ',' << row.fast_variance << ','
       << row.slow_variance << ',' << row.predicted_slow_variance << ',' << (row.diverged ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string to_csv(const std::vector<IidEmaRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "beta,measured_variance,predicted_variance,relative_error\n";
  for (const auto& row : rows) {
    os << row.beta << ',' << row.measured << ',' << row.predicted << ','
       << std::abs(row.measured - row.predicted) / row.predicted << '\n';
  }
  return os.str();
}

std::string to_csv(const ComplementarityReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "fraction,beta,forgetting,forgetting_se,buffer_mmd2\n";
  for (const auto& c : r.cells) {
    double mmd = 0.0;
    for (const auto& m : r.mmd) {
      if (m.fraction == c.fraction) mmd = m.mmd;
    }
    os << c.fraction << ',' << c.beta << ',' << c.forgetting << ',' << c.forgetting_se << ',' << mmd << '\n';
  }
  return os.str();
}

}  // namespace sure::theory
