// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sure/model.hpp"
#include "sure/rng.hpp"

namespace sure::theory {

using Point = std::vector<double>;
using Samples = std::vector<Point>;

/// exp(-|x - y|^2 / (2 h^2)).
double rbf(std::span<const double> x, std::span<const double> y, double bandwidth);

/// Median pairwise distance of the pooled sample. At most `max_points`
/// points from each side enter the median (the leading ones).
double median_bandwidth(const Samples& p, const Samples& q, std::size_t max_points = 500);

struct MmdEstimate {
  double value = 0.0;  // unbiased squared MMD; may dip below zero
  double bandwidth = 0.0;
  std::size_t n_p = 0;
  std::size_t n_q = 0;
};

/// Unbiased U-statistic of squared MMD under an RBF kernel. Without an
/// explicit bandwidth the median heuristic is used.
MmdEstimate mmd_unbiased(const Samples& p, const Samples& q, std::optional<double> bandwidth = std::nullopt);

// --- EMA on noisy quadratics -------------------------------------------------

struct QuadraticFamily {
  std::size_t dim = 1;
  double mu = 1.0;          // curvature
  double sigma2 = 1.0;      // gradient noise variance per coordinate
  std::size_t tasks = 5;
  double drift = 0.1;       // |theta*_{k+1} - theta*_k|
  double data_sd = 3.0;     // per-coordinate sd of task samples (complementarity)
  std::size_t samples_per_task = 1000;
};

void validate(const QuadraticFamily& f);

struct EmaRow {
  double beta = 0.0;
  double fast_excess_risk = 0.0;
  double slow_excess_risk = 0.0;
  double fast_variance = 0.0;
  double slow_variance = 0.0;
  double predicted_slow_variance = 0.0;  // AR(1) closed form
  bool diverged = false;
};

struct EmaReport {
  double eta = 0.0;
  std::size_t steps = 0;
  std::size_t burn_in_max = 0;
  std::size_t seeds = 0;
  std::vector<EmaRow> rows;
};

/// SGD with additive Gaussian gradient noise on R(theta) = mu/2 |theta - theta*|^2,
/// plus an EMA of the iterates. Statistics are time averages after a burn-in
/// of ten EMA windows (and ten relaxation times of the fast iterate),
/// averaged over seeds. beta = 0 makes the slow iterate the fast one.
EmaReport ema_quadratic_experiment(const QuadraticFamily& family, double eta, std::span<const double> betas,
                                   std::size_t steps, std::size_t seeds, std::uint64_t seed);

struct IidEmaRow {
  double beta = 0.0;
  double measured = 0.0;
  double predicted = 0.0;  // sigma^2 (1 - beta) / (1 + beta)
};

/// EMA of i.i.d. N(0, sigma^2) draws; no curvature involved.
std::vector<IidEmaRow> ema_iid_control(double sigma2, std::span<const double> betas, std::size_t steps,
                                       std::size_t seeds, std::uint64_t seed);

// --- selection vs integration --------------------------------------------------

struct ComplementarityConfig {
  QuadraticFamily family{10, 1.0, 0.0, 5, 0.1, 3.0, 1000};
  double eta = 0.2;
  std::size_t batch = 8;
  std::size_t replay_batch = 4;
  std::vector<double> fractions{0.01, 0.03, 0.1, 0.3, 1.0};
  std::vector<double> betas{0.5, 0.9, 0.99, 0.995};
  std::size_t seeds = 20;
  std::size_t probes = 4;         // loss features per example for the MMD
  std::size_t null_draws = 20;    // MMD draws between fresh samples
  std::uint64_t seed = 1;
};

struct ComplementarityCell {
  double fraction = 0.0;
  double beta = 0.0;
  double forgetting = 0.0;  // mean past-task excess risk of the slow iterate
  double forgetting_se = 0.0;
};

struct FractionMmd {
  double fraction = 0.0;
  double mmd = 0.0;  // mean over seeds
};

struct ComplementarityReport {
  std::vector<ComplementarityCell> cells;
  std::vector<FractionMmd> mmd;
  double null_threshold = 0.0;  // 95th percentile of |MMD^2| between fresh samples

  const ComplementarityCell& at(double fraction, double beta) const;
  /// Best (lowest forgetting) beta for a fraction.
  const ComplementarityCell& best_for_fraction(double fraction) const;
  const ComplementarityCell& worst_for_fraction(double fraction) const;
  const ComplementarityCell& minimum() const;
};

/// Sequential quadratic tasks with subsampled replay: the buffer keeps a
/// fraction of each past task's samples and every step mixes a replay batch
/// into the current batch. Forgetting is the mean over past tasks of
/// R_k(theta_final) - R_k(theta*_k) under the slow iterate.
ComplementarityReport complementarity_experiment(const ComplementarityConfig& config);

// --- surprise vs gradient norm -------------------------------------------------

struct RankCorrelation {
  bool defined = false;
  double rho = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
};

/// Average ranks (1-based), ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);
/// Spearman's rho with a 95% Fisher-z interval.
RankCorrelation spearman(std::span<const double> x, std::span<const double> y);

struct SurpriseGradientReport {
  std::vector<double> surprise;       // avg NLL per token
  std::vector<double> gradient_norm;  // |d loss / d fast adapters|
  RankCorrelation correlation;
};

/// Per-example average surprise against the norm of the per-example loss
/// gradient with respect to the fast adapters (evaluation mode).
SurpriseGradientReport surprise_gradient_correlation(DualAdapterModel& model, std::span<const TokenSeq> data,
                                                     TargetSpan span);

std::string to_csv(const EmaReport& r);
std::string to_csv(const std::vector<IidEmaRow>& rows);
std::string to_csv(const ComplementarityReport& r);

}  // namespace sure::theory
