// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sure/config.hpp"
#include "sure/tasks.hpp"
#include "sure/trainer.hpp"

namespace sure {

struct CellId {
  Method method = Method::seqft;
  std::size_t order_id = 0;
  std::uint64_t seed = 0;
};

/// runs/<method>/order-<o>/seed-<s>, relative to the output directory.
std::string cell_path(const CellId& id);

struct CellResult {
  CellId id;
  AccuracyMatrix matrix;
  bool complete = false;
};

struct ExperimentResult {
  std::vector<CellResult> cells;
  bool complete = false;
};

/// Called after each finished stage of each cell; for progress output only.
using ProgressFn = std::function<void(const CellId&, std::size_t stages_done, std::size_t n_stages)>;

/// Runs every (method, order, seed) cell of the grid and writes
///   effective_config.txt, MANIFEST, summary.csv, runs.csv and per cell
///   accuracy_matrix.csv, heatmap.csv, steps.jsonl, checkpoint.bin.
/// With `resume`, cells restart from their checkpoint (finished cells are
/// read back, not retrained). Artifact content depends only on the config.
ExperimentResult run_experiment(const ExperimentConfig& config, bool resume = false, const ProgressFn& progress = {});

/// Builds the stream a config describes.
TaskStream stream_for(const ExperimentConfig& config);

struct RunMetrics {
  double fp = 0.0, ap = 0.0, forget = 0.0, chaudhry = 0.0;  // fractions
};
RunMetrics metrics_of(const AccuracyMatrix& m);

struct ReportResult {
  std::vector<std::string> missing;  // expected artifacts that were not found
  std::size_t runs = 0;
};

/// Writes report/ under `dir`: fp_by_order.csv, metrics.csv, report.md
/// (best bold, second underlined), heatmaps/*.csv and any theory tables.
ReportResult emit_report(const std::string& dir);

struct TheoryOptions {
  std::uint64_t seed = 1;
  bool quick = false;  // shorter chains for smoke runs
};

/// Runs the theory harness and writes its tables under `dir`/theory.
void write_theory_tables(const std::string& dir, const TheoryOptions& options);

}  // namespace sure
