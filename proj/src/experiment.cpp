// SPDX-License-Identifier: Apache-2.0
#include "sure/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "sure/checkpoint.hpp"
#include "sure/error.hpp"
#include "sure/theory.hpp"

namespace fs = std::filesystem;

namespace sure {

namespace {

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round2(to_percent(fraction)));
  return buf;
}

std::string pct_value(double percent) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round2(percent));
  return buf;
}

// Keeps the first `lines` lines of a log so a resumed run appends exactly
// where its checkpoint left off.
void truncate_log(const fs::path& path, std::uint64_t lines) {
  std::string kept;
  if (lines > 0 && fs::exists(path)) {
    const std::string text = read_file(path);
    std::size_t pos = 0;
    for (std::uint64_t i = 0; i < lines; ++i) {
      const auto nl = text.find('\n', pos);
      if (nl == std::string::npos) throw CheckpointError("step log is shorter than its checkpoint records");
      pos = nl + 1;
    }
    kept = text.substr(0, pos);
  }
  write_file(path, kept);
}

std::string manifest_text(const ExperimentConfig& config, const std::vector<CellResult>& cells, bool complete,
                          const std::string& error) {
  std::ostringstream os;
  os << "status = " << (complete ? "complete" : "incomplete") << '\n';
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(config)));
  os << "config_hash = " << hash << '\n';
  if (!error.empty()) os << "error = " << error << '\n';
  for (const auto& c : cells) {
    os << cell_path(c.id) << " = " << (c.complete ? "complete" : "incomplete") << " (" << c.matrix.completed_stages()
       << '/' << c.matrix.size() << " stages)\n";
  }
  return os.str();
}

std::string runs_csv(const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "method,order,seed,fp,ap,forget,chaudhry_af\n";
  for (const auto& c : cells) {
    if (!c.complete) continue;
    const RunMetrics m = metrics_of(c.matrix);
    os << to_string(c.id.method) << ',' << c.id.order_id << ',' << c.id.seed << ',' << pct(m.fp) << ',' << pct(m.ap)
       << ',' << pct_value(to_percent(m.ap) - to_percent(m.fp)) << ',' << pct(m.chaudhry) << '\n';
  }
  return os.str();
}

std::string summary_csv(const std::vector<Method>& methods, const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "method,runs,fp,ap,forget,chaudhry_af\n";
  for (Method method : methods) {
    RunMetrics sum;
    std::size_t n = 0;
    for (const auto& c : cells) {
      if (!c.complete || c.id.method != method) continue;
      const RunMetrics m = metrics_of(c.matrix);
      sum.fp += m.fp;
      sum.ap += m.ap;
      sum.chaudhry += m.chaudhry;
      ++n;
    }
    if (n == 0) continue;
    const double k = static_cast<double>(n);
    const double fp = to_percent(sum.fp / k), ap = to_percent(sum.ap / k);
    os << to_string(method) << ',' << n << ',' << pct_value(fp) << ',' << pct_value(ap) << ','
       << pct_value(round2(ap) - round2(fp)) << ',' << pct(sum.chaudhry / k) << '\n';
  }
  return os.str();
}

}  // namespace

std::string cell_path(const CellId& id) {
  return "runs/" + std::string(to_string(id.method)) + "/order-" + std::to_string(id.order_id) + "/seed-" +
         std::to_string(id.seed);
}

TaskStream stream_for(const ExperimentConfig& config) { return generate_stream(config.stream, config.stream_seed); }

RunMetrics metrics_of(const AccuracyMatrix& m) {
  RunMetrics out;
  out.fp = final_performance(m);
  out.ap = average_performance(m);
  out.forget = forgetting(m);
  out.chaudhry = m.size() > 1 ? chaudhry_forgetting(m) : 0.0;
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& config, bool resume, const ProgressFn& progress) {
  validate(config);
  const fs::path root(config.output_dir);
  fs::create_directories(root);
  write_file(root / "effective_config.txt", to_text(config));
  const std::uint64_t hash = config_hash(config);
  const TaskStream stream = stream_for(config);
  const std::size_t n = config.stream.n_tasks;
  const auto methods = grid_methods(config);

  ExperimentResult result;
  for (Method method : methods) {
    for (std::size_t order_id : config.orders) {
      for (std::uint64_t seed : config.seeds) result.cells.push_back({{method, order_id, seed}, AccuracyMatrix(n), false});
    }
  }
  write_file(root / "MANIFEST", manifest_text(config, result.cells, false, ""));

  try {
    for (auto& cell : result.cells) {
      const fs::path dir = root / cell_path(cell.id);
      fs::create_directories(dir);
      const TrainSchedule schedule = schedule_for(config, cell.id.method);
      const auto order = order_permutation(config, cell.id.order_id);
      const Checkpoint header{hash, cell.id.method, cell.id.order_id, cell.id.seed};
      RunState state(config.model, schedule, n, cell.id.seed);

      const fs::path ckpt = dir / "checkpoint.bin";
      if (resume && fs::exists(ckpt)) {
        const Checkpoint got = load_checkpoint(ckpt.string(), state, hash);
        if (got.method != cell.id.method || got.order_id != cell.id.order_id || got.seed != cell.id.seed) {
          throw CheckpointError("checkpoint in '" + dir.string() + "' belongs to another grid cell");
        }
      }
      truncate_log(dir / "steps.jsonl", state.log_records);

      if (state.next_stage < n && !(config.stop_after_stage && state.next_stage >= config.stop_after_stage)) {
        std::ofstream log(dir / "steps.jsonl", std::ios::binary | std::ios::app);
        SequenceHooks hooks;
        hooks.on_step = [&](const StepRecord& r) { log << to_json(r) << '\n'; };
        hooks.on_stage_end = [&](const RunState& s) {
          log.flush();
          save_checkpoint(ckpt.string(), header, s);
          write_file(dir / "accuracy_matrix.csv", s.matrix.to_csv());
          if (progress) progress(cell.id, s.next_stage, n);
          return !(config.stop_after_stage && s.next_stage >= config.stop_after_stage);
        };
        run_task_sequence(state, stream, order, schedule, hooks);
      } else if (!fs::exists(ckpt)) {
        save_checkpoint(ckpt.string(), header, state);
      }

      cell.matrix = state.matrix;
      cell.complete = state.next_stage == n;
      write_file(dir / "accuracy_matrix.csv", cell.matrix.to_csv());
      write_file(dir / "heatmap.csv", cell.matrix.to_long_csv());
    }
  } catch (const std::exception& e) {
    write_file(root / "MANIFEST", manifest_text(config, result.cells, false, e.what()));
    throw;
  }

  result.complete = std::all_of(result.cells.begin(), result.cells.end(), [](const auto& c) { return c.complete; });
  if (result.complete) {
    write_file(root / "runs.csv", runs_csv(result.cells));
    write_file(root / "summary.csv", summary_csv(methods, result.cells));
  } else {
    fs::remove(root / "runs.csv");
    fs::remove(root / "summary.csv");
  }
  write_file(root / "MANIFEST", manifest_text(config, result.cells, result.complete, ""));
  return result;
}

// --- report ------------------------------------------------------------------

namespace {

struct FoundRun {
  CellId id;
  std::string method_name;
  AccuracyMatrix matrix;
};

std::vector<std::string> csv_rows(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string markdown_table(const std::vector<std::string>& rows, bool mark_best) {
  if (rows.empty()) return "";
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) cells.push_back(split(r, ','));
  const std::size_t cols = cells.front().size();
  if (mark_best && cells.size() > 2) {
    for (std::size_t c = 1; c < cols; ++c) {
      std::vector<std::pair<double, std::size_t>> vals;
      for (std::size_t r = 1; r < cells.size(); ++r) {
        if (c < cells[r].size() && !cells[r][c].empty()) vals.emplace_back(std::stod(cells[r][c]), r);
      }
      std::sort(vals.begin(), vals.end(), [](auto& a, auto& b) { return a.first > b.first; });
      if (!vals.empty()) cells[vals[0].second][c] = "**" + cells[vals[0].second][c] + "**";
      if (vals.size() > 1) cells[vals[1].second][c] = "<u>" + cells[vals[1].second][c] + "</u>";
    }
  }
  std::ostringstream os;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    os << '|';
    for (const auto& v : cells[r]) os << ' ' << v << " |";
    os << '\n';
    if (r == 0) {
      os << '|';
      for (std::size_t c = 0; c < cols; ++c) os << " --- |";
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace

ReportResult emit_report(const std::string& dir_name) {
  const fs::path root(dir_name);
  if (!fs::is_directory(root)) throw ConfigError("report: '" + dir_name + "' is not a directory");
  ReportResult result;
  std::vector<FoundRun> runs;

  // Expected cells come from the recorded config when there is one.
  std::set<std::string> expected;
  if (fs::exists(root / "effective_config.txt")) {
    const ExperimentConfig cfg = load_config_file((root / "effective_config.txt").string());
    for (Method m : grid_methods(cfg)) {
      for (std::size_t o : cfg.orders) {
        for (std::uint64_t s : cfg.seeds) expected.insert(cell_path({m, o, s}));
      }
    }
  }

  const fs::path runs_dir = root / "runs";
  std::set<std::string> seen;
  if (fs::is_directory(runs_dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(runs_dir)) {
      if (e.is_regular_file() && e.path().filename() == "accuracy_matrix.csv") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const fs::path seed_dir = f.parent_path(), order_dir = seed_dir.parent_path(), method_dir = order_dir.parent_path();
      const std::string rel = "runs/" + method_dir.filename().string() + "/" + order_dir.filename().string() + "/" +
                              seed_dir.filename().string();
      FoundRun run;
      try {
        run.id.method = parse_method(method_dir.filename().string());
        run.id.order_id = std::stoul(order_dir.filename().string().substr(6));
        run.id.seed = std::stoull(seed_dir.filename().string().substr(5));
        run.matrix = AccuracyMatrix::from_csv(read_file(f));
      } catch (const std::exception&) {
        result.missing.push_back(rel + " (unreadable)");
        continue;
      }
      seen.insert(rel);
      if (run.matrix.completed_stages() != run.matrix.size()) {
        result.missing.push_back(rel + " (incomplete)");
        continue;
      }
      run.method_name = method_dir.filename().string();
      runs.push_back(std::move(run));
    }
  }
  for (const auto& e : expected) {
    if (!seen.count(e)) result.missing.push_back(e + "/accuracy_matrix.csv");
  }
  result.runs = runs.size();

  // Method x order FP table (percent), with the row mean over orders.
  std::vector<std::string> methods;
  std::set<std::size_t> orders;
  for (const auto& r : runs) {
    if (std::find(methods.begin(), methods.end(), r.method_name) == methods.end()) methods.push_back(r.method_name);
    orders.insert(r.id.order_id);
  }
  auto order_of = [](const std::string& name) {
    try {
      return static_cast<int>(parse_method(name));
    } catch (const Error&) {
      return 99;
    }
  };
  std::sort(methods.begin(), methods.end(), [&](auto& a, auto& b) { return order_of(a) < order_of(b); });

  std::vector<std::string> fp_rows, metric_rows;
  {
    std::string header = "method";
    for (std::size_t o : orders) header += ",order-" + std::to_string(o);
    header += ",mean";
    fp_rows.push_back(header);
    metric_rows.push_back("method,runs,fp,ap,forget,chaudhry_af");
  }
  for (const auto& m : methods) {
    std::string row = m;
    double order_sum = 0.0;
    std::size_t order_count = 0;
    RunMetrics total;
    std::size_t count = 0;
    for (std::size_t o : orders) {
      double s = 0.0;
      std::size_t k = 0;
      for (const auto& r : runs) {
        if (r.method_name != m || r.id.order_id != o) continue;
        const RunMetrics x = metrics_of(r.matrix);
        s += x.fp;
        total.fp += x.fp;
        total.ap += x.ap;
        total.chaudhry += x.chaudhry;
        ++k;
        ++count;
      }
      row += ',';
      if (k) {
        row += pct(s / static_cast<double>(k));
        order_sum += s / static_cast<double>(k);
        ++order_count;
      }
    }
    row += "," + pct(order_sum / static_cast<double>(order_count));
    fp_rows.push_back(row);
    const double c = static_cast<double>(count);
    const double fp = to_percent(total.fp / c), ap = to_percent(total.ap / c);
    metric_rows.push_back(m + "," + std::to_string(count) + "," + pct_value(fp) + "," + pct_value(ap) + "," +
                          pct_value(round2(ap) - round2(fp)) + "," + pct(total.chaudhry / c));
  }

  const fs::path out = root / "report";
  fs::create_directories(out);
  auto join_rows = [](const std::vector<std::string>& rows) {
    std::string s;
    for (const auto& r : rows) s += r + '\n';
    return s;
  };
  write_file(out / "fp_by_order.csv", join_rows(fp_rows));
  write_file(out / "metrics.csv", join_rows(metric_rows));
  for (const auto& r : runs) {
    write_file(out / "heatmaps" /
                   (r.method_name + "_order-" + std::to_string(r.id.order_id) + "_seed-" + std::to_string(r.id.seed) +
                    ".csv"),
               r.matrix.to_long_csv());
  }

  std::ostringstream md;
  md << "# Results\n\nFinal performance (%) by task order. Best in **bold**, second <u>underlined</u>.\n\n"
     << markdown_table(fp_rows, true) << "\nAll metrics (%), averaged over runs.\n\n"
     << markdown_table(metric_rows, false);
  const fs::path theory = root / "theory";
  if (fs::is_directory(theory)) {
    std::vector<fs::path> tables;
    for (const auto& e : fs::directory_iterator(theory)) {
      if (e.path().extension() == ".csv") tables.push_back(e.path());
    }
    std::sort(tables.begin(), tables.end());
    for (const auto& t : tables) {
      md << "\n## " << t.stem().string() << "\n\n" << markdown_table(csv_rows(read_file(t)), false);
    }
  }
  if (!result.missing.empty()) {
    md << "\n## Missing artifacts\n\n";
    for (const auto& m : result.missing) md << "- " << m << '\n';
  }
  write_file(out / "report.md", md.str());
  return result;
}

// --- theory tables -------------------------------------------------------------

void write_theory_tables(const std::string& dir, const TheoryOptions& options) {
  using namespace theory;
  const fs::path out = fs::path(dir) / "theory";
  fs::create_directories(out);

  const std::vector<double> betas{0.0, 0.5, 0.9, 0.99, 0.995};
  QuadraticFamily family;
  const EmaReport ema =
      ema_quadratic_experiment(family, 0.1, betas, options.quick ? 2000 : 20000, options.quick ? 4 : 20, options.seed);
  write_file(out / "ema_quadratic.csv", to_csv(ema));

  const std::vector<double> iid_betas{0.9, 0.99};
  write_file(out / "ema_iid.csv",
             to_csv(ema_iid_control(1.0, iid_betas, options.quick ? 20000 : 200000, 4, options.seed)));

  ComplementarityConfig comp;
  comp.seed = options.seed;
  if (options.quick) comp.seeds = 4;
  write_file(out / "complementarity.csv", to_csv(complementarity_experiment(comp)));

  // Two-sample sanity rows: a null pair and a fixed two-point pair.
  {
    Rng rng = Rng(options.seed).split(7);
    const std::size_t n = options.quick ? 300 : 2000;
    Samples p(n, Point(1)), q(n, Point(1));
    for (auto& x : p) x[0] = rng.normal();
    for (auto& x : q) x[0] = rng.normal();
    const MmdEstimate null = mmd_unbiased(p, q);
    const MmdEstimate two = mmd_unbiased({{0.0}, {0.0}}, {{1.0}, {1.0}}, 1.0);
    std::ostringstream os;
    os.precision(10);
    os << "case,n_p,n_q,bandwidth,mmd2\n"
       << "null_gaussian," << null.n_p << ',' << null.n_q << ',' << null.bandwidth << ',' << null.value << '\n'
       << "two_point," << two.n_p << ',' << two.n_q << ',' << two.bandwidth << ',' << two.value << '\n';
    write_file(out / "mmd_checks.csv", os.str());
  }

  {
    StreamSpec spec;
    spec.n_tasks = 2;
    spec.train_per_class = options.quick ? 8 : 32;
    const TaskStream stream = generate_stream(spec, options.seed);
    ModelConfig mc;
    mc.vocab_size = spec.vocab_size;
    DualAdapterModel model(mc, options.seed);
    std::vector<TokenSeq> data;
    for (const auto& ex : stream.tasks[0].train) data.push_back(ex.tokens);
    const auto full = stream.full_span();
    const auto rep = surprise_gradient_correlation(model, data, {full.begin, full.end});
    std::ostringstream os;
    os.precision(10);
    os << "n,defined,spearman_rho,ci_low,ci_high\n"
       << rep.correlation.n << ',' << (rep.correlation.defined ? 1 : 0) << ',' << rep.correlation.rho << ','
       << rep.correlation.ci_low << ',' << rep.correlation.ci_high << '\n';
    write_file(out / "surprise_gradient.csv", os.str());
  }
}

}  // namespace sure
