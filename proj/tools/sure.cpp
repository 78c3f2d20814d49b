// SPDX-License-Identifier: Apache-2.0
// Command-line front end: run, resume, report, theory, grad-check, stream-preview.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "sure/checkpoint.hpp"
#include "sure/config.hpp"
#include "sure/error.hpp"
#include "sure/experiment.hpp"
#include "sure/model.hpp"
#include "sure/tasks.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kCheckFailed = 3;

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
};

void add_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.file, "Config file (flat key = value)");
  cmd->add_option("-s,--set", args.sets, "Override one key: section.key=value (repeatable)");
  cmd->allow_extras();  // --section.key=value or --section.key value
}

void apply_override(sure::ExperimentConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw sure::ConfigError("override '" + kv + "' is not key=value");
  sure::set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
}

// Extras arrive as raw tokens; pair "--key value" and split "--key=value".
void apply_extras(sure::ExperimentConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string tok = extras[i];
    if (!tok.starts_with("--")) throw sure::ConfigError("unexpected argument '" + tok + "'");
    tok = tok.substr(2);
    if (tok.find('=') == std::string::npos) {
      if (i + 1 >= extras.size()) throw sure::ConfigError("flag --" + tok + " needs a value");
      tok += "=" + extras[++i];
    }
    apply_override(cfg, tok);
  }
}

sure::ExperimentConfig build_config(const ConfigArgs& args, const CLI::App* cmd, sure::ExperimentConfig base = {}) {
  if (!args.file.empty()) base = sure::load_config_file(args.file);
  for (const auto& kv : args.sets) apply_override(base, kv);
  apply_extras(base, cmd->remaining());
  sure::validate(base);
  return base;
}

void print_progress(const sure::CellId& id, std::size_t done, std::size_t n) {
  std::fprintf(stderr, "  %s  stage %zu/%zu\n", sure::cell_path(id).c_str(), done, n);
}

int print_summary(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "summary.csv";
  std::FILE* f = std::fopen(path.string().c_str(), "r");
  if (!f) return kOk;
  char buf[512];
  while (std::fgets(buf, sizeof buf, f)) std::fputs(buf, stdout);
  std::fclose(f);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surprise-prioritised replay with dual fast/slow adapters"};
  app.require_subcommand(1);

  ConfigArgs run_args;
  auto* run = app.add_subcommand("run", "Run an experiment grid");
  add_config_args(run, run_args);

  std::string resume_dir;
  ConfigArgs resume_args;
  auto* resume = app.add_subcommand("resume", "Continue an interrupted grid from its checkpoints");
  resume->add_option("dir", resume_dir, "Output directory of the interrupted run")->required();
  resume->add_option("-s,--set", resume_args.sets, "Override a run.* key (others must match the checkpoint)");
  resume->allow_extras();

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Render tables and heatmap data from run artifacts");
  report->add_option("dir", report_dir, "Output directory")->required();

  std::string theory_dir = "theory-out";
  sure::TheoryOptions theory_opts;
  auto* theory = app.add_subcommand("theory", "Run the EMA, MMD and complementarity experiments");
  theory->add_option("-o,--out", theory_dir, "Directory for the theory tables");
  theory->add_option("--seed", theory_opts.seed, "Seed");
  theory->add_flag("--quick", theory_opts.quick, "Shorter chains");

  double grad_tol = 1e-3;
  std::uint64_t grad_seed = 7;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of the full model");
  grad->add_option("--tolerance", grad_tol, "Maximum relative error");
  grad->add_option("--seed", grad_seed, "Seed");

  ConfigArgs preview_args;
  std::size_t preview_n = 2;
  auto* preview = app.add_subcommand("stream-preview", "Print the synthetic task stream a config describes");
  add_config_args(preview, preview_args);
  preview->add_option("-n,--examples", preview_n, "Examples shown per task");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) {
      const auto cfg = build_config(run_args, run);
      const auto t0 = std::chrono::steady_clock::now();
      const auto result = sure::run_experiment(cfg, false, print_progress);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "%s in %.1fs -> %s\n", result.complete ? "finished" : "stopped", secs,
                   cfg.output_dir.c_str());
      return print_summary(cfg.output_dir);
    }
    if (*resume) {
      auto cfg = sure::load_config_file((std::filesystem::path(resume_dir) / "effective_config.txt").string());
      const std::uint64_t hash = sure::config_hash(cfg);
      cfg.stop_after_stage = 0;
      for (const auto& kv : resume_args.sets) apply_override(cfg, kv);
      apply_extras(cfg, resume->remaining());
      cfg.output_dir = resume_dir;
      if (sure::config_hash(cfg) != hash) {
        throw sure::ConfigError("resume: only run.* keys may change; the checkpoints were written under another config");
      }
      sure::validate(cfg);
      const auto result = sure::run_experiment(cfg, true, print_progress);
      std::fprintf(stderr, "%s -> %s\n", result.complete ? "finished" : "stopped", cfg.output_dir.c_str());
      return print_summary(cfg.output_dir);
    }
    if (*report) {
      const auto r = sure::emit_report(report_dir);
      std::printf("%zu complete runs; report written to %s/report\n", r.runs, report_dir.c_str());
      for (const auto& m : r.missing) std::printf("missing: %s\n", m.c_str());
      return kOk;
    }
    if (*theory) {
      sure::write_theory_tables(theory_dir, theory_opts);
      std::printf("theory tables written to %s/theory\n", theory_dir.c_str());
      return kOk;
    }
    if (*grad) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto rep = sure::check_model_gradients(grad_tol, grad_seed);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (const auto& e : rep.entries) {
        std::printf("%-28s n=%-5zu max_rel_err=%.3e\n", e.name.c_str(), e.elements, e.max_rel_error);
      }
      std::printf("%s: max relative error %.3e (tolerance %.1e), %.2fs\n", rep.passed ? "PASS" : "FAIL",
                  rep.max_error, grad_tol, secs);
      return rep.passed ? kOk : kCheckFailed;
    }
    if (*preview) {
      const auto cfg = build_config(preview_args, preview);
      const auto stream = sure::stream_for(cfg);
      std::printf("%zu tasks x %zu classes, %zu content tokens + separator %u + label; vocab %zu\n",
                  stream.tasks.size(), cfg.stream.classes_per_task, cfg.stream.seq_tokens, stream.separator,
                  cfg.stream.vocab_size);
      for (const auto& task : stream.tasks) {
        std::printf("task %zu: labels", task.id);
        for (auto l : task.labels) std::printf(" %u", l);
        std::printf("; %zu train, %zu test, Bayes accuracy %.4f\n", task.train.size(), task.test.size(),
                    sure::bayes_accuracy(task, cfg.stream.seq_tokens));
        for (std::size_t i = 0; i < std::min(preview_n, task.train.size()); ++i) {
          std::printf("  ");
          for (auto t : task.train[i].tokens) std::printf("%u ", t);
          std::printf("\n");
        }
      }
      for (std::size_t id : cfg.orders) {
        std::printf("order %zu:", id);
        for (auto t : sure::order_permutation(cfg, id)) std::printf(" %zu", t);
        std::printf("\n");
      }
      return kOk;
    }
  } catch (const sure::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kOk;
}
