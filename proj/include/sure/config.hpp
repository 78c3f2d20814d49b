// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sure/model.hpp"
#include "sure/tasks.hpp"
#include "sure/trainer.hpp"

namespace sure {

/// Everything that determines an experiment grid. One config file (plus
/// command-line overrides) fully determines every artifact.
struct ExperimentConfig {
  ModelConfig model;
  TrainSchedule schedule;
  /// Buffer size as a fraction of one run's training examples; when set it
  /// replaces schedule.buffer_capacity.
  std::optional<double> buffer_fraction;
  /// Replay ratio 1:r; when set it replaces schedule.replay_interval.
  std::optional<std::size_t> replay_ratio;

  StreamSpec stream;
  std::uint64_t stream_seed = 0;

  std::vector<Method> methods;  // empty: just schedule.method
  std::vector<std::size_t> orders{0};
  std::map<std::size_t, std::vector<std::size_t>> order_table;  // explicit permutations by id
  std::vector<std::uint64_t> seeds{0};

  std::string output_dir = "out";
  /// Checkpoint and stop once this many stages are done (0 = never).
  std::size_t stop_after_stage = 0;
};

/// Applies one `key = value` assignment. Unknown keys and malformed values
/// raise ConfigError.
void set_config_key(ExperimentConfig& config, std::string_view key, std::string_view value);

/// Parses the flat `section.key = value` format. `#` starts a comment.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config_file(const std::string& path);

/// Cross-field checks (model/stream compatibility, grid sanity).
void validate(const ExperimentConfig& config);

/// Canonical text listing every key, with order permutations spelled out.
/// parse_config(to_text(c)) reproduces c.
std::string to_text(const ExperimentConfig& config);

/// FNV-1a over the canonical text minus the run-control keys
/// (output directory, stop point), so a resumed run matches its checkpoint.
std::uint64_t config_hash(const ExperimentConfig& config);

std::vector<Method> grid_methods(const ExperimentConfig& config);
std::vector<std::size_t> order_permutation(const ExperimentConfig& config, std::size_t order_id);
/// The schedule one grid cell trains with.
TrainSchedule schedule_for(const ExperimentConfig& config, Method method);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace sure
