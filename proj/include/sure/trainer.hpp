// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sure/buffer.hpp"
#include "sure/model.hpp"
#include "sure/nn/sgd.hpp"
#include "sure/surprise.hpp"
#include "sure/tasks.hpp"

namespace sure {

enum class Method : std::uint8_t { seqft, reservoir_replay, surprise_replay, slow_reservoir, slow_surprise };

const char* to_string(Method m);
Method parse_method(const std::string& name);
bool uses_replay(Method m);
bool uses_slow(Method m);
BufferPolicy policy_for(Method m);

struct TrainSchedule {
  Method method = Method::slow_surprise;
  std::size_t batch_size = 64;
  std::size_t replay_batch = 32;
  std::size_t replay_interval = 2;  // every k-th step mixes in a replay batch
  std::size_t epochs = 1;
  double beta = 0.995;
  double learning_rate = 1e-3;
  std::optional<double> clip_norm;
  std::size_t buffer_capacity = 300;
  /// Empty means the method default: online for reservoir, SB-UB for surprise.
  std::optional<Timing> timing;
  SurpriseVariant surprise_variant = SurpriseVariant::avg_sequence;
  bool aging = false;
  bool evaluate_unseen = true;  // fill the upper triangle for heatmaps

  Timing effective_timing() const;
  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

void validate(const TrainSchedule& s);

/// Replay ratio 1:r (one replayed sequence per r new ones) as a replay interval.
std::size_t replay_interval_for_ratio(std::size_t r, std::size_t batch_size, std::size_t replay_batch);

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t task = 0;
  double loss = 0.0;
  bool mixed = false;
  std::size_t replayed = 0;
};

std::string to_json(const StepRecord& r);

struct RunState {
  RunState(const ModelConfig& model_config, const TrainSchedule& schedule, std::size_t n_tasks, std::uint64_t seed);

  DualAdapterModel model;
  std::optional<ReplayMemory> memory;
  Rng rng;
  std::size_t next_stage = 0;  // index into the task order
  std::uint64_t step = 0;
  std::size_t rejected_steps = 0;
  std::uint64_t log_records = 0;  // step records emitted so far
  AccuracyMatrix matrix;
};

using StepSink = std::function<void(const StepRecord&)>;

/// slow <- beta * slow + (1 - beta) * fast, element-wise.
void ema_update(nn::Tensor& slow, const nn::Tensor& fast, double beta);
void ema_update(AdapterSet& slow, const AdapterSet& fast, double beta);

/// One pass of the schedule over a single task, including the buffer
/// updates its timing prescribes.
void train_on_task(RunState& state, const TaskStream& stream, std::size_t task_id, const TrainSchedule& schedule,
                   const StepSink& sink = {});

/// Accuracy on every task's test split in `order` (column j is order[j]).
/// Columns beyond `seen` are skipped unless `all` is set.
std::vector<double> evaluate_all_tasks(DualAdapterModel& model, const TaskStream& stream,
                                       std::span<const std::size_t> order, AdapterMode mode,
                                       std::size_t seen, bool all = true);

double evaluate_task(DualAdapterModel& model, const TaskStream& stream, std::size_t task_id, AdapterMode mode);

AdapterMode eval_mode(Method m);

struct SequenceHooks {
  StepSink on_step;
  /// Called after a stage's matrix row is filled; returning false stops the run.
  std::function<bool(const RunState&)> on_stage_end;
};

/// Trains tasks order[state.next_stage..] and fills the matrix; resumes
/// cleanly from a state restored at a stage boundary.
void run_task_sequence(RunState& state, const TaskStream& stream, std::span<const std::size_t> order,
                       const TrainSchedule& schedule, const SequenceHooks& hooks = {});

}  // namespace sure
