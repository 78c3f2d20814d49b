// SPDX-License-Identifier: Apache-2.0
#include "sure/trainer.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "sure/error.hpp"

namespace sure {

const char* to_string(Method m) {
  switch (m) {
    case Method::seqft: return "seqft";
    case Method::reservoir_replay: return "reservoir_replay";
    case Method::surprise_replay: return "surprise_replay";
    case Method::slow_reservoir: return "slow_reservoir";
    case Method::slow_surprise: return "slow_surprise";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::seqft, Method::reservoir_replay, Method::surprise_replay, Method::slow_reservoir,
                   Method::slow_surprise}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

bool uses_replay(Method m) { return m != Method::seqft; }
bool uses_slow(Method m) { return m == Method::slow_reservoir || m == Method::slow_surprise; }

BufferPolicy policy_for(Method m) {
  return m == Method::surprise_replay || m == Method::slow_surprise ? BufferPolicy::surprise : BufferPolicy::reservoir;
}

AdapterMode eval_mode(Method m) { return uses_slow(m) ? AdapterMode::slow : AdapterMode::fast; }

Timing TrainSchedule::effective_timing() const {
  if (timing) return *timing;
  return policy_for(method) == BufferPolicy::surprise ? Timing::sb_ub : Timing::online;
}

void validate(const TrainSchedule& s) {
  if (s.batch_size == 0) throw ConfigError("schedule: batch_size must be positive");
  if (s.replay_batch == 0) throw ConfigError("schedule: replay_batch must be positive");
  if (s.replay_interval == 0) throw ConfigError("schedule: replay_interval must be at least 1");
  if (s.epochs == 0) throw ConfigError("schedule: epochs must be positive");
  if (!(s.beta > 0.0 && s.beta < 1.0)) throw ConfigError("schedule: beta must lie in (0, 1)");
  nn::validate(nn::SgdConfig{s.learning_rate, s.clip_norm});
  if (uses_replay(s.method)) {
    if (s.buffer_capacity == 0) throw ConfigError("schedule: buffer capacity must be positive");
    if (policy_for(s.method) == BufferPolicy::surprise && s.effective_timing() == Timing::online) {
      throw ConfigError("schedule: online timing applies to reservoir methods only");
    }
    if (s.aging && policy_for(s.method) != BufferPolicy::surprise) {
      throw ConfigError("schedule: aging applies to surprise methods only");
    }
  }
}

std::size_t replay_interval_for_ratio(std::size_t r, std::size_t batch_size, std::size_t replay_batch) {
  if (r == 0 || batch_size == 0) throw ConfigError("replay ratio must be 1:r with r >= 1");
  const std::size_t num = r * replay_batch;
  if (num % batch_size != 0 || num < batch_size) {
    throw ConfigError("replay ratio 1:" + std::to_string(r) + " is not reachable with batch " +
                      std::to_string(batch_size) + " and replay batch " + std::to_string(replay_batch));
  }
  return num / batch_size;
}

std::string to_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["task"] = r.task;
  j["loss"] = r.loss;
  j["mixed"] = r.mixed;
  j["replayed"] = r.replayed;
  return j.dump();
}

RunState::RunState(const ModelConfig& model_config, const TrainSchedule& schedule, std::size_t n_tasks,
                   std::uint64_t seed)
    : model(model_config, Rng(seed).split(1).next_u64()), rng(Rng(seed).split(2)), matrix(n_tasks) {
  if (uses_replay(schedule.method)) {
    memory.emplace(schedule.buffer_capacity, policy_for(schedule.method), schedule.effective_timing(), schedule.aging);
  }
}

void ema_update(nn::Tensor& slow, const nn::Tensor& fast, double beta) {
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("ema: beta must lie in (0, 1)");
  if (slow.shape() != fast.shape()) throw ShapeError("ema: slow and fast shapes differ");
  const double w = 1.0 - beta;
  double* s = slow.data();
  const double* f = fast.data();
  for (std::size_t i = 0; i < slow.size(); ++i) s[i] = beta * s[i] + w * f[i];
}

void ema_update(AdapterSet& slow, const AdapterSet& fast, double beta) {
  if (slow.adapters.size() != fast.adapters.size()) throw ShapeError("ema: adapter sets differ in size");
  for (std::size_t i = 0; i < slow.adapters.size(); ++i) {
    ema_update(slow.adapters[i].a.value, fast.adapters[i].a.value, beta);
    ema_update(slow.adapters[i].b.value, fast.adapters[i].b.value, beta);
    slow.adapters[i].a.touch();
    slow.adapters[i].b.touch();
  }
}

namespace {

ScoringSpans scoring_spans(const TaskStream& stream) { return {stream.full_span(), stream.label_span()}; }

std::vector<BufferEntry> scored_candidates(RunState& state, const Task& task, const TrainSchedule& schedule,
                                           const TaskStream& stream) {
  std::vector<TokenSeq> seqs;
  seqs.reserve(task.train.size());
  for (const auto& ex : task.train) seqs.push_back(ex.tokens);
  const auto scores =
      score_all(state.model, seqs, schedule.surprise_variant, scoring_spans(stream), AdapterMode::fast, state.step);
  std::vector<BufferEntry> out;
  out.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) out.push_back({std::move(seqs[i]), task.id, scores[i], state.step});
  return out;
}

void offer_all(RunState& state, const Task& task) {
  for (const auto& ex : task.train) state.memory->reservoir_update({ex.tokens, task.id, std::nullopt, state.step}, state.rng);
}

}  // namespace

void train_on_task(RunState& state, const TaskStream& stream, std::size_t task_id, const TrainSchedule& schedule,
                   const StepSink& sink) {
  validate(schedule);
  if (task_id >= stream.tasks.size()) throw ConfigError("train: unknown task " + std::to_string(task_id));
  const Task& task = stream.tasks[task_id];
  if (task.train.empty()) throw Error("train: task " + std::to_string(task_id) + " has no training data");
  const bool replay = uses_replay(schedule.method);
  if (replay && !state.memory) throw PolicyError("train: method needs a replay memory");
  const Timing timing = schedule.effective_timing();
  const bool surprise = replay && state.memory->policy() == BufferPolicy::surprise;

  std::vector<BufferEntry> pre_scored;
  if (surprise && (timing == Timing::sb_ub || timing == Timing::sb_ua)) {
    pre_scored = scored_candidates(state, task, schedule, stream);
    if (timing == Timing::sb_ub) {
      state.memory->surprise_task_update(task.id, std::move(pre_scored));
      pre_scored.clear();
    }
  }
  if (replay && !surprise && timing == Timing::sb_ub) offer_all(state, task);

  nn::Sgd sgd({schedule.learning_rate, schedule.clip_norm});
  sgd.set_rejected_steps(state.rejected_steps);
  const std::vector<TargetSpan> spans(schedule.batch_size + schedule.replay_batch, stream.label_span());
  const ScoringSpans score_spans = scoring_spans(stream);
  std::vector<std::size_t> perm(task.train.size());
  std::uint64_t local_step = 0;

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    state.rng.shuffle(perm);
    for (std::size_t start = 0; start < perm.size(); start += schedule.batch_size) {
      const std::size_t stop = std::min(perm.size(), start + schedule.batch_size);
      ++local_step;
      ++state.step;
      std::vector<TokenSeq> batch;
      batch.reserve(stop - start + schedule.replay_batch);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(task.train[perm[i]].tokens);

      ReplaySample rep;
      const bool mix_turn = replay && local_step % schedule.replay_interval == 0;
      if (mix_turn) {
        rep = state.memory->sample(schedule.replay_batch, state.rng);
        for (std::size_t i : rep.indices) batch.push_back(state.memory->entries()[i].tokens);
      }

      nn::Tape tape;
      ForwardOptions opts;
      opts.mode = AdapterMode::fast;
      opts.training = true;
      opts.dropout_rng = &state.rng;
      nn::Var loss = state.model.span_loss(tape, batch, std::span(spans).first(batch.size()), opts);
      const double loss_value = tape.value(loss)[0];
      sgd.step(tape.backward(loss));

      if (uses_slow(schedule.method)) {
        ema_update(state.model.slow(), state.model.fast(), schedule.beta);
      } else {
        state.model.copy_fast_to_slow();
      }
      if (surprise && state.memory->aging() && !rep.indices.empty()) {
        rescore_on_replay(*state.memory, state.model, rep.indices, schedule.surprise_variant, score_spans, state.step);
      }
      if (replay && timing == Timing::online && epoch == 0) {
        for (std::size_t i = start; i < stop; ++i) {
          state.memory->reservoir_update({task.train[perm[i]].tokens, task.id, std::nullopt, state.step}, state.rng);
        }
      }

      ++state.log_records;
      if (sink) sink({state.step, task.id, loss_value, !rep.indices.empty(), rep.indices.size()});
    }
  }
  state.rejected_steps = sgd.rejected_steps();

  if (surprise && timing == Timing::sb_ua) state.memory->surprise_task_update(task.id, std::move(pre_scored));
  if (surprise && timing == Timing::sa_ua) {
    state.memory->surprise_task_update(task.id, scored_candidates(state, task, schedule, stream));
  }
  if (replay && !surprise && (timing == Timing::sb_ua || timing == Timing::sa_ua)) offer_all(state, task);
}

double evaluate_task(DualAdapterModel& model, const TaskStream& stream, std::size_t task_id, AdapterMode mode) {
  const Task& task = stream.tasks.at(task_id);
  if (task.test.empty()) throw Error("evaluate: empty test split");
  std::vector<TokenSeq> seqs;
  seqs.reserve(task.test.size());
  for (const auto& ex : task.test) seqs.push_back(ex.tokens);
  const TargetSpan span = stream.label_span();
  const std::vector<TargetSpan> spans(seqs.size(), span);
  const auto pred = model.greedy_labels(seqs, spans, mode);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    bool ok = pred[i].size() == span.length();
    for (std::size_t t = 0; ok && t < span.length(); ++t) ok = pred[i][t] == seqs[i][span.begin + t];
    hits += ok;
  }
  return static_cast<double>(hits) / static_cast<double>(seqs.size());
}

std::vector<double> evaluate_all_tasks(DualAdapterModel& model, const TaskStream& stream,
                                       std::span<const std::size_t> order, AdapterMode mode, std::size_t seen,
                                       bool all) {
  std::vector<double> out(order.size(), -1.0);
  for (std::size_t j = 0; j < order.size(); ++j) {
    if (j < seen || all) out[j] = evaluate_task(model, stream, order[j], mode);
  }
  return out;
}

void run_task_sequence(RunState& state, const TaskStream& stream, std::span<const std::size_t> order,
                       const TrainSchedule& schedule, const SequenceHooks& hooks) {
  validate(schedule);
  validate_order({order.begin(), order.end()}, stream.tasks.size());
  if (state.matrix.size() != order.size()) throw ShapeError("run: matrix size does not match the task order");
  const AdapterMode mode = eval_mode(schedule.method);
  while (state.next_stage < order.size()) {
    const std::size_t stage = state.next_stage;
    train_on_task(state, stream, order[stage], schedule, hooks.on_step);
    const auto acc = evaluate_all_tasks(state.model, stream, order, mode, stage + 1, schedule.evaluate_unseen);
    for (std::size_t j = 0; j < acc.size(); ++j) {
      if (acc[j] >= 0.0) state.matrix.set(stage, j, acc[j]);
    }
    ++state.next_stage;
    if (hooks.on_stage_end && !hooks.on_stage_end(state)) return;
  }
}

}  // namespace sure
