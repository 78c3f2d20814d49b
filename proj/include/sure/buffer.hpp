// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sure/model.hpp"
#include "sure/rng.hpp"
#include "sure/surprise.hpp"

namespace sure {

enum class BufferPolicy : std::uint8_t { reservoir, surprise };

/// When candidates are scored and when they enter the buffer, relative to
/// training on their task. `online` streams examples in as they are drawn
/// and exists for the reservoir policy only.
enum class Timing : std::uint8_t { sb_ub, sb_ua, sa_ua, online };

const char* to_string(BufferPolicy p);
const char* to_string(Timing t);
BufferPolicy parse_buffer_policy(const std::string& name);
Timing parse_timing(const std::string& name);

struct BufferEntry {
  TokenSeq tokens;
  std::size_t task = 0;
  std::optional<SurpriseScore> score;  // present iff the policy is surprise
  std::uint64_t inserted_at = 0;

  friend bool operator==(const BufferEntry&, const BufferEntry&) = default;
};

struct QuotaUpdate {
  std::size_t quota = 0;
  std::size_t stored = 0;
  std::size_t shortfall = 0;  // quota minus available candidates, when positive
};

struct ReplaySample {
  std::vector<std::size_t> indices;  // positions in entries()
  bool empty_memory = false;
};

class ReplayMemory {
 public:
  ReplayMemory() = default;
  ReplayMemory(std::size_t capacity, BufferPolicy policy, Timing timing, bool aging = false);

  std::size_t capacity() const noexcept { return capacity_; }
  BufferPolicy policy() const noexcept { return policy_; }
  Timing timing() const noexcept { return timing_; }
  bool aging() const noexcept { return aging_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<BufferEntry>& entries() const noexcept { return entries_; }

  /// Offers one stream example. The first S are kept; afterwards the n-th
  /// example replaces a uniform resident with probability S/n. Returns
  /// whether it was stored.
  bool reservoir_update(BufferEntry entry, Rng& rng);

  /// Gives every represented task, including `task`, the quota floor(S/d):
  /// residents are trimmed lowest-score first and the new task contributes
  /// its top-scored candidates. Candidates must carry scores.
  QuotaUpdate surprise_task_update(std::size_t task, std::vector<BufferEntry> candidates);

  /// Uniform sample of min(size, |entries|) distinct entries.
  ReplaySample sample(std::size_t size, Rng& rng) const;

  /// Replaces the scores of the given entries (aging). Returns false and
  /// leaves the memory untouched when aging is off.
  bool rescore(std::span<const std::size_t> indices, std::span<const SurpriseScore> scores);

  std::map<std::size_t, std::size_t> counts_per_task() const;
  std::size_t seen_total() const noexcept { return seen_total_; }
  const std::map<std::size_t, std::size_t>& seen_per_task() const noexcept { return seen_per_task_; }
  std::size_t shortfall_total() const noexcept { return shortfall_total_; }

  /// "task_id,score,tokens" table; tokens are space separated.
  std::string to_csv() const;

  /// Raw state access for checkpoints.
  struct State {
    std::vector<BufferEntry> entries;
    std::size_t seen_total = 0;
    std::map<std::size_t, std::size_t> seen_per_task;
    std::size_t shortfall_total = 0;
  };
  State state() const;
  void restore(State s);

  friend bool operator==(const ReplayMemory&, const ReplayMemory&) = default;

 private:
  void require(BufferPolicy p, const char* op) const;

  std::size_t capacity_ = 0;
  BufferPolicy policy_ = BufferPolicy::reservoir;
  Timing timing_ = Timing::online;
  bool aging_ = false;
  std::vector<BufferEntry> entries_;
  std::size_t seen_total_ = 0;
  std::map<std::size_t, std::size_t> seen_per_task_;
  std::size_t shortfall_total_ = 0;
};

/// Rescores replayed entries under the fast adapters when aging is on.
bool rescore_on_replay(ReplayMemory& memory, DualAdapterModel& model, std::span<const std::size_t> replayed,
                       SurpriseVariant variant, const ScoringSpans& spans, std::uint64_t step);

}  // namespace sure
