// SPDX-License-Identifier: Apache-2.0
#include "sure/buffer.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <sstream>

#include "sure/error.hpp"

namespace sure {

const char* to_string(BufferPolicy p) { return p == BufferPolicy::reservoir ? "reservoir" : "surprise"; }

const char* to_string(Timing t) {
  switch (t) {
    case Timing::sb_ub: return "SB-UB";
    case Timing::sb_ua: return "SB-UA";
    case Timing::sa_ua: return "SA-UA";
    case Timing::online: return "online";
  }
  return "?";
}

BufferPolicy parse_buffer_policy(const std::string& name) {
  if (name == "reservoir") return BufferPolicy::reservoir;
  if (name == "surprise") return BufferPolicy::surprise;
  throw ConfigError("unknown buffer policy '" + name + "'");
}

Timing parse_timing(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return c == '_' ? '-' : std::toupper(c); });
  if (n == "SB-UB") return Timing::sb_ub;
  if (n == "SB-UA") return Timing::sb_ua;
  if (n == "SA-UA") return Timing::sa_ua;
  if (n == "ONLINE") return Timing::online;
  throw ConfigError("unknown timing '" + name + "' (expected SB-UB, SB-UA, SA-UA or online)");
}

ReplayMemory::ReplayMemory(std::size_t capacity, BufferPolicy policy, Timing timing, bool aging)
    : capacity_(capacity), policy_(policy), timing_(timing), aging_(aging) {
  if (capacity == 0) throw ConfigError("buffer: capacity must be positive");
  if (policy == BufferPolicy::surprise && timing == Timing::online) {
    throw ConfigError("buffer: online timing is only defined for the reservoir policy");
  }
  if (policy == BufferPolicy::reservoir && aging) throw ConfigError("buffer: aging needs surprise scores");
}

void ReplayMemory::require(BufferPolicy p, const char* op) const {
  if (policy_ != p) {
    throw PolicyError(std::string("buffer: ") + op + " called on a " + to_string(policy_) + " memory");
  }
}

bool ReplayMemory::reservoir_update(BufferEntry entry, Rng& rng) {
  require(BufferPolicy::reservoir, "reservoir_update");
  entry.score.reset();
  ++seen_total_;
  ++seen_per_task_[entry.task];
  if (entries_.size() < capacity_) {
    entries_.push_back(std::move(entry));
    return true;
  }
  const std::uint64_t j = rng.below(seen_total_);
  if (j < capacity_) {
    entries_[j] = std::move(entry);
    return true;
  }
  return false;
}

namespace {

std::vector<double> values_of(const std::vector<BufferEntry>& v, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i].score->value);
  return out;
}

}  // namespace

QuotaUpdate ReplayMemory::surprise_task_update(std::size_t task, std::vector<BufferEntry> candidates) {
  require(BufferPolicy::surprise, "surprise_task_update");
  for (const auto& c : candidates) {
    if (!c.score) throw PolicyError("buffer: surprise candidates must be scored");
    if (c.task != task) throw PolicyError("buffer: candidate belongs to another task");
  }
  if (seen_per_task_.count(task) || counts_per_task().count(task)) {
    throw PolicyError("buffer: task " + std::to_string(task) + " already has a quota");
  }
  seen_total_ += candidates.size();
  seen_per_task_[task] += candidates.size();

  // Tasks that contributed nothing still count toward d.
  QuotaUpdate up;
  up.quota = capacity_ / seen_per_task_.size();

  // Trim residents: per task keep the top `quota` by score, earlier
  // entries winning ties; survivors keep their relative order.
  std::map<std::size_t, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < entries_.size(); ++i) by_task[entries_[i].task].push_back(i);
  std::vector<bool> keep(entries_.size(), false);
  for (auto& [t, idx] : by_task) {
    const auto vals = values_of(entries_, idx);
    for (std::size_t r : rank_top_k(vals, up.quota).indices) keep[idx[r]] = true;
  }
  std::vector<BufferEntry> next;
  next.reserve(capacity_);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (keep[i]) next.push_back(std::move(entries_[i]));
  }

  std::vector<double> vals;
  vals.reserve(candidates.size());
  for (const auto& c : candidates) vals.push_back(c.score->value);
  const TopK top = rank_top_k(vals, up.quota);
  for (std::size_t r : top.indices) next.push_back(std::move(candidates[r]));
  up.stored = top.indices.size();
  up.shortfall = up.quota - up.stored;
  shortfall_total_ += up.shortfall;
  entries_ = std::move(next);
  return up;
}

ReplaySample ReplayMemory::sample(std::size_t size, Rng& rng) const {
  ReplaySample out;
  if (entries_.empty()) {
    out.empty_memory = true;
    return out;
  }
  const std::size_t n = entries_.size(), m = std::min(size, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first m slots end up a uniform m-subset.
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  out.indices = std::move(idx);
  return out;
}

bool ReplayMemory::rescore(std::span<const std::size_t> indices, std::span<const SurpriseScore> scores) {
  if (!aging_) return false;
  if (indices.size() != scores.size()) throw ShapeError("buffer: one score per rescored entry");
  for (std::size_t i = 0; i < indices.size(); ++i) entries_.at(indices[i]).score = scores[i];
  return true;
}

std::map<std::size_t, std::size_t> ReplayMemory::counts_per_task() const {
  std::map<std::size_t, std::size_t> out;
  for (const auto& e : entries_) ++out[e.task];
  return out;
}

std::string ReplayMemory::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "task_id,score,tokens\n";
  for (const auto& e : entries_) {
    os << e.task << ',';
    if (e.score) os << e.score->value;
    os << ',';
    for (std::size_t i = 0; i < e.tokens.size(); ++i) os << (i ? " " : "") << e.tokens[i];
    os << '\n';
  }
  return os.str();
}

ReplayMemory::State ReplayMemory::state() const { return {entries_, seen_total_, seen_per_task_, shortfall_total_}; }

void ReplayMemory::restore(State s) {
  if (s.entries.size() > capacity_) throw CheckpointError("buffer: stored entries exceed capacity");
  entries_ = std::move(s.entries);
  seen_total_ = s.seen_total;
  seen_per_task_ = std::move(s.seen_per_task);
  shortfall_total_ = s.shortfall_total;
}

bool rescore_on_replay(ReplayMemory& memory, DualAdapterModel& model, std::span<const std::size_t> replayed,
                       SurpriseVariant variant, const ScoringSpans& spans, std::uint64_t step) {
  if (!memory.aging() || replayed.empty()) return false;
  std::vector<TokenSeq> seqs;
  seqs.reserve(replayed.size());
  for (std::size_t i : replayed) seqs.push_back(memory.entries().at(i).tokens);
  const auto scores = score_all(model, seqs, variant, spans, AdapterMode::fast, step);
  return memory.rescore(replayed, scores);
}

}  // namespace sure
