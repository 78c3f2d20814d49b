// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sure/model.hpp"

namespace sure {

enum class SurpriseVariant : std::uint8_t { avg_sequence, sum_sequence, label_only };

const char* to_string(SurpriseVariant v);
SurpriseVariant parse_surprise_variant(const std::string& name);

struct SurpriseScore {
  double value = 0.0;
  SurpriseVariant variant = SurpriseVariant::avg_sequence;
  std::size_t token_count = 0;
  std::uint64_t scored_at = 0;  // global step at which the score was taken

  friend bool operator==(const SurpriseScore&, const SurpriseScore&) = default;
};

/// Where surprise is measured: the whole predictable sequence or the label.
struct ScoringSpans {
  TargetSpan sequence;
  TargetSpan label;
};

/// Negative log-likelihood based surprise of one sequence.
SurpriseScore score(DualAdapterModel& model, const TokenSeq& tokens, SurpriseVariant variant, const ScoringSpans& spans,
                    AdapterMode mode = AdapterMode::fast, std::uint64_t scored_at = 0);

/// Batched form of score(); results are independent of batch composition.
std::vector<SurpriseScore> score_all(DualAdapterModel& model, std::span<const TokenSeq> batch, SurpriseVariant variant,
                                     const ScoringSpans& spans, AdapterMode mode = AdapterMode::fast,
                                     std::uint64_t scored_at = 0);

struct TopK {
  std::vector<std::size_t> indices;  // best first
  bool truncated = false;            // k exceeded the number of scores
};

/// Indices of the k largest scores, ties resolved toward the lower index.
TopK rank_top_k(std::span<const double> scores, std::size_t k);

}  // namespace sure
