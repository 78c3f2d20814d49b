// SPDX-License-Identifier: Apache-2.0
#include "sure/surprise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sure/error.hpp"

namespace sure {

const char* to_string(SurpriseVariant v) {
  switch (v) {
    case SurpriseVariant::avg_sequence: return "avg_sequence";
    case SurpriseVariant::sum_sequence: return "sum_sequence";
    case SurpriseVariant::label_only: return "label_only";
  }
  return "?";
}

SurpriseVariant parse_surprise_variant(const std::string& name) {
  if (name == "avg_sequence" || name == "avg") return SurpriseVariant::avg_sequence;
  if (name == "sum_sequence" || name == "sum") return SurpriseVariant::sum_sequence;
  if (name == "label_only" || name == "label") return SurpriseVariant::label_only;
  throw ConfigError("unknown surprise variant '" + name + "'");
}

std::vector<SurpriseScore> score_all(DualAdapterModel& model, std::span<const TokenSeq> batch, SurpriseVariant variant,
                                     const ScoringSpans& spans, AdapterMode mode, std::uint64_t scored_at) {
  const TargetSpan span = variant == SurpriseVariant::label_only ? spans.label : spans.sequence;
  if (span.length() == 0) throw ShapeError("surprise: empty target span");
  for (const auto& seq : batch) {
    if (seq.empty()) throw ShapeError("surprise: empty sequence");
    if (span.end > seq.size()) throw ShapeError("surprise: target span beyond sequence end");
  }
  const std::vector<TargetSpan> all(batch.size(), span);
  const auto nll = model.batch_nll(batch, all, mode);
  std::vector<SurpriseScore> out;
  out.reserve(nll.size());
  for (const auto& r : nll) {
    SurpriseScore s;
    s.variant = variant;
    s.token_count = r.token_count;
    s.scored_at = scored_at;
    s.value = variant == SurpriseVariant::avg_sequence ? r.total_nll / static_cast<double>(r.token_count) : r.total_nll;
    out.push_back(s);
  }
  return out;
}

SurpriseScore score(DualAdapterModel& model, const TokenSeq& tokens, SurpriseVariant variant, const ScoringSpans& spans,
                    AdapterMode mode, std::uint64_t scored_at) {
  const std::vector<TokenSeq> one{tokens};
  return score_all(model, one, variant, spans, mode, scored_at).front();
}

TopK rank_top_k(std::span<const double> scores, std::size_t k) {
  for (double s : scores) {
    if (std::isnan(s)) throw NumericError("rank_top_k", "NaN score");
  }
  TopK out;
  out.truncated = k > scores.size();
  k = std::min(k, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  out.indices = std::move(idx);
  return out;
}

}  // namespace sure
