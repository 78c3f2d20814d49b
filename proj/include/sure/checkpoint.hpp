// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sure/config.hpp"
#include "sure/error.hpp"
#include "sure/trainer.hpp"

namespace sure {

inline constexpr char kCheckpointMagic[8] = {'S', 'U', 'R', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A run's resumable state plus the identity of the grid cell it belongs to.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  Method method = Method::seqft;
  std::size_t order_id = 0;
  std::uint64_t seed = 0;
};

/// Layout: magic, u32 version, u64 config hash, u64 payload length, payload,
/// u64 FNV-1a of the payload. Integers little-endian, doubles as raw bits.
std::string encode_checkpoint(const Checkpoint& header, const RunState& state);

/// Restores `state`, which must have been constructed with the same model
/// config and schedule. Throws CheckpointError on bad magic, version,
/// checksum, truncation or a config-hash mismatch.
Checkpoint decode_checkpoint(std::string_view bytes, RunState& state, std::uint64_t expected_hash);

void save_checkpoint(const std::string& path, const Checkpoint& header, const RunState& state);
Checkpoint load_checkpoint(const std::string& path, RunState& state, std::uint64_t expected_hash);

/// Reads only the header fields; verifies magic, version and checksum.
Checkpoint peek_checkpoint(const std::string& path);

}  // namespace sure
