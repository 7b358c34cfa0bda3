// SPDX-License-Identifier: Apache-2.0
//
// `.awck` files:
//   8 bytes  magic "AWAKERCK"
//   4 bytes  format version, little-endian
//   8 bytes  manifest length, little-endian
//   manifest UTF-8 JSON
//   payload  raw little-endian f64 buffers, in manifest order
//
// The manifest carries the metadata object plus
//   entries: [{name, shape, dtype, byte_offset, crc32}]
// with byte_offset relative to the start of the payload.
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "awaker/model.hpp"
#include "awaker/optim.hpp"
#include "awaker/tensor.hpp"
#include "json.hpp"

namespace awaker {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(std::string_view name) const;
  int stage() const { return meta.value("stage", -1); }
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Stage 0: the pretrained frozen base.
Checkpoint base_checkpoint(const BaseModel& base, std::uint64_t seed);
BaseModel base_from_checkpoint(const Checkpoint& ck);

struct AdapterCheckpointInfo {
  int stage = 0;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

/// Adapter parameters (never base weights) plus optimizer moments when given.
Checkpoint adapter_checkpoint(const AdaptedModel& m, const AdapterCheckpointInfo& info,
                              const AdamW* optimizer = nullptr);

/// Rebuilds an adapted model on `base`. Throws CheckpointError if the
/// checkpoint was made against a different base or misses a parameter.
AdaptedModel model_from_checkpoint(std::shared_ptr<const BaseModel> base, const Checkpoint& ck);

/// Restores moments saved by adapter_checkpoint into a matching optimizer.
void restore_optimizer(AdamW& opt, const Checkpoint& ck);

}  // namespace awaker
