#pragma once

// Binary checkpoint: magic, format version, JSON metadata, named f64 tensors.
// All integers and doubles are little-endian.

#include <cstdint>
#include <filesystem>
#include <json.hpp>

#include "irt/params.hpp"

namespace irt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ParamStore tensors;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws kIo if unreadable, kCheckpoint on bad magic, version or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace irt
