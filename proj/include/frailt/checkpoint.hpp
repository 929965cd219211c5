#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "frailt/model.hpp"
#include "frailt/trainer.hpp"

namespace frailt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ModelWeights weights;
    std::optional<TrainingState> state;
};

/// Binary layout, all integers little-endian:
///
///   "FRLT" | u32 version | u64 n | n bytes of ModelConfig JSON
///   u32 tensor count, then per tensor: u32 name length, name, u32 rank, u64 dims
///   f32 payloads in directory order
///   u8 has_state; if 1: u64 step, u64 rng state, first then second moments
///     (payloads only, same directory), u64 history length, then per record
///     u64 step, f64 train loss, f64 val loss (NaN when absent)
///   u64 FNV-1a of every preceding byte
///
/// Bad magic or version: FormatError. Truncation, trailing bytes or a checksum
/// mismatch: IntegrityError.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace frailt
