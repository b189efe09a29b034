// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbdes/layers.hpp"
#include "cbdes/model.hpp"
#include "cbdes/trainer.hpp"

namespace cbdes {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// On-disk layout, all integers little-endian:
///
///   "CBDESMOE"            8-byte magic
///   u32                   format version
///   u32 + bytes           config snapshot (JSON text)
///   u32                   manifest entry count
///   per entry:            u32 name length, name, u32 rank, u64 dims[rank]
///   u64                   payload length in bytes
///   f64[...]              payload, entries in manifest order
///   u32                   CRC-32 of the payload bytes
struct Checkpoint {
    static constexpr char kMagic[8] = {'C', 'B', 'D', 'E', 'S', 'M', 'O', 'E'};
    static constexpr std::uint32_t kFormatVersion = 1;

    std::string config_json;
    std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers of `model` (copied) with the run configuration.
Checkpoint snapshot(const MoeModel& model, const TrainConfig& config);
/// Copies checkpoint values into `model`; names and shapes must match exactly.
void restore(MoeModel& model, const Checkpoint& checkpoint);

/// Rebuilds the run configuration and model stored in a checkpoint.
TrainConfig checkpoint_config(const Checkpoint& checkpoint);
MoeModel model_from_checkpoint(const Checkpoint& checkpoint);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace cbdes
