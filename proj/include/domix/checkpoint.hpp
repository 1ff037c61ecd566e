#pragma once

// Checkpoint layout: an 8-byte little-endian manifest length, the manifest
// as JSON, then the raw little-endian tensor payload in manifest order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>

#include "domix/config.hpp"
#include "domix/corpus.hpp"
#include "domix/model.hpp"
#include "domix/training.hpp"

namespace domix {

inline constexpr const char* kCheckpointFormat = "domix-checkpoint";
inline constexpr int kCheckpointVersion = 1;

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

struct CheckpointInfo {
  std::uint64_t payload_hash = 0;
  std::size_t payload_bytes = 0;
  Precision dtype = Precision::f32;
};

// Writes parameters (and the optimizer moments when `state` is given) in the
// config's training precision. The file is replaced atomically.
CheckpointInfo save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                               const RunConfig& config, const TrainState* state);

struct LoadedCheckpoint {
  RunConfig config;
  Vocab vocab;
  std::optional<Model> model;
  TrainState state;
  CheckpointInfo info;
  nlohmann::json manifest;
};

// Rebuilds the model from the stored config snapshot alone.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string hex64(std::uint64_t value);

}  // namespace domix
