#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "camforge/model.hpp"
#include "json.hpp"

namespace camforge {

/// On-disk layout:
///   "CAMF1\n"
///   one line of compact UTF-8 JSON: spec, tensor table (name, byte offset
///   into the payload, shape), seed, epoch, optional trainer state
///   "\n"
///   payload: little-endian IEEE-754 float64 arrays in table order
struct Checkpoint {
  ModelSpec spec;
  Model::NamedTensors tensors;
  std::uint64_t seed = 0;
  int epoch = 0;
  nlohmann::json extra = nlohmann::json::object();

  const Tensor* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[] = "CAMF1\n";

Checkpoint snapshot(const Model& model, std::uint64_t seed, int epoch);
/// Copies values into `model`; throws on architecture, name or shape mismatch.
void restore(Model& model, const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace camforge
