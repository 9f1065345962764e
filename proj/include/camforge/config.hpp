#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "camforge/data.hpp"
#include "camforge/model.hpp"
#include "camforge/trainer.hpp"
#include "json.hpp"

namespace camforge {

struct ExplainConfig {
  std::size_t num_samples = 20;
  double uncertainty_threshold = 0.4;
  bool normalize_passes = false;
  int target_class = 1;
};

struct EvalConfig {
  double threshold = 0.5;
  double flag_threshold = 0.9;  // |residual| above this is a flagged case
  std::size_t histogram_bins = 20;
  std::size_t batch_size = 64;
};

/// Everything a command needs; serialized verbatim as resolved_config.json.
struct RunConfig {
  std::uint64_t seed = 0;
  bool seed_explicit = false;  // "seed" appeared in the file; not serialized
  ModelSpec model;
  TrainConfig train;
  AugmentConfig augment;
  ExplainConfig explain;
  EvalConfig eval;
  PhantomSpec phantom;

  /// Copies `seed` into the train and augmentation configs.
  void propagate_seed();
  void validate() const;
};

/// Unknown keys and type mismatches throw ConfigError naming the dotted key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

/// Seed precedence: explicit flag, then the config file, then CAMFORGE_SEED,
/// then 0.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const std::optional<std::uint64_t>& from_config);

}  // namespace camforge
