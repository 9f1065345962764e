#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "camforge/checkpoint.hpp"
#include "camforge/data.hpp"
#include "camforge/model.hpp"

namespace camforge {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 30;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 3;
  std::size_t early_stop_patience = 5;
  double improvement_tol = 1e-8;  // absolute
  bool balance_minority = true;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

/// Decoupled AdamW: theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta.
/// Throws naming the parameter if any gradient is NaN. Parameters without a
/// gradient are treated as having a zero gradient.
void adamw_step(const Model::NamedTensors& params, AdamWState& state, double lr, const TrainConfig& cfg);

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
};

/// Returns the learning rate for the next epoch.
double plateau_step(PlateauState& state, double val_loss, double lr, const TrainConfig& cfg);

struct EarlyStopState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  int best_epoch = 0;
};

/// Records epoch `epoch`'s loss; true means stop training now.
bool early_stop_step(EarlyStopState& state, double val_loss, int epoch, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during this epoch
  double val_accuracy = 0.0;
  std::optional<double> val_auc;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainState {
  AdamWState optimizer;
  double lr = 0.0;
  PlateauState plateau;
  EarlyStopState early;
  int epoch = 0;  // last completed epoch
  std::vector<EpochRecord> history;
  bool stopped = false;
};

struct TrainOptions {
  /// When set: best.camf, last.camf and history.csv are written here.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from a last.camf written by an earlier run.
  std::optional<Checkpoint> resume;
  std::optional<Checkpoint> resume_best;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  Checkpoint best;
  int best_epoch = 0;
  bool early_stopped = false;
  bool diverged = false;
  std::string divergence;
  double wall_seconds = 0.0;
  double pos_weight = 1.0;
};

/// Weighted-sampling training loop. Each epoch draws |train| samples with
/// replacement using weights from the original class counts, optimizes
/// class-weighted BCE with AdamW, then steps the plateau scheduler and early
/// stopping on the validation loss. On divergence the model is rolled back to
/// the best checkpoint.
TrainResult train(Model& model, const DatasetSplit& split, const TrainConfig& cfg, const AugmentConfig& augment_cfg,
                  const TrainOptions& options = {});

struct Predictions {
  std::vector<double> probs;
  std::vector<int> labels;
  std::vector<double> logits;
  double loss = 0.0;
};

/// Eval-mode forward over `samples` in batches.
Predictions predict(Model& model, const std::vector<Sample>& samples, std::size_t batch_size = 64,
                    double pos_weight = 1.0);

Checkpoint checkpoint_with_state(const Model& model, const TrainState& state, std::uint64_t seed);
TrainState train_state_from(const Checkpoint& ckpt, const Model& model);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

}  // namespace camforge
