#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "camforge/model.hpp"
#include "camforge/random.hpp"
#include "camforge/tensor.hpp"
#include "camforge/zones.hpp"

namespace camforge {

/// Row-major 2-D map.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  double min() const;
  double max() const;
};

struct Heatmap {
  Grid grid;
  std::string layer;
  int target_class = 1;
  bool normalized = false;
};

struct UncertaintyMap {
  Grid grid;
  std::size_t num_samples = 0;
  double dropout_rate = 0.0;
};

/// ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dA_k.
/// `activation` is K x h x w or 1 x K x h x w; `gradient` matches it.
Grid cam_from_activations(const Tensor& activation, std::span<const double> gradient);

/// Backpropagates `score` (one element) and applies cam_from_activations to
/// the gradient that reaches `activation`.
Grid backprop_cam(const Tensor& activation, const Tensor& score);

Grid upsample(const Grid& grid, std::size_t height, std::size_t width);

/// (v - min) / (max - min) in place. A constant positive map becomes all ones.
/// Returns false, leaving the map untouched, if it is identically zero.
bool min_max_normalize(Grid& grid);

/// Un-normalized Grad-CAM at the layer's own resolution. `image` is C x H x W.
/// target_class 1 explains the logit, 0 explains its negation. With a
/// non-null `dropout_rng` and active dropout the pass is stochastic.
Grid gradcam_raw(Model& model, const Tensor& image, int target_class, const std::string& layer,
                 Rng* dropout_rng = nullptr);

/// Eval-mode Grad-CAM upsampled to the input size. An empty `layer` selects
/// the model's attribution layer.
Heatmap gradcam(Model& model, const Tensor& image, int target_class, const std::string& layer = {},
                bool normalize = true);

struct BayesOptions {
  std::size_t num_samples = 20;
  /// Min-max normalize each pass before averaging, so U is on a [0,1] scale.
  bool normalize_passes = false;
};

struct BayesResult {
  Heatmap mean;                // upsampled, min-max normalized
  UncertaintyMap uncertainty;  // upsampled, raw units
  Grid raw_mean;               // layer resolution
  Grid raw_std;
};

/// Monte Carlo dropout over Grad-CAM: pass t draws its masks from
/// derive_rng(base, {t}) where base = rng() is taken once per call.
/// Averages per-pass maps after their ReLU; std uses divisor n - 1.
BayesResult bayes_gradcam(Model& model, const Tensor& image, int target_class, const std::string& layer, Rng& rng,
                          const BayesOptions& options = {});

struct ZoneStats {
  std::array<double, 6> means{};  // indexed by Zone

  double mean(Zone z) const { return means[static_cast<int>(z)]; }
  /// First zone (in kAllZones order) attaining the largest mean.
  Zone argmax() const;
};

ZoneStats zone_stats(const Grid& map);

/// 1 inside the zone with the largest mean activation, 0 elsewhere.
Grid critical_region_mask(const Grid& heatmap);

struct UncertaintyCase {
  Grid uncertainty;
  Grid mask;  // nonzero marks the critical region
  int predicted = 0;
  int actual = 0;
};

struct UncertaintyReport {
  double threshold = 0.4;
  std::vector<bool> high;  // per case: mean U over the mask > threshold
  std::size_t false_positives = 0, high_false_positives = 0;
  std::size_t true_positives = 0, high_true_positives = 0;
  std::optional<double> fp_high_fraction;  // undefined without any FP
  std::optional<double> tp_high_fraction;
};

UncertaintyReport uncertainty_report(const std::vector<UncertaintyCase>& cases, double threshold = 0.4);

void write_grid_csv(const std::filesystem::path& path, const Grid& grid);
Grid read_grid_csv(const std::filesystem::path& path);
/// Values clamped to [0,1] and rendered as v*255 rounded half up.
void write_grid_pgm(const std::filesystem::path& path, const Grid& grid);
void write_zone_csv(const std::filesystem::path& path, const ZoneStats& stats);

}  // namespace camforge
