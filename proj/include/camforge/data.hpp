#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "camforge/random.hpp"
#include "camforge/tensor.hpp"
#include "camforge/zones.hpp"

namespace camforge {

enum class Label : int { normal = 0, pneumonia = 1 };

inline double label_value(Label l) { return l == Label::pneumonia ? 1.0 : 0.0; }

struct Sample {
  Tensor image;  // 1 x H x W, values in [0,1]
  Label label = Label::normal;
  std::string source_id;
  std::string origin_id;  // source_id of the original image this one derives from
  bool augmented = false;
  std::optional<Zone> planted_zone;
};

struct ClassCounts {
  std::size_t normal = 0;
  std::size_t pneumonia = 0;

  std::size_t of(Label l) const { return l == Label::normal ? normal : pneumonia; }
  bool operator==(const ClassCounts&) const = default;
};

ClassCounts count_classes(const std::vector<Sample>& samples);
/// Counts of non-augmented samples only.
ClassCounts count_originals(const std::vector<Sample>& samples);

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;

  /// "train", "val" or "test".
  const std::vector<Sample>& named(const std::string& split) const;
  /// Concatenation of the named splits in the given order.
  std::vector<Sample> union_of(const std::vector<std::string>& splits) const;
};

/// No origin_id appears in more than one split.
bool splits_disjoint(const DatasetSplit& split);

struct AugmentConfig {
  double flip_prob = 0.5;
  double max_rotation_deg = 15.0;
  double crop_area_min = 0.8;
  double crop_area_max = 1.0;
  double crop_aspect_min = 3.0 / 4.0;
  double crop_aspect_max = 4.0 / 3.0;
  double brightness = 0.1;  // factor drawn from [1 - b, 1 + b]
  double contrast = 0.1;    // factor drawn from [1 - c, 1 + c]
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  static AugmentConfig identity();
  void validate() const;
};

/// Resized crop, rotation, horizontal flip, brightness/contrast, noise, clamp.
/// Stages whose parameters make them a no-op are skipped.
Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng);

// Individual transforms on C x H x W images.
Tensor hflip(const Tensor& image);
/// Counter-clockwise rotation about the image centre; bilinear, edge padded.
Tensor rotate(const Tensor& image, double degrees);
/// Crop box in pixel units, resampled back to the full image size.
Tensor resized_crop(const Tensor& image, double top, double left, double crop_h, double crop_w);

/// Appends augmented copies of minority-class originals (round-robin) until the
/// training classes are equal. val/test are untouched.
DatasetSplit balance_minority(const DatasetSplit& split, const AugmentConfig& cfg, Rng& rng);

/// Per-sample weights 1 / original_count(label), normalized to sum to 1.
std::vector<double> sampling_weights(const std::vector<Sample>& train, const ClassCounts& original_counts);

/// N_normal / N_pneumonia.
double pos_class_weight(const ClassCounts& original_counts);

struct PhantomSpec {
  std::size_t n_per_class = 100;
  std::size_t image_size = 64;
  double lesion_intensity = 0.35;
  double lesion_radius_min = 0.06;  // fraction of image_size
  double lesion_radius_max = 0.10;
  double noise_sigma = 0.03;
  // Per-class split proportions; defaults follow a 5216 / 320 / 320 split.
  double val_fraction = 320.0 / 5856.0;
  double test_fraction = 320.0 / 5856.0;

  void validate() const;
};

/// Procedural "radiographs": two bright lung fields with rib banding and noise.
/// Pneumonia images add an elliptical opacity inside one uniformly chosen zone.
DatasetSplit generate_phantoms(const PhantomSpec& spec, std::uint64_t seed);
Sample render_phantom(const PhantomSpec& spec, Label label, std::size_t index, std::uint64_t seed);

struct LoadOptions {
  std::size_t height = 64;
  std::size_t width = 64;
};

struct LoadResult {
  DatasetSplit split;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Reads NORMAL/ and PNEUMONIA/ image trees. Split assignment comes from
/// manifest.csv (source_id,path,label,split) when present, otherwise from
/// train/ val/ test/ subdirectories, otherwise everything lands in train.
/// Unreadable files are skipped and counted. Throws if nothing was readable.
LoadResult load_directory(const std::filesystem::path& root, const LoadOptions& options = {});

struct ManifestRow {
  std::string source_id;
  std::string path;
  Label label;
  std::string split;
};

/// Writes NORMAL/ and PNEUMONIA/ PGM trees, manifest.csv and lesions.csv.
std::vector<ManifestRow> write_dataset(const std::filesystem::path& root, const DatasetSplit& split);

/// Stacks samples into an N x channels x H x W batch (grayscale replicated).
Tensor make_batch(const std::vector<const Sample*>& samples, std::size_t channels);
Tensor make_targets(const std::vector<const Sample*>& samples);

}  // namespace camforge
