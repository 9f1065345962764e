#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "camforge/ops.hpp"

namespace camforge {

enum class DropoutSites { head_only, per_stage };

struct StageSpec {
  std::size_t num_blocks = 1;
  std::size_t channels = 16;
  std::size_t stride = 1;

  bool operator==(const StageSpec&) const = default;
};

/// Architecture of a post-activation (v1) residual network with a
/// single-logit head.
struct ModelSpec {
  std::size_t in_channels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t stem_channels = 16;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 1;
  std::vector<StageSpec> stages{{2, 16, 1}, {2, 32, 2}, {2, 64, 2}};
  double dropout_rate = 0.2;
  DropoutSites dropout_sites = DropoutSites::head_only;

  /// Throws std::invalid_argument listing every violated constraint.
  void validate() const;
  /// Spatial size of the final stage output.
  std::pair<std::size_t, std::size_t> feature_size() const;
  /// Equality ignoring dropout settings (which carry no parameters).
  bool same_architecture(const ModelSpec& other) const;

  bool operator==(const ModelSpec&) const = default;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;

  static BatchNormLayer create(std::size_t channels);
  Tensor operator()(const Tensor& x, Mode mode) { return batchnorm2d(x, gamma, beta, state, mode); }
};

struct ResidualBlock {
  std::size_t stride = 1;
  Tensor conv1;
  BatchNormLayer bn1;
  Tensor conv2;
  BatchNormLayer bn2;
  Tensor projection;  // 1x1 kernel; undefined for identity shortcuts
  BatchNormLayer projection_bn;

  bool has_projection() const { return projection.defined(); }
};

/// Called with a local layer name ("conv1", "conv2", "out") and its output;
/// whatever it returns continues through the network.
using LayerTap = std::function<Tensor(const std::string& name, const Tensor& value)>;

/// relu(F(x) + shortcut(x)), F = conv-bn-relu-conv-bn.
Tensor residual_block(const Tensor& x, ResidualBlock& block, Mode mode, const LayerTap& tap = {});

class Model {
 public:
  struct Output {
    Tensor logits;    // N x 1
    Tensor captured;  // undefined unless a capture layer was requested
  };

  /// He-normal convolutions, unit gamma, zero beta and head bias.
  static Model build(const ModelSpec& spec, Rng& rng);

  const ModelSpec& spec() const { return spec_; }

  /// `capture` names a layer from layer_names(); its output is returned with
  /// retained gradient. `rng` drives dropout masks; the model's own stream is
  /// used when null.
  Output forward(const Tensor& batch, const std::string& capture = {}, Rng* rng = nullptr);

  void set_mode(Mode mode) { mode_ = mode; }
  Mode mode() const { return mode_; }
  void set_mc_active(bool active) { mc_active_ = active; }
  bool mc_active() const { return mc_active_; }
  void set_dropout_rate(double rate);
  bool dropout_active() const { return mode_ == Mode::train || mc_active_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
  NamedTensors parameters() const;
  NamedTensors buffers() const;
  /// parameters() followed by buffers(); the checkpoint payload.
  NamedTensors state() const;

  std::vector<std::string> layer_names() const;
  /// Output of the last residual block, the Grad-CAM target layer.
  std::string attribution_layer() const;

  void zero_grad();
  void set_trainable(bool trainable);

  ResidualBlock& block(std::size_t stage, std::size_t index) { return stages_.at(stage).at(index); }
  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }

 private:
  ModelSpec spec_;
  Tensor stem_conv_;
  BatchNormLayer stem_bn_;
  std::vector<std::vector<ResidualBlock>> stages_;
  Tensor head_weight_;
  Tensor head_bias_;
  Mode mode_ = Mode::train;
  bool mc_active_ = false;
  Rng dropout_rng_;
};

/// Restores mc_active / mode on scope exit.
class McDropoutScope {
 public:
  explicit McDropoutScope(Model& model);
  ~McDropoutScope();
  McDropoutScope(const McDropoutScope&) = delete;
  McDropoutScope& operator=(const McDropoutScope&) = delete;

 private:
  Model& model_;
  Mode mode_;
  bool mc_;
};

}  // namespace camforge
