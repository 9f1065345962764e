#include "camforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace camforge {

namespace {

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor he_normal(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, Rng& rng) {
  const double fan_in = static_cast<double>(in * kh * kw);
  return Tensor::randn({out, in, kh, kw}, rng, std::sqrt(2.0 / fan_in)).set_requires_grad();
}

}  // namespace

void ModelSpec::validate() const {
  std::vector<std::string> problems;
  if (in_channels == 0 || height == 0 || width == 0) problems.push_back("input size must be positive");
  if (stem_channels == 0) problems.push_back("stem_channels must be positive");
  if (stem_kernel == 0 || stem_kernel % 2 == 0) problems.push_back("stem_kernel must be odd");
  if (stem_stride == 0) problems.push_back("stem_stride must be positive");
  if (stages.empty()) problems.push_back("at least one stage is required");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string tag = "stage" + std::to_string(i + 1);
    if (s.num_blocks == 0) problems.push_back(tag + " needs at least one block");
    if (s.channels == 0) problems.push_back(tag + " needs positive channels");
    if (s.stride != 1 && s.stride != 2) problems.push_back(tag + " stride must be 1 or 2");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) problems.push_back("dropout_rate must be in [0, 1)");
  if (problems.empty()) {
    const auto [fh, fw] = feature_size();
    if (fh < 4 || fw < 4) {
      problems.push_back("final feature map " + std::to_string(fh) + "x" + std::to_string(fw) +
                         " is smaller than 4x4");
    }
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "invalid model spec:";
    for (const auto& p : problems) os << ' ' << p << ';';
    throw std::invalid_argument(os.str());
  }
}

std::pair<std::size_t, std::size_t> ModelSpec::feature_size() const {
  std::size_t h = conv_out(height, stem_kernel, stem_stride, stem_kernel / 2);
  std::size_t w = conv_out(width, stem_kernel, stem_stride, stem_kernel / 2);
  for (const auto& s : stages) {
    h = conv_out(h, 3, s.stride, 1);
    w = conv_out(w, 3, s.stride, 1);
  }
  return {h, w};
}

bool ModelSpec::same_architecture(const ModelSpec& other) const {
  ModelSpec a = *this, b = other;
  a.dropout_rate = b.dropout_rate = 0.0;
  a.dropout_sites = b.dropout_sites = DropoutSites::head_only;
  return a == b;
}

BatchNormLayer BatchNormLayer::create(std::size_t channels) {
  BatchNormLayer bn{Tensor({channels}, 1.0), Tensor({channels}, 0.0), BatchNormState::create(channels)};
  bn.gamma.set_requires_grad();
  bn.beta.set_requires_grad();
  return bn;
}

Tensor residual_block(const Tensor& x, ResidualBlock& block, Mode mode, const LayerTap& tap) {
  auto hook = [&](const char* name, Tensor t) { return tap ? tap(name, t) : t; };
  Tensor y = hook("conv1", conv2d(x, block.conv1, Tensor(), {block.stride, 1}));
  y = relu(block.bn1(y, mode));
  y = hook("conv2", conv2d(y, block.conv2, Tensor(), {1, 1}));
  y = block.bn2(y, mode);

  Tensor shortcut = x;
  if (block.has_projection()) {
    shortcut = block.projection_bn(conv2d(x, block.projection, Tensor(), {block.stride, 0}), mode);
  } else if (shortcut.shape() != y.shape()) {
    throw std::invalid_argument("residual_block: identity shortcut " + shape_str(x.shape()) +
                                " cannot be added to residual " + shape_str(y.shape()) +
                                "; a projection shortcut is required");
  }
  return hook("out", relu(add(y, shortcut)));
}

Model Model::build(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  m.stem_conv_ = he_normal(spec.stem_channels, spec.in_channels, spec.stem_kernel, spec.stem_kernel, rng);
  m.stem_bn_ = BatchNormLayer::create(spec.stem_channels);
  std::size_t channels = spec.stem_channels;
  for (const auto& s : spec.stages) {
    std::vector<ResidualBlock> blocks;
    for (std::size_t b = 0; b < s.num_blocks; ++b) {
      ResidualBlock blk;
      blk.stride = b == 0 ? s.stride : 1;
      blk.conv1 = he_normal(s.channels, channels, 3, 3, rng);
      blk.bn1 = BatchNormLayer::create(s.channels);
      blk.conv2 = he_normal(s.channels, s.channels, 3, 3, rng);
      blk.bn2 = BatchNormLayer::create(s.channels);
      if (blk.stride != 1 || channels != s.channels) {
        blk.projection = he_normal(s.channels, channels, 1, 1, rng);
        blk.projection_bn = BatchNormLayer::create(s.channels);
      }
      blocks.push_back(std::move(blk));
      channels = s.channels;
    }
    m.stages_.push_back(std::move(blocks));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  m.head_weight_ = Tensor::uniform({1, channels}, rng, -bound, bound).set_requires_grad();
  m.head_bias_ = Tensor({1}, 0.0).set_requires_grad();
  m.dropout_rng_.seed(rng());
  return m;
}

void Model::set_dropout_rate(double rate) {
  ModelSpec s = spec_;
  s.dropout_rate = rate;
  s.validate();
  spec_ = s;
}

Model::Output Model::forward(const Tensor& batch, const std::string& capture, Rng* rng) {
  if (batch.dim() != 4 || batch.size(1) != spec_.in_channels || batch.size(2) != spec_.height ||
      batch.size(3) != spec_.width) {
    throw std::invalid_argument("forward: batch " + shape_str(batch.shape()) + " does not match N x " +
                                std::to_string(spec_.in_channels) + " x " + std::to_string(spec_.height) +
                                " x " + std::to_string(spec_.width));
  }
  if (!capture.empty()) {
    const auto names = layer_names();
    if (std::find(names.begin(), names.end(), capture) == names.end()) {
      std::ostringstream os;
      os << "forward: unknown capture layer '" << capture << "'; known layers:";
      for (const auto& n : names) os << ' ' << n;
      throw std::invalid_argument(os.str());
    }
  }
  Rng& drop_rng = rng ? *rng : dropout_rng_;
  const bool drop = dropout_active();

  Output out;
  auto take = [&](const std::string& name, Tensor t) {
    if (name != capture) return t;
    if (!t.requires_grad()) {
      t = t.detach();
      t.set_requires_grad();
    }
    t.retain_grad();
    out.captured = t;
    return t;
  };

  Tensor x = take("stem", relu(stem_bn_(conv2d(batch, stem_conv_, Tensor(),
                                               {spec_.stem_stride, spec_.stem_kernel / 2}),
                                        mode_)));
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string stage_name = "stage" + std::to_string(s + 1);
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = stage_name + ".block" + std::to_string(b + 1);
      x = residual_block(x, stages_[s][b], mode_, [&](const std::string& local, const Tensor& t) {
        return take(local == "out" ? prefix : prefix + "." + local, t);
      });
    }
    x = take(stage_name, x);
    if (spec_.dropout_sites == DropoutSites::per_stage) x = dropout(x, spec_.dropout_rate, drop, drop_rng);
  }
  Tensor pooled = global_avg_pool(x);
  if (spec_.dropout_sites == DropoutSites::head_only) {
    pooled = dropout(pooled, spec_.dropout_rate, drop, drop_rng);
  }
  out.logits = linear(pooled, head_weight_, head_bias_);
  return out;
}

Model::NamedTensors Model::parameters() const {
  NamedTensors p;
  auto bn = [&p](const std::string& prefix, const BatchNormLayer& l) {
    p.emplace_back(prefix + ".weight", l.gamma);
    p.emplace_back(prefix + ".bias", l.beta);
  };
  p.emplace_back("stem.conv.weight", stem_conv_);
  bn("stem.bn", stem_bn_);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const auto& blk = stages_[s][b];
      p.emplace_back(prefix + ".conv1.weight", blk.conv1);
      bn(prefix + ".bn1", blk.bn1);
      p.emplace_back(prefix + ".conv2.weight", blk.conv2);
      bn(prefix + ".bn2", blk.bn2);
      if (blk.has_projection()) {
        p.emplace_back(prefix + ".projection.weight", blk.projection);
        bn(prefix + ".projection_bn", blk.projection_bn);
      }
    }
  }
  p.emplace_back("head.weight", head_weight_);
  p.emplace_back("head.bias", head_bias_);
  return p;
}

Model::NamedTensors Model::buffers() const {
  NamedTensors p;
  auto bn = [&p](const std::string& prefix, const BatchNormLayer& l) {
    p.emplace_back(prefix + ".running_mean", l.state.running_mean);
    p.emplace_back(prefix + ".running_var", l.state.running_var);
  };
  bn("stem.bn", stem_bn_);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const auto& blk = stages_[s][b];
      bn(prefix + ".bn1", blk.bn1);
      bn(prefix + ".bn2", blk.bn2);
      if (blk.has_projection()) bn(prefix + ".projection_bn", blk.projection_bn);
    }
  }
  return p;
}

Model::NamedTensors Model::state() const {
  NamedTensors all = parameters();
  for (auto& b : buffers()) all.push_back(std::move(b));
  return all;
}

std::vector<std::string> Model::layer_names() const {
  std::vector<std::string> names{"stem"};
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string stage_name = "stage" + std::to_string(s + 1);
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = stage_name + ".block" + std::to_string(b + 1);
      names.push_back(prefix + ".conv1");
      names.push_back(prefix + ".conv2");
      names.push_back(prefix);
    }
    names.push_back(stage_name);
  }
  return names;
}

std::string Model::attribution_layer() const { return "stage" + std::to_string(stages_.size()); }

void Model::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

void Model::set_trainable(bool trainable) {
  for (auto& [name, t] : parameters()) t.set_requires_grad(trainable);
}

McDropoutScope::McDropoutScope(Model& model) : model_(model), mode_(model.mode()), mc_(model.mc_active()) {
  model_.set_mode(Mode::eval);
  model_.set_mc_active(true);
}

McDropoutScope::~McDropoutScope() {
  model_.set_mode(mode_);
  model_.set_mc_active(mc_);
}

}  // namespace camforge
