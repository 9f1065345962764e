#include "camforge/cam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "camforge/image_io.hpp"
#include "camforge/ops.hpp"

namespace camforge {

double Grid::min() const {
  if (values.empty()) throw std::logic_error("empty grid");
  return *std::min_element(values.begin(), values.end());
}

double Grid::max() const {
  if (values.empty()) throw std::logic_error("empty grid");
  return *std::max_element(values.begin(), values.end());
}

Grid cam_from_activations(const Tensor& activation, std::span<const double> gradient) {
  const auto& s = activation.shape();
  if (!(s.size() == 3 || (s.size() == 4 && s[0] == 1))) {
    throw std::invalid_argument("grad-cam layer must be K x h x w or 1 x K x h x w, got " + shape_str(s));
  }
  if (gradient.size() != activation.numel()) throw std::invalid_argument("grad-cam gradient size mismatch");
  const std::size_t k_maps = s[s.size() - 3], h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t hw = h * w;
  const auto a = activation.data();
  Grid cam(h, w);
  for (std::size_t k = 0; k < k_maps; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += gradient[k * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam.values[i] += alpha * a[k * hw + i];
  }
  for (double& v : cam.values) v = std::max(v, 0.0);
  return cam;
}

Grid backprop_cam(const Tensor& activation, const Tensor& score) {
  if (score.numel() != 1) throw std::invalid_argument("grad-cam score must have one element");
  score.backward();
  if (!activation.has_grad()) {
    // The score does not depend on the layer: every alpha is zero.
    const std::vector<double> zeros(activation.numel(), 0.0);
    return cam_from_activations(activation, zeros);
  }
  return cam_from_activations(activation, activation.grad());
}

Grid upsample(const Grid& grid, std::size_t height, std::size_t width) {
  if (grid.height == height && grid.width == width) return grid;
  NoGradGuard no_grad;
  const Tensor up = upsample_bilinear(Tensor({grid.height, grid.width}, grid.values), height, width);
  Grid out(height, width);
  std::copy(up.data().begin(), up.data().end(), out.values.begin());
  return out;
}

bool min_max_normalize(Grid& grid) {
  const double lo = grid.min(), hi = grid.max();
  if (hi == 0.0 && lo == 0.0) return false;
  if (hi == lo) {
    std::fill(grid.values.begin(), grid.values.end(), 1.0);
    return true;
  }
  for (double& v : grid.values) v = (v - lo) / (hi - lo);
  return true;
}

namespace {

// Freezes parameters for the duration of an explanation so that the tape
// starts at the captured layer.
class FreezeScope {
 public:
  explicit FreezeScope(Model& model) : params_(model.parameters()) {
    for (auto& [name, p] : params_) {
      was_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeScope() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second.set_requires_grad(was_[i]);
  }
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;

 private:
  Model::NamedTensors params_;
  std::vector<bool> was_;
};

Tensor as_batch(const Tensor& image) {
  if (image.dim() == 4 && image.size(0) == 1) return image;
  if (image.dim() != 3) throw std::invalid_argument("grad-cam image must be C x H x W, got " + shape_str(image.shape()));
  return reshape(image.detach(), {1, image.size(0), image.size(1), image.size(2)});
}

std::string resolve_layer(const Model& model, const std::string& layer) {
  return layer.empty() ? model.attribution_layer() : layer;
}

}  // namespace

Grid gradcam_raw(Model& model, const Tensor& image, int target_class, const std::string& layer, Rng* dropout_rng) {
  if (target_class != 0 && target_class != 1) throw std::invalid_argument("target_class must be 0 or 1");
  FreezeScope freeze(model);
  const auto out = model.forward(as_batch(image), resolve_layer(model, layer), dropout_rng);
  if (out.captured.dim() != 4) throw std::invalid_argument("grad-cam layer '" + layer + "' is not 4-D");
  const double seed = target_class == 1 ? 1.0 : -1.0;
  out.logits.backward(std::span<const double>(&seed, 1));
  return cam_from_activations(out.captured, out.captured.grad());
}

Heatmap gradcam(Model& model, const Tensor& image, int target_class, const std::string& layer, bool normalize) {
  const Mode previous = model.mode();
  const bool mc = model.mc_active();
  model.set_mode(Mode::eval);
  model.set_mc_active(false);
  Heatmap h;
  h.layer = resolve_layer(model, layer);
  h.target_class = target_class;
  try {
    h.grid = upsample(gradcam_raw(model, image, target_class, h.layer), model.spec().height, model.spec().width);
  } catch (...) {
    model.set_mode(previous);
    model.set_mc_active(mc);
    throw;
  }
  model.set_mode(previous);
  model.set_mc_active(mc);
  if (normalize) h.normalized = min_max_normalize(h.grid);
  return h;
}

BayesResult bayes_gradcam(Model& model, const Tensor& image, int target_class, const std::string& layer, Rng& rng,
                          const BayesOptions& options) {
  if (options.num_samples < 2) throw std::invalid_argument("bayes grad-cam needs at least 2 samples");
  McDropoutScope scope(model);
  const std::string name = resolve_layer(model, layer);
  const std::uint64_t base = rng();

  // Welford accumulation in pass order.
  Grid mean, m2;
  for (std::size_t t = 0; t < options.num_samples; ++t) {
    Rng pass = derive_rng(base, {t});
    Grid cam = gradcam_raw(model, image, target_class, name, &pass);
    if (options.normalize_passes) min_max_normalize(cam);
    if (t == 0) {
      mean = Grid(cam.height, cam.width);
      m2 = Grid(cam.height, cam.width);
    }
    const double n = static_cast<double>(t + 1);
    for (std::size_t i = 0; i < cam.values.size(); ++i) {
      const double delta = cam.values[i] - mean.values[i];
      mean.values[i] += delta / n;
      m2.values[i] += delta * (cam.values[i] - mean.values[i]);
    }
  }
  Grid sd = m2;
  for (double& v : sd.values) v = std::sqrt(std::max(v, 0.0) / static_cast<double>(options.num_samples - 1));

  BayesResult r;
  r.raw_mean = mean;
  r.raw_std = sd;
  const auto& spec = model.spec();
  r.mean.layer = name;
  r.mean.target_class = target_class;
  r.mean.grid = upsample(mean, spec.height, spec.width);
  r.mean.normalized = min_max_normalize(r.mean.grid);
  r.uncertainty.grid = upsample(sd, spec.height, spec.width);
  r.uncertainty.num_samples = options.num_samples;
  r.uncertainty.dropout_rate = spec.dropout_rate;
  return r;
}

Zone ZoneStats::argmax() const {
  Zone best = kAllZones[0];
  for (Zone z : kAllZones) {
    if (mean(z) > mean(best)) best = z;
  }
  return best;
}

ZoneStats zone_stats(const Grid& map) {
  ZoneStats s;
  for (Zone z : kAllZones) {
    const auto b = zone_bounds(z, map.height, map.width);
    double total = 0.0;
    for (std::size_t r = b.row_begin; r < b.row_end; ++r) {
      for (std::size_t c = b.col_begin; c < b.col_end; ++c) total += map.at(r, c);
    }
    s.means[static_cast<int>(z)] =
        total / static_cast<double>((b.row_end - b.row_begin) * (b.col_end - b.col_begin));
  }
  return s;
}

Grid critical_region_mask(const Grid& heatmap) {
  const auto b = zone_bounds(zone_stats(heatmap).argmax(), heatmap.height, heatmap.width);
  Grid mask(heatmap.height, heatmap.width);
  for (std::size_t r = b.row_begin; r < b.row_end; ++r) {
    for (std::size_t c = b.col_begin; c < b.col_end; ++c) mask.at(r, c) = 1.0;
  }
  return mask;
}

UncertaintyReport uncertainty_report(const std::vector<UncertaintyCase>& cases, double threshold) {
  if (cases.empty()) throw std::invalid_argument("uncertainty_report: no cases");
  UncertaintyReport rep;
  rep.threshold = threshold;
  for (const auto& c : cases) {
    if (c.mask.height != c.uncertainty.height || c.mask.width != c.uncertainty.width) {
      throw std::invalid_argument("uncertainty_report: mask and map shapes differ");
    }
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < c.mask.values.size(); ++i) {
      if (c.mask.values[i] != 0.0) {
        total += c.uncertainty.values[i];
        ++count;
      }
    }
    if (count == 0) throw std::invalid_argument("uncertainty_report: empty critical region");
    const bool high = total / static_cast<double>(count) > threshold;
    rep.high.push_back(high);
    if (c.predicted == 1 && c.actual == 0) {
      ++rep.false_positives;
      rep.high_false_positives += high;
    } else if (c.predicted == 1 && c.actual == 1) {
      ++rep.true_positives;
      rep.high_true_positives += high;
    }
  }
  if (rep.false_positives) {
    rep.fp_high_fraction = static_cast<double>(rep.high_false_positives) / static_cast<double>(rep.false_positives);
  }
  if (rep.true_positives) {
    rep.tp_high_fraction = static_cast<double>(rep.high_true_positives) / static_cast<double>(rep.true_positives);
  }
  return rep;
}

void write_grid_csv(const std::filesystem::path& path, const Grid& grid) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  char buf[32];
  for (std::size_t r = 0; r < grid.height; ++r) {
    for (std::size_t c = 0; c < grid.width; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", grid.at(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
}

Grid read_grid_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Grid g;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(row, cell, ',')) {
      g.values.push_back(std::stod(cell));
      ++cols;
    }
    if (g.height == 0) g.width = cols;
    if (cols != g.width) throw std::runtime_error(path.string() + ": ragged grid");
    ++g.height;
  }
  return g;
}

void write_grid_pgm(const std::filesystem::path& path, const Grid& grid) {
  write_pgm(path, quantize(grid.values, grid.height, grid.width));
}

void write_zone_csv(const std::filesystem::path& path, const ZoneStats& stats) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "region,mean\n";
  char buf[32];
  for (Zone z : kAllZones) {
    std::snprintf(buf, sizeof buf, "%.17g", stats.mean(z));
    out << zone_name(z) << ',' << buf << '\n';
  }
}

}  // namespace camforge
