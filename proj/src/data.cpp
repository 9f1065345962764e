#include "camforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "camforge/image_io.hpp"

namespace camforge {

namespace fs = std::filesystem;

ClassCounts count_classes(const std::vector<Sample>& samples) {
  ClassCounts c;
  for (const auto& s : samples) (s.label == Label::normal ? c.normal : c.pneumonia)++;
  return c;
}

ClassCounts count_originals(const std::vector<Sample>& samples) {
  ClassCounts c;
  for (const auto& s : samples) {
    if (!s.augmented) (s.label == Label::normal ? c.normal : c.pneumonia)++;
  }
  return c;
}

const std::vector<Sample>& DatasetSplit::named(const std::string& split) const {
  if (split == "train") return train;
  if (split == "val") return val;
  if (split == "test") return test;
  throw std::invalid_argument("unknown split '" + split + "' (expected train, val or test)");
}

std::vector<Sample> DatasetSplit::union_of(const std::vector<std::string>& splits) const {
  std::vector<Sample> out;
  for (const auto& name : splits) {
    const auto& part = named(name);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

bool splits_disjoint(const DatasetSplit& split) {
  std::map<std::string, int> owner;
  int idx = 0;
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (const auto& s : *part) {
      auto [it, inserted] = owner.emplace(s.origin_id, idx);
      if (!inserted && it->second != idx) return false;
    }
    ++idx;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.flip_prob = 0.0;
  c.max_rotation_deg = 0.0;
  c.crop_area_min = c.crop_area_max = 1.0;
  c.crop_aspect_min = c.crop_aspect_max = 1.0;
  c.brightness = c.contrast = 0.0;
  c.noise_sigma = 0.0;
  return c;
}

void AugmentConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("augment config: " + m); };
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) fail("flip_prob must be in [0,1]");
  if (!(max_rotation_deg >= 0.0)) fail("max_rotation_deg must be nonnegative");
  if (!(crop_area_min > 0.0 && crop_area_min <= crop_area_max && crop_area_max <= 1.0)) {
    fail("crop area range must lie within (0,1]");
  }
  if (!(crop_aspect_min > 0.0 && crop_aspect_min <= crop_aspect_max)) fail("bad crop aspect range");
  if (!(brightness >= 0.0 && brightness < 1.0)) fail("brightness must be in [0,1)");
  if (!(contrast >= 0.0 && contrast < 1.0)) fail("contrast must be in [0,1)");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be nonnegative");
}

namespace {

double sample_bilinear(const double* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ty = y - static_cast<double>(y0), tx = x - static_cast<double>(x0);
  const double top = plane[y0 * w + x0] + tx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
  const double bottom = plane[y1 * w + x0] + tx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
  return top + ty * (bottom - top);
}

template <typename Map>
Tensor resample(const Tensor& image, Map&& source_of) {
  if (image.dim() != 3) throw std::invalid_argument("expected a C x H x W image, got " + shape_str(image.shape()));
  const std::size_t c = image.size(0), h = image.size(1), w = image.size(2);
  Tensor out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = src.data() + ch * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const auto [y, x] = source_of(static_cast<double>(i), static_cast<double>(j));
        dst[(ch * h + i) * w + j] = sample_bilinear(plane, h, w, y, x);
      }
  }
  return out;
}

Zone mirror(Zone z) {
  const int i = static_cast<int>(z);
  return static_cast<Zone>(i % 2 == 0 ? i + 1 : i - 1);
}

}  // namespace

Tensor hflip(const Tensor& image) {
  if (image.dim() != 3) throw std::invalid_argument("hflip: expected C x H x W, got " + shape_str(image.shape()));
  const std::size_t c = image.size(0), h = image.size(1), w = image.size(2);
  Tensor out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < c * h; ++r)
    for (std::size_t j = 0; j < w; ++j) dst[r * w + j] = src[r * w + (w - 1 - j)];
  return out;
}

Tensor rotate(const Tensor& image, double degrees) {
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(image.size(1)) - 1.0) / 2.0;
  const double cx = (static_cast<double>(image.size(2)) - 1.0) / 2.0;
  return resample(image, [&](double i, double j) {
    const double dy = i - cy, dx = j - cx;
    return std::pair{cy - sn * dx + cs * dy, cx + cs * dx + sn * dy};
  });
}

Tensor resized_crop(const Tensor& image, double top, double left, double crop_h, double crop_w) {
  const double sy = crop_h / static_cast<double>(image.size(1));
  const double sx = crop_w / static_cast<double>(image.size(2));
  return resample(image, [&](double i, double j) {
    return std::pair{top + (i + 0.5) * sy - 0.5, left + (j + 0.5) * sx - 0.5};
  });
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng) {
  Sample out = sample;
  Tensor img = sample.image.clone();
  const auto h = static_cast<double>(img.size(1)), w = static_cast<double>(img.size(2));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const bool crop = cfg.crop_area_min < 1.0 || cfg.crop_aspect_min != 1.0 || cfg.crop_aspect_max != 1.0;
  if (crop) {
    const double area = h * w * (cfg.crop_area_min + unit(rng) * (cfg.crop_area_max - cfg.crop_area_min));
    const double log_lo = std::log(cfg.crop_aspect_min), log_hi = std::log(cfg.crop_aspect_max);
    const double aspect = std::exp(log_lo + unit(rng) * (log_hi - log_lo));
    const double cw = std::min(w, std::sqrt(area * aspect));
    const double ch = std::min(h, std::sqrt(area / aspect));
    const double top = unit(rng) * (h - ch);
    const double left = unit(rng) * (w - cw);
    img = resized_crop(img, top, left, ch, cw);
  }
  if (cfg.max_rotation_deg > 0.0) {
    img = rotate(img, (2.0 * unit(rng) - 1.0) * cfg.max_rotation_deg);
  }
  if (cfg.flip_prob > 0.0 && unit(rng) < cfg.flip_prob) {
    img = hflip(img);
    if (out.planted_zone) out.planted_zone = mirror(*out.planted_zone);
  }
  auto px = img.mutable_data();
  if (cfg.brightness > 0.0) {
    const double f = 1.0 + (2.0 * unit(rng) - 1.0) * cfg.brightness;
    for (double& v : px) v *= f;
  }
  if (cfg.contrast > 0.0) {
    const double f = 1.0 + (2.0 * unit(rng) - 1.0) * cfg.contrast;
    double m = 0.0;
    for (double v : px) m += v;
    m /= static_cast<double>(px.size());
    for (double& v : px) v = (v - m) * f + m;
  }
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (double& v : px) v += noise(rng);
  }
  for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  out.image = img;
  return out;
}

DatasetSplit balance_minority(const DatasetSplit& split, const AugmentConfig& cfg, Rng& rng) {
  const ClassCounts counts = count_classes(split.train);
  DatasetSplit out = split;
  if (counts.normal == counts.pneumonia) return out;
  const Label minority = counts.normal < counts.pneumonia ? Label::normal : Label::pneumonia;
  const std::size_t have = counts.of(minority);
  const std::size_t want = std::max(counts.normal, counts.pneumonia);
  if (have == 0) throw std::invalid_argument("balance_minority: minority class has no training samples");

  std::vector<const Sample*> sources;
  for (const auto& s : split.train) {
    if (s.label == minority && !s.augmented) sources.push_back(&s);
  }
  if (sources.empty()) {
    for (const auto& s : split.train) {
      if (s.label == minority) sources.push_back(&s);
    }
  }
  const std::uint64_t base = rng();
  for (std::size_t k = 0; k < want - have; ++k) {
    const Sample& src = *sources[k % sources.size()];
    Rng copy_rng = derive_rng(base, {hash_string(src.source_id), k});
    Sample copy = augment(src, cfg, copy_rng);
    copy.source_id = src.source_id + "#aug" + std::to_string(k);
    copy.origin_id = src.origin_id;
    copy.augmented = true;
    out.train.push_back(std::move(copy));
  }
  return out;
}

std::vector<double> sampling_weights(const std::vector<Sample>& train, const ClassCounts& original_counts) {
  if (original_counts.normal == 0 || original_counts.pneumonia == 0) {
    throw std::invalid_argument("sampling_weights: class counts must be positive");
  }
  std::vector<double> w(train.size());
  double total = 0.0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    w[i] = 1.0 / static_cast<double>(original_counts.of(train[i].label));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

double pos_class_weight(const ClassCounts& original_counts) {
  if (original_counts.pneumonia == 0) throw std::invalid_argument("pos_class_weight: zero pneumonia count");
  if (original_counts.normal == 0) throw std::invalid_argument("pos_class_weight: zero normal count");
  return static_cast<double>(original_counts.normal) / static_cast<double>(original_counts.pneumonia);
}

// ---------------------------------------------------------------------------
// Phantoms

void PhantomSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("phantom spec: " + m); };
  if (image_size < 32) fail("image_size must be >= 32");
  if (!(lesion_intensity >= 0.0)) fail("lesion_intensity must be nonnegative");
  if (!(lesion_radius_min > 0.0 && lesion_radius_min <= lesion_radius_max && lesion_radius_max <= 0.12)) {
    fail("lesion radius range must satisfy 0 < min <= max <= 0.12");
  }
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be nonnegative");
  if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction <= 1.0)) {
    fail("split fractions must be nonnegative and sum to at most 1");
  }
}

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// 1 inside the unit ellipse, fading to 0 over `soft` of radius.
double ellipse_mask(double u, double v, double cu, double cv, double au, double av, double soft) {
  const double du = (u - cu) / au, dv = (v - cv) / av;
  return 1.0 - smoothstep(1.0 - soft, 1.0, std::sqrt(du * du + dv * dv));
}

std::string phantom_id(Label label, std::size_t index) {
  std::ostringstream os;
  os << (label == Label::normal ? "normal_" : "pneumonia_") << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

Sample render_phantom(const PhantomSpec& spec, Label label, std::size_t index, std::uint64_t seed) {
  const std::string id = phantom_id(label, index);
  Rng rng = derive_rng(seed, {hash_string("phantom"), hash_string(id)});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double a) { return (2.0 * unit(rng) - 1.0) * a; };

  const std::size_t n = spec.image_size;
  const double size = static_cast<double>(n);
  const double background = 0.08 + jitter(0.02);
  const double body_level = 0.30 + jitter(0.03);
  const double lung_level = 0.55 + jitter(0.04);
  const double lung_shift = jitter(0.015);
  const double lung_au = 0.15 + jitter(0.01), lung_av = 0.32 + jitter(0.02);
  const double left_cu = 0.30 + lung_shift, right_cu = 0.70 + lung_shift, lung_cv = 0.50 + jitter(0.01);
  const double rib_freq = 7.0 + jitter(0.5), rib_phase = unit(rng), rib_amp = 0.05 + jitter(0.01);

  std::vector<double> px(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double u = (static_cast<double>(j) + 0.5) / size, v = (static_cast<double>(i) + 0.5) / size;
      const double body = ellipse_mask(u, v, 0.5, 0.52, 0.44, 0.46, 0.1);
      const double lungs = std::max(ellipse_mask(u, v, left_cu, lung_cv, lung_au, lung_av, 0.25),
                                    ellipse_mask(u, v, right_cu, lung_cv, lung_au, lung_av, 0.25));
      const double ribs = rib_amp * std::sin(2.0 * std::numbers::pi * (v * rib_freq + rib_phase));
      px[i * n + j] = background + body * (body_level - background) + lungs * (lung_level - body_level + ribs);
    }
  }

  Sample s;
  s.label = label;
  s.source_id = id;
  s.origin_id = id;
  if (label == Label::pneumonia) {
    const Zone zone = kAllZones[static_cast<std::size_t>(unit(rng) * 6.0) % 6];
    const ZoneBounds zb = zone_bounds(zone, n, n);
    const bool east = static_cast<int>(zone) % 2 == 0;
    const double ra = size * (spec.lesion_radius_min + unit(rng) * (spec.lesion_radius_max - spec.lesion_radius_min));
    const double rb = size * (spec.lesion_radius_min + unit(rng) * (spec.lesion_radius_max - spec.lesion_radius_min));
    const double margin = std::max(ra, rb);
    const double lung_cx = size * (east ? right_cu : left_cu) - 0.5;
    const double cx = lung_cx + jitter(0.5 * lung_au * size);
    const double lung_top = size * (lung_cv - lung_av), lung_bottom = size * (lung_cv + lung_av);
    const double y_lo = std::max(static_cast<double>(zb.row_begin) + margin, lung_top);
    const double y_hi = std::min(static_cast<double>(zb.row_end) - margin, lung_bottom);
    const double cy = y_lo + unit(rng) * std::max(0.0, y_hi - y_lo);
    const double angle = unit(rng) * std::numbers::pi;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double dx = static_cast<double>(j) - cx, dy = static_cast<double>(i) - cy;
        const double a = (ca * dx + sa * dy) / ra, b = (-sa * dx + ca * dy) / rb;
        const double rho = std::sqrt(a * a + b * b);
        px[i * n + j] += spec.lesion_intensity * (1.0 - smoothstep(0.6, 1.0, rho));
      }
    }
    s.planted_zone = zone;
  }
  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (double& v : px) v += noise(rng);
  }
  // Round-trip through 8 bits so in-memory and on-disk datasets agree exactly.
  s.image = normalize_pixels(quantize(px, n, n));
  return s;
}

DatasetSplit generate_phantoms(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  DatasetSplit out;
  const auto n = spec.n_per_class;
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.val_fraction));
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.test_fraction));
  const std::size_t n_train = n - std::min(n, n_val + n_test);
  for (Label label : {Label::normal, Label::pneumonia}) {
    for (std::size_t i = 0; i < n; ++i) {
      Sample s = render_phantom(spec, label, i, seed);
      if (i < n_train) {
        out.train.push_back(std::move(s));
      } else if (i < n_train + n_val) {
        out.val.push_back(std::move(s));
      } else {
        out.test.push_back(std::move(s));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disk layout

namespace {

const char* class_dir(Label l) { return l == Label::normal ? "NORMAL" : "PNEUMONIA"; }

std::optional<Label> parse_label(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  if (s == "0" || s == "NORMAL") return Label::normal;
  if (s == "1" || s == "PNEUMONIA") return Label::pneumonia;
  return std::nullopt;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

struct PendingImage {
  fs::path path;
  std::string source_id;
  Label label;
  std::string split;
};

std::vector<PendingImage> scan_class_dirs(const fs::path& dir, const std::string& split,
                                          const std::string& id_prefix) {
  std::vector<PendingImage> items;
  for (Label label : {Label::normal, Label::pneumonia}) {
    const fs::path sub = dir / class_dir(label);
    if (!fs::is_directory(sub)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(sub)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      items.push_back({f, id_prefix + class_dir(label) + "/" + f.stem().string(), label, split});
    }
  }
  return items;
}

}  // namespace

LoadResult load_directory(const fs::path& root, const LoadOptions& options) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory " + root.string() + " does not exist");
  std::vector<PendingImage> items;
  const fs::path manifest = root / "manifest.csv";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::getline(in, line);
    if (split_csv_line(line) != std::vector<std::string>{"source_id", "path", "label", "split"}) {
      throw std::runtime_error(manifest.string() + ": expected header source_id,path,label,split");
    }
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (line.empty() || line == "\r") continue;
      const auto cells = split_csv_line(line);
      const auto label = cells.size() == 4 ? parse_label(cells[2]) : std::nullopt;
      if (!label) throw std::runtime_error(manifest.string() + ": malformed row " + std::to_string(row));
      items.push_back({root / cells[1], cells[0], *label, cells[3]});
    }
  } else if (fs::is_directory(root / "train")) {
    for (const char* split : {"train", "val", "test"}) {
      auto part = scan_class_dirs(root / split, split, std::string(split) + "/");
      items.insert(items.end(), part.begin(), part.end());
    }
  } else {
    items = scan_class_dirs(root, "train", "");
  }

  std::map<std::string, Zone> lesions;
  if (std::ifstream lz(root / "lesions.csv"); lz) {
    std::string line;
    std::getline(lz, line);
    while (std::getline(lz, line)) {
      const auto cells = split_csv_line(line);
      if (cells.size() == 2) {
        if (auto z = zone_from_key(cells[1])) lesions[cells[0]] = *z;
      }
    }
  }

  LoadResult result;
  for (const auto& item : items) {
    Sample s;
    try {
      s.image = resize_image(normalize_pixels(read_pgm(item.path)), options.height, options.width);
    } catch (const std::exception& e) {
      ++result.skipped;
      result.warnings.push_back(std::string("skipped ") + e.what());
      std::cerr << "warning: skipped " << item.path.string() << ": " << e.what() << '\n';
      continue;
    }
    s.label = item.label;
    s.source_id = item.source_id;
    s.origin_id = item.source_id;
    if (auto it = lesions.find(item.source_id); it != lesions.end()) s.planted_zone = it->second;
    if (item.split == "train") {
      result.split.train.push_back(std::move(s));
    } else if (item.split == "val") {
      result.split.val.push_back(std::move(s));
    } else if (item.split == "test") {
      result.split.test.push_back(std::move(s));
    } else {
      throw std::runtime_error("unknown split '" + item.split + "' for " + item.source_id);
    }
  }
  if (result.split.train.empty() && result.split.val.empty() && result.split.test.empty()) {
    throw std::runtime_error("no readable images under " + root.string() + " (" + std::to_string(result.skipped) +
                             " skipped)");
  }
  return result;
}

std::vector<ManifestRow> write_dataset(const fs::path& root, const DatasetSplit& split) {
  for (Label l : {Label::normal, Label::pneumonia}) fs::create_directories(root / class_dir(l));
  std::vector<ManifestRow> rows;
  std::ofstream manifest(root / "manifest.csv", std::ios::trunc);
  std::ofstream lesions(root / "lesions.csv", std::ios::trunc);
  if (!manifest || !lesions) throw std::runtime_error("cannot write manifest under " + root.string());
  manifest << "source_id,path,label,split\n";
  lesions << "source_id,zone\n";
  const std::pair<const char*, const std::vector<Sample>*> parts[] = {
      {"train", &split.train}, {"val", &split.val}, {"test", &split.test}};
  for (const auto& [name, samples] : parts) {
    for (const auto& s : *samples) {
      const std::string rel = std::string(class_dir(s.label)) + "/" + s.source_id + ".pgm";
      write_pgm(root / rel, quantize(s.image.data(), s.image.size(1), s.image.size(2)));
      manifest << s.source_id << ',' << rel << ',' << static_cast<int>(s.label) << ',' << name << '\n';
      if (s.planted_zone) lesions << s.source_id << ',' << zone_key(*s.planted_zone) << '\n';
      rows.push_back({s.source_id, rel, s.label, name});
    }
  }
  return rows;
}

Tensor make_batch(const std::vector<const Sample*>& samples, std::size_t channels) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const std::size_t h = samples.front()->image.size(1), w = samples.front()->image.size(2);
  Tensor batch({samples.size(), channels, h, w});
  auto dst = batch.mutable_data();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& img = samples[i]->image;
    if (img.size(1) != h || img.size(2) != w) {
      throw std::invalid_argument("make_batch: image " + samples[i]->source_id + " has shape " +
                                  shape_str(img.shape()));
    }
    auto src = img.data();
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t src_c = img.size(0) == channels ? c : 0;
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(src_c * h * w), h * w,
                  dst.begin() + static_cast<std::ptrdiff_t>((i * channels + c) * h * w));
    }
  }
  return batch;
}

Tensor make_targets(const std::vector<const Sample*>& samples) {
  Tensor t({samples.size(), 1});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < samples.size(); ++i) d[i] = label_value(samples[i]->label);
  return t;
}

}  // namespace camforge
