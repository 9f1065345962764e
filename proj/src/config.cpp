#include "camforge/config.hpp"

#include <cstdlib>
#include <fstream>

#include "camforge/json_util.hpp"

namespace camforge {

void RunConfig::propagate_seed() {
  train.seed = seed;
  augment.seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  augment.validate();
  phantom.validate();
  if (explain.num_samples < 2) throw ConfigError("explain.num_samples", "must be at least 2");
  if (explain.target_class != 0 && explain.target_class != 1) {
    throw ConfigError("explain.target_class", "must be 0 or 1");
  }
  if (!(eval.threshold >= 0.0 && eval.threshold <= 1.0)) throw ConfigError("eval.threshold", "must be in [0,1]");
  if (!(eval.flag_threshold >= 0.0 && eval.flag_threshold <= 1.0)) {
    throw ConfigError("eval.flag_threshold", "must be in [0,1]");
  }
  if (eval.histogram_bins == 0) throw ConfigError("eval.histogram_bins", "must be positive");
  if (eval.batch_size == 0) throw ConfigError("eval.batch_size", "must be positive");
}

namespace {

void read_train(JsonReader& r, TrainConfig& t) {
  t.lr = r.number("lr", t.lr);
  t.weight_decay = r.number("weight_decay", t.weight_decay);
  t.beta1 = r.number("beta1", t.beta1);
  t.beta2 = r.number("beta2", t.beta2);
  t.eps = r.number("eps", t.eps);
  t.batch_size = r.count("batch_size", t.batch_size);
  t.max_epochs = r.count("max_epochs", t.max_epochs);
  t.plateau_factor = r.number("plateau_factor", t.plateau_factor);
  t.plateau_patience = r.count("plateau_patience", t.plateau_patience);
  t.early_stop_patience = r.count("early_stop_patience", t.early_stop_patience);
  t.improvement_tol = r.number("improvement_tol", t.improvement_tol);
  t.balance_minority = r.boolean("balance_minority", t.balance_minority);
  t.augment = r.boolean("augment", t.augment);
  r.finish();
}

void read_augment(JsonReader& r, AugmentConfig& a) {
  a.flip_prob = r.number("flip_prob", a.flip_prob);
  a.max_rotation_deg = r.number("max_rotation_deg", a.max_rotation_deg);
  a.crop_area_min = r.number("crop_area_min", a.crop_area_min);
  a.crop_area_max = r.number("crop_area_max", a.crop_area_max);
  a.crop_aspect_min = r.number("crop_aspect_min", a.crop_aspect_min);
  a.crop_aspect_max = r.number("crop_aspect_max", a.crop_aspect_max);
  a.brightness = r.number("brightness", a.brightness);
  a.contrast = r.number("contrast", a.contrast);
  a.noise_sigma = r.number("noise_sigma", a.noise_sigma);
  r.finish();
}

void read_phantom(JsonReader& r, PhantomSpec& p) {
  p.n_per_class = r.count("n_per_class", p.n_per_class);
  p.image_size = r.count("image_size", p.image_size);
  p.lesion_intensity = r.number("lesion_intensity", p.lesion_intensity);
  p.lesion_radius_min = r.number("lesion_radius_min", p.lesion_radius_min);
  p.lesion_radius_max = r.number("lesion_radius_max", p.lesion_radius_max);
  p.noise_sigma = r.number("noise_sigma", p.noise_sigma);
  p.val_fraction = r.number("val_fraction", p.val_fraction);
  p.test_fraction = r.number("test_fraction", p.test_fraction);
  r.finish();
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  RunConfig cfg;
  JsonReader root(j, "");
  cfg.seed_explicit = root.has("seed");
  cfg.seed = root.seed("seed", cfg.seed);
  if (const auto* m = root.child("model")) cfg.model = model_spec_from_json(*m, "model", cfg.model);
  if (const auto* t = root.child("train")) {
    JsonReader r(*t, "train");
    read_train(r, cfg.train);
  }
  if (const auto* a = root.child("augment")) {
    JsonReader r(*a, "augment");
    read_augment(r, cfg.augment);
  }
  if (const auto* e = root.child("explain")) {
    JsonReader r(*e, "explain");
    cfg.explain.num_samples = r.count("num_samples", cfg.explain.num_samples);
    cfg.explain.uncertainty_threshold = r.number("uncertainty_threshold", cfg.explain.uncertainty_threshold);
    cfg.explain.normalize_passes = r.boolean("normalize_passes", cfg.explain.normalize_passes);
    cfg.explain.target_class = static_cast<int>(r.count("target_class", static_cast<std::size_t>(cfg.explain.target_class)));
    r.finish();
  }
  if (const auto* e = root.child("eval")) {
    JsonReader r(*e, "eval");
    cfg.eval.threshold = r.number("threshold", cfg.eval.threshold);
    cfg.eval.flag_threshold = r.number("flag_threshold", cfg.eval.flag_threshold);
    cfg.eval.histogram_bins = r.count("histogram_bins", cfg.eval.histogram_bins);
    cfg.eval.batch_size = r.count("batch_size", cfg.eval.batch_size);
    r.finish();
  }
  if (const auto* p = root.child("phantom")) {
    JsonReader r(*p, "phantom");
    read_phantom(r, cfg.phantom);
  }
  root.finish();
  cfg.propagate_seed();
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("<config>", e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

nlohmann::json to_json(const RunConfig& cfg) {
  const auto& t = cfg.train;
  const auto& a = cfg.augment;
  const auto& p = cfg.phantom;
  return {{"seed", cfg.seed},
          {"model", to_json(cfg.model)},
          {"train",
           {{"lr", t.lr},
            {"weight_decay", t.weight_decay},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"batch_size", t.batch_size},
            {"max_epochs", t.max_epochs},
            {"plateau_factor", t.plateau_factor},
            {"plateau_patience", t.plateau_patience},
            {"early_stop_patience", t.early_stop_patience},
            {"improvement_tol", t.improvement_tol},
            {"balance_minority", t.balance_minority},
            {"augment", t.augment}}},
          {"augment",
           {{"flip_prob", a.flip_prob},
            {"max_rotation_deg", a.max_rotation_deg},
            {"crop_area_min", a.crop_area_min},
            {"crop_area_max", a.crop_area_max},
            {"crop_aspect_min", a.crop_aspect_min},
            {"crop_aspect_max", a.crop_aspect_max},
            {"brightness", a.brightness},
            {"contrast", a.contrast},
            {"noise_sigma", a.noise_sigma}}},
          {"explain",
           {{"num_samples", cfg.explain.num_samples},
            {"uncertainty_threshold", cfg.explain.uncertainty_threshold},
            {"normalize_passes", cfg.explain.normalize_passes},
            {"target_class", cfg.explain.target_class}}},
          {"eval",
           {{"threshold", cfg.eval.threshold},
            {"flag_threshold", cfg.eval.flag_threshold},
            {"histogram_bins", cfg.eval.histogram_bins},
            {"batch_size", cfg.eval.batch_size}}},
          {"phantom",
           {{"n_per_class", p.n_per_class},
            {"image_size", p.image_size},
            {"lesion_intensity", p.lesion_intensity},
            {"lesion_radius_min", p.lesion_radius_min},
            {"lesion_radius_max", p.lesion_radius_max},
            {"noise_sigma", p.noise_sigma},
            {"val_fraction", p.val_fraction},
            {"test_fraction", p.test_fraction}}}};
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const std::optional<std::uint64_t>& from_config) {
  if (flag) return *flag;
  if (from_config) return *from_config;
  if (const char* env = std::getenv("CAMFORGE_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError("CAMFORGE_SEED", "not an unsigned integer: " + std::string(env));
    return v;
  }
  return 0;
}

}  // namespace camforge
