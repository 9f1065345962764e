// camforge: command-line front end for data generation, training,
// evaluation and explanation.
#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "camforge/cam.hpp"
#include "camforge/checkpoint.hpp"
#include "camforge/config.hpp"
#include "camforge/data.hpp"
#include "camforge/image_io.hpp"
#include "camforge/json_util.hpp"
#include "camforge/metrics.hpp"
#include "camforge/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace camforge;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 0;  // 0: leave the OpenMP default
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "RNG seed (falls back to the config, then CAMFORGE_SEED)");
  cmd->add_option("--workers", c.workers, "threads for convolution kernels");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  cfg.seed = resolve_seed(c.seed, cfg.seed_explicit ? std::optional<std::uint64_t>(cfg.seed) : std::nullopt);
  cfg.propagate_seed();
  if (c.workers > 0) omp_set_num_threads(static_cast<int>(c.workers));
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

void prepare_out(const fs::path& dir, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
  write_json(dir / "resolved_config.json", to_json(cfg));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item != "train" && item != "val" && item != "test") throw std::invalid_argument("unknown split '" + item + "'");
    out.push_back(item);
  }
  if (out.empty()) throw std::invalid_argument("--splits is empty");
  return out;
}

LoadResult load_data(const std::string& dir, const ModelSpec& spec) {
  LoadResult data = load_directory(dir, {spec.height, spec.width});
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << '\n';
  return data;
}

std::vector<Sample> select(const DatasetSplit& split, const std::vector<std::string>& names) {
  std::vector<Sample> samples = split.union_of(names);
  if (samples.empty()) throw std::invalid_argument("requested splits contain no samples");
  return samples;
}

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int generate_data(const fs::path& out, std::optional<std::size_t> n_per_class, std::optional<std::size_t> size,
                  const Common& c) {
  RunConfig cfg = resolve(c);
  if (n_per_class) cfg.phantom.n_per_class = *n_per_class;
  if (size) cfg.phantom.image_size = *size;
  cfg.phantom.validate();
  prepare_out(out, cfg);
  const auto rows = write_dataset(out, generate_phantoms(cfg.phantom, cfg.seed));
  std::cout << json{{"written", rows.size()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int train_cmd(const fs::path& data_dir, const fs::path& out, const std::string& resume,
              std::optional<std::size_t> max_epochs, const Common& c) {
  RunConfig cfg = resolve(c);
  if (max_epochs) cfg.train.max_epochs = *max_epochs;
  cfg.validate();
  prepare_out(out, cfg);
  const LoadResult data = load_data(data_dir, cfg.model);

  Rng init = derive_rng(cfg.seed, {hash_string("init")});
  Model model = Model::build(cfg.model, init);
  TrainOptions options;
  options.out_dir = out;
  if (!resume.empty()) {
    options.resume = load_checkpoint(resume);
    const fs::path best = fs::path(resume).parent_path() / "best.camf";
    if (fs::exists(best)) options.resume_best = load_checkpoint(best);
  }
  options.on_epoch = [](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss " << r.val_loss << " val_acc "
              << r.val_accuracy << '\n';
  };
  const TrainResult result = train(model, data.split, cfg.train, cfg.augment, options);
  if (!fs::exists(out / "best.camf")) save_checkpoint(out / "best.camf", result.best);
  restore(model, result.best);

  json summary{{"best_epoch", result.best_epoch},
               {"epochs_run", result.history.size()},
               {"early_stopped", result.early_stopped},
               {"diverged", result.diverged},
               {"wall_seconds", result.wall_seconds},
               {"pos_weight", result.pos_weight},
               {"skipped_files", data.skipped}};
  if (result.diverged) summary["divergence"] = result.divergence;
  for (const char* name : {"val", "test"}) {
    const auto& samples = data.split.named(name);
    if (samples.empty()) continue;
    const Predictions p = predict(model, samples, cfg.eval.batch_size, result.pos_weight);
    json m = to_json(metrics_report(p.probs, p.labels, cfg.eval.threshold));
    m["loss"] = p.loss;
    summary[std::string(name)] = m;
  }
  write_json(out / "summary.json", summary);
  std::cout << summary.dump() << '\n';
  if (result.diverged) throw std::runtime_error("training diverged: " + result.divergence);
  return 0;
}

int evaluate_cmd(const fs::path& ckpt_path, const fs::path& data_dir, const std::string& splits, const fs::path& out,
                 const Common& c) {
  RunConfig cfg = resolve(c);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  cfg.model = ckpt.spec;
  prepare_out(out, cfg);
  Model model = model_from_checkpoint(ckpt);
  const LoadResult data = load_data(data_dir, ckpt.spec);
  const std::vector<Sample> samples = select(data.split, split_list(splits));
  const Predictions p = predict(model, samples, cfg.eval.batch_size);
  const MetricsReport report = metrics_report(p.probs, p.labels, cfg.eval.threshold);

  write_json(out / "metrics.json", to_json(report));
  write_confusion_csv(out / "confusion.csv", report.cm);
  write_roc_csv(out / "roc.csv", roc_auc(p.probs, p.labels));
  std::ofstream pred(out / "predictions.csv", std::ios::trunc);
  pred << "source_id,label,prob,logit\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pred << samples[i].source_id << ',' << p.labels[i] << ',' << g17(p.probs[i]) << ',' << g17(p.logits[i]) << '\n';
  }
  std::cout << to_json(report).dump() << '\n';
  return 0;
}

Tensor image_tensor(const fs::path& path, const ModelSpec& spec) {
  const Tensor gray = resize_image(normalize_pixels(read_pgm(path)), spec.height, spec.width);
  if (spec.in_channels == 1) return gray;
  std::vector<double> values;
  for (std::size_t ch = 0; ch < spec.in_channels; ++ch) values.insert(values.end(), gray.data().begin(), gray.data().end());
  return Tensor({spec.in_channels, spec.height, spec.width}, values);
}

int explain_cmd(const fs::path& ckpt_path, const fs::path& image, const std::string& mode,
                std::optional<std::size_t> samples, std::optional<int> target, const std::string& layer,
                const fs::path& out, const Common& c) {
  if (mode != "gradcam" && mode != "bayes") throw std::invalid_argument("--mode must be gradcam or bayes");
  RunConfig cfg = resolve(c);
  if (samples) {
    if (*samples < 2 && mode == "bayes") throw std::invalid_argument("--samples must be at least 2 in bayes mode");
    cfg.explain.num_samples = *samples;
  }
  if (target) cfg.explain.target_class = *target;
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = model_from_checkpoint(ckpt);
  // The architecture comes from the checkpoint; a config may still change
  // the dropout rate used for sampling.
  ModelSpec spec = ckpt.spec;
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    const json raw = json::parse(in);
    if (raw.contains("model") && raw["model"].contains("dropout_rate")) {
      spec.dropout_rate = cfg.model.dropout_rate;
      model.set_dropout_rate(spec.dropout_rate);
    }
  }
  cfg.model = spec;
  cfg.validate();
  prepare_out(out, cfg);

  const Tensor x = image_tensor(image, spec);
  const int cls = cfg.explain.target_class;
  double prob;
  {
    NoGradGuard no_grad;
    const auto o = model.forward(reshape(x, {1, spec.in_channels, spec.height, spec.width}));
    prob = sigmoid(o.logits.item());
  }
  json summary{{"mode", mode}, {"target_class", cls}, {"prob", prob}};
  Heatmap heat;
  if (mode == "gradcam") {
    heat = gradcam(model, x, cls, layer);
  } else {
    Rng rng = derive_rng(cfg.seed, {hash_string("explain")});
    const BayesResult b =
        bayes_gradcam(model, x, cls, layer, rng, {cfg.explain.num_samples, cfg.explain.normalize_passes});
    heat = b.mean;
    write_grid_csv(out / "uncertainty.csv", b.uncertainty.grid);
    write_grid_pgm(out / "uncertainty.pgm", b.uncertainty.grid);
    const ZoneStats uz = zone_stats(b.uncertainty.grid);
    write_zone_csv(out / "uncertainty_zones.csv", uz);
    const Grid mask = critical_region_mask(heat.grid);
    const auto rep = uncertainty_report({{b.uncertainty.grid, mask, prob >= cfg.eval.threshold ? 1 : 0, cls}},
                                        cfg.explain.uncertainty_threshold);
    summary["critical_region_high_uncertainty"] = static_cast<bool>(rep.high[0]);
    summary["num_samples"] = cfg.explain.num_samples;
  }
  write_grid_csv(out / "heatmap.csv", heat.grid);
  write_grid_pgm(out / "heatmap.pgm", heat.grid);
  const ZoneStats zs = zone_stats(heat.grid);
  write_zone_csv(out / "zones.csv", zs);
  summary["layer"] = heat.layer;
  summary["normalized"] = heat.normalized;
  summary["argmax_zone"] = std::string(zone_key(zs.argmax()));
  std::cout << summary.dump() << '\n';
  return 0;
}

int residuals_cmd(const fs::path& ckpt_path, const fs::path& data_dir, const std::string& splits, const fs::path& out,
                  const Common& c) {
  RunConfig cfg = resolve(c);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  cfg.model = ckpt.spec;
  prepare_out(out, cfg);
  Model model = model_from_checkpoint(ckpt);
  const LoadResult data = load_data(data_dir, ckpt.spec);
  const std::vector<Sample> samples = select(data.split, split_list(splits));
  const Predictions p = predict(model, samples, cfg.eval.batch_size);
  const ResidualAnalysis ra = residual_analysis(p.probs, p.labels, cfg.eval.histogram_bins, cfg.eval.flag_threshold);

  write_histogram_csv(out / "residual_histogram.csv", ra.histogram);
  write_scatter_csv(out / "residual_scatter.csv", ra.records);
  std::ofstream flagged(out / "flagged_cases.csv", std::ios::trunc);
  flagged << "source_id,label,prob,residual\n";
  for (std::size_t i : ra.summary.flagged) {
    flagged << samples[i].source_id << ',' << p.labels[i] << ',' << g17(p.probs[i]) << ','
            << g17(ra.records[i].residual) << '\n';
  }
  const json summary{{"count", ra.summary.count},
                     {"mean", ra.summary.mean},
                     {"mean_abs", ra.summary.mean_abs},
                     {"flag_threshold", ra.summary.flag_threshold},
                     {"flagged", ra.summary.flagged.size()},
                     {"flagged_false_positives", ra.summary.flagged_false_positives},
                     {"flagged_false_negatives", ra.summary.flagged_false_negatives}};
  write_json(out / "residual_summary.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

int fail(const std::string& message, const std::string& key = {}) {
  json e{{"error", message}};
  if (!key.empty()) e["key"] = key;
  std::cerr << e.dump() << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"camforge: residual-network classifier with Grad-CAM explanations"};
  app.require_subcommand(1);

  Common common;
  std::string out, data, checkpoint, splits = "test", resume, image, mode = "gradcam", layer;
  std::optional<std::size_t> n_per_class, size, max_epochs, samples;
  std::optional<int> target;

  auto* gen = app.add_subcommand("generate-data", "write a synthetic phantom dataset");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--n-per-class", n_per_class, "images per class");
  gen->add_option("--size", size, "image side length in pixels");
  add_common(gen, common);

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--resume", resume, "last.camf from an interrupted run");
  tr->add_option("--max-epochs", max_epochs, "override train.max_epochs");
  add_common(tr, common);

  auto* ev = app.add_subcommand("evaluate", "metrics for a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--splits", splits, "comma-separated subset of train,val,test");
  ev->add_option("--out", out)->required();
  add_common(ev, common);

  auto* ex = app.add_subcommand("explain", "Grad-CAM or Bayesian Grad-CAM for one image");
  ex->add_option("--checkpoint", checkpoint)->required();
  ex->add_option("--image", image, "8-bit PGM")->required();
  ex->add_option("--mode", mode, "gradcam|bayes");
  ex->add_option("--samples", samples, "Monte Carlo passes (bayes)");
  ex->add_option("--target", target, "class to explain, 0 or 1");
  ex->add_option("--layer", layer, "attribution layer (default: last stage)");
  ex->add_option("--out", out)->required();
  add_common(ex, common);

  auto* rs = app.add_subcommand("residuals", "residual diagnostics for a checkpoint");
  rs->add_option("--checkpoint", checkpoint)->required();
  rs->add_option("--data", data)->required();
  rs->add_option("--splits", splits, "comma-separated subset of train,val,test");
  rs->add_option("--out", out)->required();
  add_common(rs, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(e.what());
  }

  try {
    if (*gen) return generate_data(out, n_per_class, size, common);
    if (*tr) return train_cmd(data, out, resume, max_epochs, common);
    if (*ev) return evaluate_cmd(checkpoint, data, splits, out, common);
    if (*ex) return explain_cmd(checkpoint, image, mode, samples, target, layer, out, common);
    if (*rs) return residuals_cmd(checkpoint, data, splits, out, common);
  } catch (const ConfigError& e) {
    return fail(e.what(), e.key());
  } catch (const std::exception& e) {
    return fail(e.what());
  }
  return 1;
}
