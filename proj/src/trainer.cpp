#include "camforge/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <algorithm>
#include <stdexcept>

#include "camforge/metrics.hpp"

namespace camforge {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(lr >= 0.0)) fail("lr must be nonnegative");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0,1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must be in (0,1)");
  if (plateau_patience < 1 || early_stop_patience < 1) fail("patiences must be >= 1");
  if (!(improvement_tol >= 0.0)) fail("improvement_tol must be nonnegative");
}

void adamw_step(const Model::NamedTensors& params, AdamWState& state, double lr, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::logic_error("adamw: optimizer state does not match parameters");
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (std::isnan(g)) throw std::runtime_error("adamw: NaN gradient in parameter " + name);
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto theta = p.mutable_data();
    const bool has = p.has_grad();
    std::span<const double> grad = has ? p.grad() : std::span<const double>{};
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] = theta[j] - lr * m_hat / (std::sqrt(v_hat) + cfg.eps) - lr * cfg.weight_decay * theta[j];
    }
  }
}

double plateau_step(PlateauState& state, double val_loss, double lr, const TrainConfig& cfg) {
  if (val_loss < state.best - cfg.improvement_tol) {
    state.best = val_loss;
    state.bad_epochs = 0;
    return lr;
  }
  if (++state.bad_epochs >= cfg.plateau_patience) {
    state.bad_epochs = 0;
    return lr * cfg.plateau_factor;
  }
  return lr;
}

bool early_stop_step(EarlyStopState& state, double val_loss, int epoch, const TrainConfig& cfg) {
  if (val_loss < state.best - cfg.improvement_tol) {
    state.best = val_loss;
    state.bad_epochs = 0;
    state.best_epoch = epoch;
    return false;
  }
  return ++state.bad_epochs >= cfg.early_stop_patience;
}

Predictions predict(Model& model, const std::vector<Sample>& samples, std::size_t batch_size, double pos_weight) {
  if (samples.empty()) throw std::invalid_argument("predict: no samples");
  NoGradGuard no_grad;
  const Mode previous = model.mode();
  model.set_mode(Mode::eval);
  Predictions p;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const Sample*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i]);
    const Tensor targets = make_targets(ptrs);
    const auto out = model.forward(make_batch(ptrs, model.spec().in_channels));
    loss_sum += bce_with_logits(out.logits, targets, pos_weight).item() * static_cast<double>(ptrs.size());
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      p.logits.push_back(out.logits.data()[i]);
      p.probs.push_back(sigmoid(out.logits.data()[i]));
      p.labels.push_back(static_cast<int>(ptrs[i]->label));
    }
  }
  p.loss = loss_sum / static_cast<double>(samples.size());
  model.set_mode(previous);
  return p;
}

namespace {

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
double from_nullable(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

nlohmann::json epoch_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"lr", r.lr},
          {"val_accuracy", r.val_accuracy},
          {"val_auc", r.val_auc ? nlohmann::json(*r.val_auc) : nlohmann::json()}};
}

EpochRecord epoch_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_loss = j.at("val_loss").get<double>();
  r.lr = j.at("lr").get<double>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  if (!j.at("val_auc").is_null()) r.val_auc = j.at("val_auc").get<double>();
  return r;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

Checkpoint checkpoint_with_state(const Model& model, const TrainState& state, std::uint64_t seed) {
  Checkpoint c = snapshot(model, seed, state.epoch);
  const auto params = model.parameters();
  for (std::size_t i = 0; i < state.optimizer.m.size(); ++i) {
    c.tensors.emplace_back("optim.m." + params[i].first, Tensor(params[i].second.shape(), state.optimizer.m[i]));
    c.tensors.emplace_back("optim.v." + params[i].first, Tensor(params[i].second.shape(), state.optimizer.v[i]));
  }
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : state.history) history.push_back(epoch_to_json(r));
  c.extra["train_state"] = {{"lr", state.lr},
                            {"step", state.optimizer.step},
                            {"plateau", {{"best", finite_or_null(state.plateau.best)}, {"bad_epochs", state.plateau.bad_epochs}}},
                            {"early_stop",
                             {{"best", finite_or_null(state.early.best)},
                              {"bad_epochs", state.early.bad_epochs},
                              {"best_epoch", state.early.best_epoch}}},
                            {"epoch", state.epoch},
                            {"stopped", state.stopped},
                            {"history", history}};
  return c;
}

TrainState train_state_from(const Checkpoint& ckpt, const Model& model) {
  if (!ckpt.extra.contains("train_state")) throw std::invalid_argument("checkpoint carries no trainer state");
  const auto& j = ckpt.extra.at("train_state");
  TrainState s;
  s.lr = j.at("lr").get<double>();
  s.optimizer.step = j.at("step").get<std::uint64_t>();
  s.plateau.best = from_nullable(j.at("plateau").at("best"));
  s.plateau.bad_epochs = j.at("plateau").at("bad_epochs").get<std::size_t>();
  s.early.best = from_nullable(j.at("early_stop").at("best"));
  s.early.bad_epochs = j.at("early_stop").at("bad_epochs").get<std::size_t>();
  s.early.best_epoch = j.at("early_stop").at("best_epoch").get<int>();
  s.epoch = j.at("epoch").get<int>();
  s.stopped = j.at("stopped").get<bool>();
  for (const auto& r : j.at("history")) s.history.push_back(epoch_from_json(r));
  if (s.optimizer.step > 0) {
    for (const auto& [name, p] : model.parameters()) {
      const Tensor* m = ckpt.find("optim.m." + name);
      const Tensor* v = ckpt.find("optim.v." + name);
      if (!m || !v) throw std::invalid_argument("checkpoint lacks optimizer moments for " + name);
      s.optimizer.m.emplace_back(m->data().begin(), m->data().end());
      s.optimizer.v.emplace_back(v->data().begin(), v->data().end());
    }
  }
  return s;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "epoch,train_loss,val_loss,lr,val_accuracy,val_auc\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ',' << fmt(r.lr) << ','
        << fmt(r.val_accuracy) << ',' << (r.val_auc ? fmt(*r.val_auc) : "") << '\n';
  }
}

TrainResult train(Model& model, const DatasetSplit& split, const TrainConfig& cfg, const AugmentConfig& augment_cfg,
                  const TrainOptions& options) {
  cfg.validate();
  augment_cfg.validate();
  if (split.train.empty() || split.val.empty()) throw std::invalid_argument("train: empty train or validation split");
  const auto started = std::chrono::steady_clock::now();

  DatasetSplit data = split;
  if (cfg.balance_minority) {
    Rng balance_rng = derive_rng(cfg.seed, {hash_string("balance")});
    data = balance_minority(split, augment_cfg, balance_rng);
  }
  const ClassCounts original = count_originals(data.train);
  const std::vector<double> weights = sampling_weights(data.train, original);

  TrainResult result;
  result.pos_weight = pos_class_weight(original);
  const auto params = model.parameters();

  TrainState st;
  st.lr = cfg.lr;
  result.best = snapshot(model, cfg.seed, 0);
  if (options.resume) {
    restore(model, *options.resume);
    st = train_state_from(*options.resume, model);
    if (options.resume_best) result.best = *options.resume_best;
  }
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  const std::size_t n = data.train.size();
  for (int epoch = st.epoch + 1; epoch <= static_cast<int>(cfg.max_epochs) && !st.stopped; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    model.set_mode(Mode::train);
    model.set_mc_active(false);
    Rng sampler = derive_rng(cfg.seed, {hash_string("sampler"), e});
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::vector<std::size_t> draws(n);
    for (auto& d : draws) d = pick(sampler);

    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0, b = 0; start < n; start += cfg.batch_size, ++b) {
        const std::size_t end = std::min(n, start + cfg.batch_size);
        std::vector<Sample> batch;
        batch.reserve(end - start);
        for (std::size_t j = start; j < end; ++j) {
          const Sample& s = data.train[draws[j]];
          if (cfg.augment) {
            Rng aug = derive_rng(cfg.seed, {hash_string("augment"), e, j, hash_string(s.source_id)});
            batch.push_back(augment(s, augment_cfg, aug));
          } else {
            batch.push_back(s);
          }
        }
        std::vector<const Sample*> ptrs;
        for (const auto& s : batch) ptrs.push_back(&s);
        Rng drop = derive_rng(cfg.seed, {hash_string("dropout"), e, b});
        model.zero_grad();
        const auto out = model.forward(make_batch(ptrs, model.spec().in_channels), "", &drop);
        Tensor loss = bce_with_logits(out.logits, make_targets(ptrs), result.pos_weight);
        loss.backward();
        adamw_step(params, st.optimizer, st.lr, cfg);
        loss_sum += loss.item() * static_cast<double>(ptrs.size());
      }
    } catch (const std::runtime_error& err) {
      result.diverged = true;
      result.divergence = "epoch " + std::to_string(epoch) + ": " + err.what();
    }
    Predictions val;
    if (!result.diverged) {
      val = predict(model, data.val, cfg.batch_size, result.pos_weight);
      if (!std::isfinite(val.loss) || !std::isfinite(loss_sum)) {
        result.diverged = true;
        result.divergence = "epoch " + std::to_string(epoch) + ": non-finite loss";
      }
    }
    if (result.diverged) {
      restore(model, result.best);
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_loss = val.loss;
    rec.lr = st.lr;
    const auto report = metrics_report(val.probs, val.labels);
    rec.val_accuracy = report.accuracy.value_or(0.0);
    rec.val_auc = report.roc_auc;

    const bool improved = val.loss < st.early.best - cfg.improvement_tol;
    st.lr = plateau_step(st.plateau, val.loss, st.lr, cfg);
    st.stopped = early_stop_step(st.early, val.loss, epoch, cfg);
    st.epoch = epoch;
    st.history.push_back(rec);
    model.set_mode(Mode::eval);
    if (improved) {
      result.best = snapshot(model, cfg.seed, epoch);
      if (options.out_dir) save_checkpoint(*options.out_dir / "best.camf", result.best);
    }
    if (options.out_dir) {
      save_checkpoint(*options.out_dir / "last.camf", checkpoint_with_state(model, st, cfg.seed));
      write_history_csv(*options.out_dir / "history.csv", st.history);
    }
    if (options.on_epoch) options.on_epoch(rec);
  }

  model.set_mode(Mode::eval);
  result.history = st.history;
  result.best_epoch = st.early.best_epoch;
  result.early_stopped = st.stopped;
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace camforge
