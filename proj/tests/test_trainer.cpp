#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "camforge/metrics.hpp"
#include "camforge/trainer.hpp"

using namespace camforge;
namespace fs = std::filesystem;

namespace {

Model::NamedTensors single_param(std::vector<double> theta) {
  const std::size_t n = theta.size();
  return {{"theta", Tensor({n}, std::move(theta)).set_requires_grad()}};
}

void set_grad(Tensor& t, double g) {
  t.zero_grad();
  sum(scale(t, g)).backward();
}

ModelSpec small_spec() {
  ModelSpec s;
  s.height = s.width = 32;
  s.stem_channels = 4;
  s.stages = {{1, 4, 1}, {1, 8, 2}, {1, 8, 2}};
  return s;
}

DatasetSplit small_phantoms(std::size_t n, std::uint64_t seed, double intensity = 0.35) {
  PhantomSpec p;
  p.n_per_class = n;
  p.image_size = 32;
  p.lesion_intensity = intensity;
  p.val_fraction = 0.2;
  p.test_fraction = 0.2;
  return generate_phantoms(p, seed);
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 16;
  cfg.max_epochs = epochs;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(AdamW, ZeroGradientNoDecayLeavesParameters) {
  auto p = single_param({0.3, -2.0});
  set_grad(p[0].second, 0.0);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamWState st;
  adamw_step(p, st, 0.01, cfg);
  EXPECT_EQ(p[0].second.data()[0], 0.3);
  EXPECT_EQ(p[0].second.data()[1], -2.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  auto p = single_param({1.0, 5.0, -3.0});
  set_grad(p[0].second, 1.0);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamWState st;
  const double lr = 1e-3;
  adamw_step(p, st, lr, cfg);
  const double start[] = {1.0, 5.0, -3.0};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(std::abs(p[0].second.data()[i] - start[i] + lr), 1e-6 * lr);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, DecoupledDecayOnly) {
  auto p = single_param({1.0});
  set_grad(p[0].second, 0.0);
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  AdamWState st;
  adamw_step(p, st, 0.01, cfg);
  EXPECT_DOUBLE_EQ(p[0].second.data()[0], 0.999);
}

TEST(AdamW, DecayCompoundsGeometrically) {
  auto p = single_param({2.0});
  TrainConfig cfg;
  cfg.weight_decay = 0.05;
  AdamWState st;
  for (int k = 1; k <= 50; ++k) {
    set_grad(p[0].second, 0.0);
    adamw_step(p, st, 0.1, cfg);
    EXPECT_NEAR(p[0].second.data()[0], 2.0 * std::pow(1.0 - 0.1 * 0.05, k), 1e-12);
  }
}

// Independent scalar Adam reference over a gradient sequence.
TEST(AdamW, MatchesScalarReference) {
  auto p = single_param({0.7});
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  AdamWState st;
  double theta = 0.7, m = 0.0, v = 0.0;
  const double grads[] = {0.5, -1.2, 3.0, 0.0, -0.25, 1e-3};
  int t = 0;
  for (double g : grads) {
    set_grad(p[0].second, g);
    adamw_step(p, st, 0.02, cfg);
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    theta = theta - 0.02 * mh / (std::sqrt(vh) + 1e-8) - 0.02 * 0.01 * theta;
    EXPECT_NEAR(p[0].second.data()[0], theta, 1e-14);
  }
}

TEST(AdamW, NanGradientNamesParameter) {
  Model::NamedTensors p{{"good", Tensor({1}, 1.0).set_requires_grad()},
                        {"stage2.block1.conv1.weight", Tensor({2}, 1.0).set_requires_grad()}};
  set_grad(p[0].second, 1.0);
  p[1].second.zero_grad();
  sum(scale(p[1].second, std::numeric_limits<double>::quiet_NaN())).backward();
  AdamWState st;
  try {
    adamw_step(p, st, 0.1, TrainConfig{});
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("stage2.block1.conv1.weight"), std::string::npos);
  }
  EXPECT_EQ(p[0].second.data()[0], 1.0);  // nothing applied
}

TEST(Plateau, ImprovingLossesKeepRate) {
  TrainConfig cfg;
  PlateauState st;
  double lr = 1.0;
  for (double loss : {1.0, 0.9, 0.8}) lr = plateau_step(st, loss, lr, cfg);
  EXPECT_EQ(lr, 1.0);
}

TEST(Plateau, HalvesAfterThreeStagnantEpochs) {
  TrainConfig cfg;
  PlateauState st;
  std::vector<double> lrs;
  double lr = 1.0;
  for (int e = 0; e < 7; ++e) {
    lr = plateau_step(st, 1.0, lr, cfg);
    lrs.push_back(lr);
  }
  // After epoch 4 (three stagnant epochs) and again after epoch 7.
  EXPECT_EQ(lrs, (std::vector<double>{1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25}));
}

TEST(Plateau, ToleranceDefinesImprovement) {
  TrainConfig cfg;
  PlateauState st;
  double lr = 1.0;
  lr = plateau_step(st, 1.0, lr, cfg);
  for (int e = 0; e < 3; ++e) lr = plateau_step(st, 1.0 - 5e-9, lr, cfg);
  EXPECT_EQ(lr, 0.5);
}

TEST(EarlyStop, MonotoneLossesNeverStop) {
  TrainConfig cfg;
  EarlyStopState st;
  for (int e = 1; e <= 30; ++e) EXPECT_FALSE(early_stop_step(st, 1.0 / e, e, cfg));
  EXPECT_EQ(st.best_epoch, 30);
}

TEST(EarlyStop, StopsAfterFiveStagnantEpochs) {
  TrainConfig cfg;
  EarlyStopState st;
  std::vector<bool> stops;
  for (int e = 1; e <= 6; ++e) stops.push_back(early_stop_step(st, 1.0, e, cfg));
  EXPECT_EQ(stops, (std::vector<bool>{false, false, false, false, false, true}));
  EXPECT_EQ(st.best_epoch, 1);
}

TEST(EarlyStop, ImprovementResetsCounter) {
  TrainConfig cfg;
  EarlyStopState st;
  // Four stagnant epochs, an improvement, then five stagnant epochs.
  const double losses[] = {1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  int e = 0;
  for (double l : losses) {
    ++e;
    const bool stop = early_stop_step(st, l, e, cfg);
    EXPECT_EQ(stop, e == 11) << e;
  }
}

TEST(Schedules, CountersAreIndependent) {
  TrainConfig cfg;
  PlateauState plateau;
  EarlyStopState early;
  double lr = 1.0;
  for (int e = 1; e <= 6; ++e) {
    lr = plateau_step(plateau, 1.0, lr, cfg);
    const bool stop = early_stop_step(early, 1.0, e, cfg);
    if (e == 4) {
      EXPECT_EQ(lr, 0.5);
      EXPECT_EQ(plateau.bad_epochs, 0u);
      EXPECT_EQ(early.bad_epochs, 3u);
    }
    EXPECT_EQ(stop, e == 6) << e;
  }
  EXPECT_EQ(plateau.bad_epochs, 2u);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.plateau_factor = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.early_stop_patience = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Train, EmptySplitsAreRejected) {
  Rng rng(1);
  Model m = Model::build(small_spec(), rng);
  DatasetSplit s = small_phantoms(5, 1);
  s.val.clear();
  EXPECT_THROW(train(m, s, quick_config(1), AugmentConfig{}), std::invalid_argument);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  Rng rng(2);
  Model m = Model::build(small_spec(), rng);
  const Checkpoint before = snapshot(m, 0, 0);
  TrainConfig cfg = quick_config(3);
  cfg.lr = 0.0;
  const DatasetSplit s = small_phantoms(12, 2);
  const TrainResult r = train(m, s, cfg, AugmentConfig{});
  ASSERT_EQ(r.history.size(), 3u);
  const auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto a = before.tensors[i].second.data(), b = params[i].second.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << params[i].first;
  }
  // Only batch-norm running statistics still move; validation loss stays close.
  for (const auto& e : r.history) EXPECT_NEAR(e.val_loss, r.history[0].val_loss, 0.05);
  for (const auto& e : r.history) EXPECT_EQ(e.lr, 0.0);
}

TEST(Train, LearnsSmallPhantomTask) {
  Rng rng(3);
  Model m = Model::build(small_spec(), rng);
  const DatasetSplit s = small_phantoms(60, 3, 0.6);
  const TrainResult r = train(m, s, quick_config(6), AugmentConfig{});
  EXPECT_FALSE(r.diverged);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  const Predictions p = predict(m, s.test);
  EXPECT_GT(*metrics_report(p.probs, p.labels).roc_auc, 0.8);
}

TEST(Train, MemorizesSixteenSamples) {
  PhantomSpec p;
  p.n_per_class = 8;
  p.image_size = 32;
  p.val_fraction = 0.0;
  p.test_fraction = 0.0;
  DatasetSplit s = generate_phantoms(p, 6);
  s.val = s.train;
  ModelSpec spec = small_spec();
  spec.dropout_rate = 0.0;
  Rng rng(6);
  Model m = Model::build(spec, rng);
  TrainConfig cfg = quick_config(200);
  cfg.lr = 1e-2;
  cfg.augment = false;
  cfg.balance_minority = false;
  cfg.early_stop_patience = 200;
  cfg.plateau_patience = 200;
  const TrainResult r = train(m, s, cfg, AugmentConfig{});
  double lowest = r.history.front().train_loss;
  for (const auto& rec : r.history) lowest = std::min(lowest, rec.train_loss);
  EXPECT_EQ(r.history.size(), 200u);
  EXPECT_LT(lowest, 0.01);
}

TEST(Train, SeededRunsAreReproducible) {
  const DatasetSplit s = small_phantoms(10, 4);
  std::vector<EpochRecord> h[2];
  for (int i = 0; i < 2; ++i) {
    Rng rng(4);
    Model m = Model::build(small_spec(), rng);
    h[i] = train(m, s, quick_config(2), AugmentConfig{}).history;
  }
  EXPECT_EQ(h[0], h[1]);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const DatasetSplit s = small_phantoms(10, 5);
  const fs::path dir = fs::temp_directory_path() / "camforge_resume";
  fs::remove_all(dir);

  Rng r1(6);
  Model full = Model::build(small_spec(), r1);
  const TrainResult uninterrupted = train(full, s, quick_config(4), AugmentConfig{});

  Rng r2(6);
  Model part = Model::build(small_spec(), r2);
  TrainOptions first;
  first.out_dir = dir;
  train(part, s, quick_config(2), AugmentConfig{}, first);
  ASSERT_TRUE(fs::exists(dir / "last.camf"));
  ASSERT_TRUE(fs::exists(dir / "history.csv"));

  Rng r3(99);  // the initial weights must come from the checkpoint
  Model resumed = Model::build(small_spec(), r3);
  TrainOptions second;
  second.resume = load_checkpoint(dir / "last.camf");
  if (fs::exists(dir / "best.camf")) second.resume_best = load_checkpoint(dir / "best.camf");
  const TrainResult continued = train(resumed, s, quick_config(4), AugmentConfig{}, second);
  EXPECT_EQ(continued.history, uninterrupted.history);
  EXPECT_EQ(continued.best_epoch, uninterrupted.best_epoch);
  const auto a = full.parameters(), b = resumed.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
  fs::remove_all(dir);
}

TEST(Train, DivergenceRollsBackToBest) {
  Rng rng(7);
  Model m = Model::build(small_spec(), rng);
  const DatasetSplit s = small_phantoms(10, 7);
  TrainConfig cfg = quick_config(3);
  cfg.lr = 1e300;  // the first update overflows the weights
  const Checkpoint initial = snapshot(m, 0, 0);
  const TrainResult r = train(m, s, cfg, AugmentConfig{});
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.divergence.empty());
  for (const auto& [name, t] : m.parameters()) {
    for (double v : t.data()) ASSERT_TRUE(std::isfinite(v)) << name;
  }
  (void)initial;
}

TEST(Train, NullSignalGivesChanceAuc) {
  Rng rng(8);
  Model m = Model::build(small_spec(), rng);
  PhantomSpec p;
  p.n_per_class = 500;
  p.image_size = 32;
  p.lesion_intensity = 0.0;
  p.val_fraction = 0.1;
  p.test_fraction = 0.5;
  const DatasetSplit s = generate_phantoms(p, 8);
  train(m, s, quick_config(1), AugmentConfig{});
  const Predictions pr = predict(m, s.test);
  EXPECT_NEAR(*metrics_report(pr.probs, pr.labels).roc_auc, 0.5, 0.05);
}

TEST(Predict, LossMatchesBatchedBce) {
  Rng rng(9);
  Model m = Model::build(small_spec(), rng);
  const DatasetSplit s = small_phantoms(8, 9);
  const Predictions a = predict(m, s.train, 3, 1.5), b = predict(m, s.train, 64, 1.5);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  for (std::size_t i = 0; i < a.probs.size(); ++i) EXPECT_NEAR(a.probs[i], b.probs[i], 1e-12);
}
