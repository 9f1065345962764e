#include <gtest/gtest.h>

#include <cstdlib>

#include "camforge/config.hpp"
#include "camforge/json_util.hpp"

using namespace camforge;
using nlohmann::json;

namespace {

std::string error_key(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

}  // namespace

TEST(RunConfig, DefaultsRoundTrip) {
  const RunConfig def;
  const json j = to_json(def);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(def.train.lr, 1e-4);
  EXPECT_EQ(def.train.batch_size, 64u);
  EXPECT_EQ(def.train.max_epochs, 30u);
  EXPECT_EQ(def.train.plateau_factor, 0.5);
  EXPECT_EQ(def.train.plateau_patience, 3u);
  EXPECT_EQ(def.train.early_stop_patience, 5u);
  EXPECT_EQ(def.explain.num_samples, 20u);
}

TEST(RunConfig, PartialFileKeepsDefaults) {
  const RunConfig c = run_config_from_json(json{{"train", {{"lr", 0.01}}}, {"seed", 9}});
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.train.batch_size, 64u);
  EXPECT_TRUE(c.seed_explicit);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_FALSE(run_config_from_json(json::object()).seed_explicit);
}

TEST(RunConfig, UnknownKeysNamed) {
  EXPECT_EQ(error_key(json{{"train", {{"lrr", 0.01}}}}), "train.lrr");
  EXPECT_EQ(error_key(json{{"bogus", 1}}), "bogus");
  EXPECT_EQ(error_key(json{{"model", {{"stages", json::array({{{"channels", 4}, {"depth", 1}}})}}}}),
            "model.stages[0].depth");
}

TEST(RunConfig, TypeErrorsNamed) {
  EXPECT_EQ(error_key(json{{"train", {{"batch_size", "big"}}}}), "train.batch_size");
  EXPECT_EQ(error_key(json{{"seed", -3}}), "seed");
  EXPECT_THROW(run_config_from_json(json::array()), ConfigError);
}

TEST(RunConfig, InvalidValuesRejected) {
  EXPECT_THROW(run_config_from_json(json{{"train", {{"batch_size", 0}}}}), ConfigError);
  EXPECT_EQ(error_key(json{{"explain", {{"num_samples", 1}}}}), "explain.num_samples");
  EXPECT_EQ(error_key(json{{"eval", {{"threshold", 1.5}}}}), "eval.threshold");
}

TEST(RunConfig, SeedPropagates) {
  RunConfig c;
  c.seed = 17;
  c.propagate_seed();
  EXPECT_EQ(c.train.seed, 17u);
}

TEST(Seed, Precedence) {
  ::unsetenv("CAMFORGE_SEED");
  EXPECT_EQ(resolve_seed(std::nullopt, std::nullopt), 0u);
  ::setenv("CAMFORGE_SEED", "41", 1);
  EXPECT_EQ(resolve_seed(std::nullopt, std::nullopt), 41u);
  EXPECT_EQ(resolve_seed(std::nullopt, 5), 5u);
  EXPECT_EQ(resolve_seed(7, 5), 7u);
  ::setenv("CAMFORGE_SEED", "x1", 1);
  EXPECT_THROW(resolve_seed(std::nullopt, std::nullopt), std::exception);
  ::unsetenv("CAMFORGE_SEED");
}
