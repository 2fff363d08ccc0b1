#include <doctest.h>

#include <fstream>

#include "growkit/config.hpp"

using namespace growkit;

TEST_CASE("config parsing: tables, types, arrays, comments") {
  RunConfig cfg = RunConfig::parse_string(R"(
# run header
[run]
seed = 42
out_dir = "runs/a"   # trailing comment

[model]
layers = 4
rope_base = 10000.0

[growth]
insertion_positions = [2, 4]
staggered_unmask = true

[data]
rules = ["min_length", "exact_dedup"]
)");
  CHECK(cfg.require_int("run.seed") == 42);
  CHECK(cfg.get_string("run.out_dir", "") == "runs/a");
  CHECK(cfg.get_float("model.rope_base", 0) == 10000.0);
  CHECK(cfg.get_int_array("growth.insertion_positions") == std::vector<int>{2, 4});
  CHECK(cfg.get_bool("growth.staggered_unmask", false));
  CHECK(cfg.get_string_array("data.rules") ==
        std::vector<std::string>{"min_length", "exact_dedup"});
  CHECK(cfg.get_int("model.max_seq", 123) == 123);  // fallback
}

TEST_CASE("config parsing errors") {
  CHECK_THROWS_AS(RunConfig::parse_string("[run\nseed = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_string("just nonsense\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_string("[run]\nseed = 1\nseed = 2\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_string("[run]\nseed = \"un\nterminated\n"), ConfigError);
  RunConfig cfg = RunConfig::parse_string("[run]\nseed = 1\n");
  CHECK_THROWS_AS(cfg.require_string("run.seed"), ConfigError);  // type mismatch
  CHECK_THROWS_AS(cfg.require_int("run.missing"), ConfigError);
}

TEST_CASE("config overrides via dotted paths") {
  RunConfig cfg = RunConfig::parse_string("[run]\nseed = 1\n[train]\nsteps = 5\n");
  cfg.apply_override("train.steps=50");
  CHECK(cfg.require_int("train.steps") == 50);
  cfg.apply_override("train.optimizer=sgd");  // bare word becomes a string
  CHECK(cfg.get_string("train.optimizer", "") == "sgd");
  cfg.apply_override("train.learning_rate=0.5");
  CHECK(cfg.get_float("train.learning_rate", 0) == 0.5);
  CHECK_THROWS_AS(cfg.apply_override("nonsense"), ConfigError);
}

TEST_CASE("config validation rejects unknown keys and missing paths") {
  RunConfig cfg = RunConfig::parse_string("[run]\nseed = 1\n[data]\ninput = \"/tmp/nope_x\"\n");
  RunConfig bad = RunConfig::parse_string("[run]\nsede = 1\n");
  try {
    bad.validate("filter");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("run.sede") != std::string::npos);
  }
  try {
    cfg.validate("filter");
    FAIL("expected ConfigError for missing path");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("/tmp/nope_x") != std::string::npos);
  }
}

TEST_CASE("config hash is stable and order-insensitive") {
  RunConfig a = RunConfig::parse_string("[run]\nseed = 1\n[train]\nsteps = 5\n");
  RunConfig b = RunConfig::parse_string("[train]\nsteps = 5\n[run]\nseed = 1\n");
  CHECK(a.hash() == b.hash());
  b.apply_override("train.steps=6");
  CHECK(a.hash() != b.hash());
  CHECK(a.hash().size() == 64);
}

TEST_CASE("typed views assemble library configs") {
  RunConfig cfg = RunConfig::parse_string(R"(
[run]
seed = 7
[model]
layers = 2
model_dim = 16
ffn_dim = 32
attn_heads = 4
kv_heads = 2
vocab_size = 259
[growth]
depth_strategy = "llamapro"
new_layers = 1
width_model_dim = 24
width_ffn_dim = 48
width_attn_heads = 6
[train]
optimizer = "sgd"
grad_clip = 0.0
[kto]
beta = 0.25
)");
  ModelConfig m = model_config_from(cfg);
  CHECK(m.head_dim == 4);
  CHECK(m.vocab_size == 259);

  GrowthPlan p = growth_plan_from(cfg);
  CHECK(p.depth_strategy == DepthStrategy::llamapro);
  REQUIRE(p.width_targets.has_value());
  CHECK(p.width_targets->attn_heads == 6);
  CHECK(p.seed == 7);

  TrainConfig t = train_config_from(cfg, 7);
  CHECK(t.optimizer.kind == OptimizerConfig::Kind::sgd);
  CHECK(!t.grad_clip.has_value());  // 0 disables clipping

  KtoConfig k = kto_config_from(cfg);
  CHECK(k.beta == doctest::Approx(0.25f));
  CHECK(k.lambda_desired == doctest::Approx(1.375f));
}
