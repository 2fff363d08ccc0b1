#include <doctest.h>

#include <cmath>
#include <vector>

#include "growkit/growth.hpp"
#include "toy_models.hpp"

using namespace growkit;
using testutil::toy_config;

namespace {

bool same_data(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

bool same_layer(const LayerWeights& a, const LayerWeights& b) {
  return same_data(a.attn_norm_gain, b.attn_norm_gain) && same_data(a.q_proj, b.q_proj) &&
         same_data(a.k_proj, b.k_proj) && same_data(a.v_proj, b.v_proj) &&
         same_data(a.o_proj, b.o_proj) && same_data(a.ffn_norm_gain, b.ffn_norm_gain) &&
         same_data(a.gate_proj, b.gate_proj) && same_data(a.up_proj, b.up_proj) &&
         same_data(a.down_proj, b.down_proj);
}

int64_t actual_param_count(const TransformerWeights& w) {
  int64_t n = 0;
  for (const auto& [name, t] : named_parameters(w)) n += t->size();
  return n;
}

// Leading [rows x cols] block of a widened matrix equals the original.
bool leading_block_equal(const Tensor& orig, const Tensor& grown) {
  const int rows = orig.dim(0);
  const int cols = orig.ndim() == 2 ? orig.dim(1) : 1;
  const int gcols = grown.ndim() == 2 ? grown.dim(1) : 1;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (orig.data()[static_cast<size_t>(r) * cols + c] !=
          grown.data()[static_cast<size_t>(r) * gcols + c])
        return false;
  return true;
}

}  // namespace

TEST_CASE("default insertion positions interleave uniformly") {
  auto pos = default_insertion_positions(80, 16);
  REQUIRE(pos.size() == 16);
  CHECK(pos.front() == 5);
  CHECK(pos.back() == 80);
  for (size_t i = 1; i < pos.size(); ++i) CHECK(pos[i] - pos[i - 1] == 5);
  CHECK_THROWS_AS(default_insertion_positions(4, 5), PlanError);
}

TEST_CASE("llamapro: 80+16 interleaved reaches 96 layers and preserves function") {
  // Flagship layer arithmetic on a skinny model.
  const ModelConfig cfg80 = toy_config(80, 8, 2, 1, 16, 32);
  TransformerWeights w80 = init_model(cfg80, 2);
  GrownModel g = expand_depth_llamapro(w80, cfg80, 16);
  CHECK(g.config.layers == 96);

  const float div = verify_function_preservation(w80, cfg80, g.weights, g.config, nullptr,
                                                 /*n_probes=*/10, /*seq_len=*/16, /*seed=*/5);
  CHECK(div <= 1e-5f);

  // Original layers carried over bit-identically at their mapped positions.
  size_t gi = 0;
  for (int i = 0; i < 80; ++i) {
    if (i % 5 == 0 && i > 0) ++gi;  // inserted block after every 5th original
    CHECK(same_layer(w80.layers[static_cast<size_t>(i)], g.weights.layers[gi]));
    ++gi;
  }
}

TEST_CASE("llamapro: +1 at the end adds exactly one block of parameters") {
  const ModelConfig cfg = toy_config(4, 8, 2, 1, 16, 32);
  TransformerWeights w = init_model(cfg, 3);
  GrownModel g = expand_depth_llamapro(w, cfg, 1, {4});
  CHECK(g.config.layers == 5);
  CHECK(count_params(g.config) - count_params(cfg) ==
        (count_params(cfg) - 2 * int64_t(cfg.vocab_size) * cfg.model_dim - cfg.model_dim) / 4);
  CHECK(actual_param_count(g.weights) == count_params(g.config));

  // Inserted block copies its preceding block except the zeroed projections.
  const LayerWeights& ins = g.weights.layers[4];
  CHECK(same_data(ins.q_proj, w.layers[3].q_proj));
  for (float v : ins.o_proj.data()) CHECK(v == 0.0f);
  for (float v : ins.down_proj.data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(expand_depth_llamapro(w, cfg, 1, {5}), PlanError);
  CHECK_THROWS_AS(expand_depth_llamapro(w, cfg, 2, {3, 3}), PlanError);

  // position 0 (before the first block) still yields an identity block
  GrownModel front = expand_depth_llamapro(w, cfg, 1, {0});
  CHECK(front.config.layers == 5);
  CHECK(verify_function_preservation(w, cfg, front.weights, front.config, nullptr, 4, 12, 2) <=
        1e-5f);
}

TEST_CASE("msg width expansion: masks at zero preserve the base function") {
  const ModelConfig cfg = toy_config(3, 16, 2, 1, 32, 40);
  TransformerWeights w = testutil::conditioned_model(cfg, 9);
  WidthTargets t{24, 48, 3};
  MsgResult r = expand_width_msg(w, cfg, t, /*mask_steps=*/100, /*seed=*/77);
  CHECK(r.config.model_dim == 24);
  CHECK(r.config.ffn_dim == 48);
  CHECK(r.config.attn_heads == 3);
  CHECK(r.config.head_dim == cfg.head_dim);
  CHECK(r.config.kv_heads == cfg.kv_heads);

  MaskState zero = mask_state_at(r.schedule, r.config, 0);
  const float div = verify_function_preservation(w, cfg, r.weights, r.config, &zero, 10, 24, 3);
  CHECK(div <= 1e-4f);

  // Original values occupy the leading slice of every tensor.
  CHECK(leading_block_equal(w.token_embedding, r.weights.token_embedding));
  for (size_t i = 0; i < w.layers.size(); ++i) {
    CHECK(leading_block_equal(w.layers[i].q_proj, r.weights.layers[i].q_proj));
    CHECK(leading_block_equal(w.layers[i].down_proj, r.weights.layers[i].down_proj));
    CHECK(leading_block_equal(w.layers[i].attn_norm_gain, r.weights.layers[i].attn_norm_gain));
  }
  CHECK(leading_block_equal(w.output_head, r.weights.output_head));

  // Parameter delta matches the analytic size of the added slices.
  CHECK(actual_param_count(r.weights) - actual_param_count(w) ==
        count_params(r.config) - count_params(cfg));

  CHECK_THROWS_AS(expand_width_msg(w, cfg, WidthTargets{8, 48, 1}, 100, 0), PlanError);
  // head_dim change request: model_dim not equal to heads x head_dim
  CHECK_THROWS_AS(expand_width_msg(w, cfg, WidthTargets{26, 48, 3}, 100, 0), PlanError);
}

TEST_CASE("msg: new attention head is fully neutralized at mask zero") {
  // d 16->24 with heads 2->3: the third head's contribution is multiplied
  // by mask 0, so logits equal the base model's on every position.
  const ModelConfig cfg = toy_config(1, 16, 2, 1, 32, 40);
  TransformerWeights w = testutil::conditioned_model(cfg, 21);
  MsgResult r = expand_width_msg(w, cfg, WidthTargets{24, 48, 3}, 10, 5);
  MaskState zero = mask_state_at(r.schedule, r.config, 0);

  std::vector<int> ids{7, 3, 1, 0, 12, 9};
  NoGradGuard ng;
  ForwardOutput base = forward(w, cfg, ids);
  ForwardOptions opts;
  opts.masks = &zero;
  ForwardOutput grown = forward(r.weights, r.config, ids, opts);
  float worst = 0.0f;
  for (size_t i = 0; i < base.logits.data().size(); ++i)
    worst = std::max(worst, std::fabs(base.logits.data()[i] - grown.logits.data()[i]));
  CHECK(worst <= 1e-6f);
}

TEST_CASE("mask schedule: endpoints, midpoint, monotonicity, originals stay 1") {
  const ModelConfig cfg = toy_config(2, 16, 2, 1, 32, 40);
  TransformerWeights w = init_model(cfg, 1);
  MsgResult r = expand_width_msg(w, cfg, WidthTargets{24, 48, 3}, 100, 0);

  CHECK(mask_value(r.schedule, 0) == 0.0f);
  CHECK(mask_value(r.schedule, 100) == 1.0f);
  CHECK(mask_value(r.schedule, 50) == 0.5f);
  CHECK_THROWS_AS(mask_value(r.schedule, -1), ContractError);
  CHECK_THROWS_AS(mask_value(r.schedule, 101), ContractError);

  float prev = -1.0f;
  for (int s = 0; s <= 100; s += 5) {
    MaskState st = mask_state_at(r.schedule, r.config, s);
    // originals pinned at exactly 1
    for (int i = 0; i < cfg.model_dim; ++i) CHECK(st.channel[static_cast<size_t>(i)] == 1.0f);
    for (int i = 0; i < cfg.attn_heads; ++i) CHECK(st.head[0][static_cast<size_t>(i)] == 1.0f);
    for (int i = 0; i < cfg.ffn_dim; ++i) CHECK(st.ffn[1][static_cast<size_t>(i)] == 1.0f);
    const float m = st.channel.back();
    CHECK(m >= prev);
    prev = m;
  }
  MaskState full = mask_state_at(r.schedule, r.config, 100);
  for (float v : full.channel) CHECK(v == 1.0f);
  for (const auto& h : full.head)
    for (float v : h) CHECK(v == 1.0f);
  for (const auto& f : full.ffn)
    for (float v : f) CHECK(v == 1.0f);

  // staggered variant still starts at 0 and ends at exactly 1
  MsgResult st = expand_width_msg(w, cfg, WidthTargets{24, 48, 3}, 100, 0, /*staggered=*/true);
  MaskState s0 = mask_state_at(st.schedule, st.config, 0);
  CHECK(s0.head[1].back() == 0.0f);
  MaskState s100 = mask_state_at(st.schedule, st.config, 100);
  CHECK(s100.head[1].back() == 1.0f);
  // per-layer ramps are offset
  MaskState mid = mask_state_at(st.schedule, st.config, 30);
  CHECK(mid.head[0].back() >= mid.head[1].back());
}

TEST_CASE("normal_init: fresh blocks match pooled statistics, originals preserved") {
  const ModelConfig cfg = toy_config(4, 64, 8, 4, 128, 64);
  TransformerWeights w = init_model(cfg, 31);
  GrowthPlan plan;
  plan.depth_strategy = DepthStrategy::normal_init;
  plan.new_layers = 2;  // +50% on a 4-layer toy
  plan.seed = 13;
  GrownModel g = expand_normal_init(w, cfg, plan);
  CHECK(g.config.layers == 6);

  // positions default to uniform interleaving: after blocks 1 and 3
  CHECK(same_layer(g.weights.layers[0], w.layers[0]));
  CHECK(same_layer(g.weights.layers[1], w.layers[1]));
  CHECK(same_layer(g.weights.layers[3], w.layers[2]));
  CHECK(same_layer(g.weights.layers[4], w.layers[3]));

  auto stats = [](std::span<const float> v) {
    double s = 0.0, s2 = 0.0;
    for (float x : v) {
      s += x;
      s2 += static_cast<double>(x) * x;
    }
    const double mu = s / static_cast<double>(v.size());
    return std::pair<double, double>(mu, std::sqrt(s2 / static_cast<double>(v.size()) - mu * mu));
  };
  std::vector<float> pooled;
  for (const auto& L : w.layers)
    pooled.insert(pooled.end(), L.q_proj.data().begin(), L.q_proj.data().end());
  auto [mu_base, sd_base] = stats(pooled);
  auto [mu_new, sd_new] = stats(g.weights.layers[2].q_proj.data());
  CHECK(std::fabs(sd_new / sd_base - 1.0) <= 0.10);
  // base mean is ~0 by construction, so compare means on the sigma scale
  CHECK(std::fabs(mu_new - mu_base) <= 0.10 * sd_base);
}

TEST_CASE("depthup: splice arithmetic and copy semantics") {
  const ModelConfig cfg = toy_config(8, 8, 2, 1, 16, 32);
  TransformerWeights w = init_model(cfg, 41);

  GrownModel g = expand_depthup(w, cfg, 4);  // L=8, target 12, m=2
  CHECK(g.config.layers == 12);
  for (int i = 0; i < 6; ++i)
    CHECK(same_layer(g.weights.layers[static_cast<size_t>(i)], w.layers[static_cast<size_t>(i)]));
  for (int i = 0; i < 6; ++i)
    CHECK(same_layer(g.weights.layers[static_cast<size_t>(6 + i)],
                     w.layers[static_cast<size_t>(2 + i)]));

  // no growth: weights bit-identical
  GrownModel same = expand_depthup(w, cfg, 0);
  CHECK(same.config.layers == 8);
  for (int i = 0; i < 8; ++i)
    CHECK(same_layer(same.weights.layers[static_cast<size_t>(i)], w.layers[static_cast<size_t>(i)]));

  CHECK_THROWS_AS(expand_depthup(w, cfg, 3), PlanError);  // L-k odd
  CHECK_THROWS_AS(expand_depthup(w, cfg, 9), PlanError);  // k > L
}

TEST_CASE("staged expansion composes sub-plans") {
  const ModelConfig cfg = toy_config(4, 8, 2, 1, 16, 32);
  TransformerWeights w = init_model(cfg, 51);

  // one stage == direct call, bit-identical
  GrowthPlan p1;
  p1.depth_strategy = DepthStrategy::llamapro;
  p1.new_layers = 1;
  p1.insertion_positions = {2};
  StagedResult one = expand_staged(w, cfg, {p1});
  GrownModel direct = expand_depth_llamapro(w, cfg, 1, {2});
  CHECK(one.config == direct.config);
  for (size_t i = 0; i < direct.weights.layers.size(); ++i)
    CHECK(same_layer(one.weights.layers[i], direct.weights.layers[i]));
  CHECK(one.stage_reports.size() == 1);

  // two +1 stages behave like one +2 plan with matching positions
  GrowthPlan s1 = p1;
  GrowthPlan s2;
  s2.depth_strategy = DepthStrategy::llamapro;
  s2.new_layers = 1;
  s2.insertion_positions = {5};
  StagedResult two = expand_staged(w, cfg, {s1, s2});
  GrownModel combined = expand_depth_llamapro(w, cfg, 2, {2, 4});
  CHECK(two.config.layers == 6);
  const float div = verify_function_preservation(combined.weights, combined.config, two.weights,
                                                 two.config, nullptr, 10, 16, 7);
  CHECK(div <= 1e-5f);

  CHECK_THROWS_AS(expand_staged(w, cfg, {}), PlanError);
  GrowthPlan bad = p1;
  bad.insertion_positions = {99};
  try {
    expand_staged(w, cfg, {p1, bad});
    FAIL("expected PlanError");
  } catch (const PlanError& e) {
    CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
  }

  // width must come last; when it does, its schedule is carried out
  GrowthPlan widen;
  widen.width_targets = WidthTargets{12, 32, 3};
  widen.mask_steps = 20;
  CHECK_THROWS_AS(expand_staged(w, cfg, {widen, p1}), PlanError);
  StagedResult with_width = expand_staged(w, cfg, {p1, widen});
  CHECK(with_width.config.model_dim == 12);
  CHECK(with_width.schedule.total_steps == 20);
  CHECK_FALSE(with_width.schedule.empty());
}

TEST_CASE("verify_function_preservation: self comparison and vocab mismatch") {
  const ModelConfig cfg = toy_config(2, 8, 2, 1, 16, 32);
  TransformerWeights w = init_model(cfg, 61);
  CHECK(verify_function_preservation(w, cfg, w, cfg, nullptr, 4, 12, 1) == 0.0f);

  ModelConfig other = toy_config(2, 8, 2, 1, 16, 48);
  TransformerWeights w2 = init_model(other, 61);
  CHECK_THROWS_AS(verify_function_preservation(w, cfg, w2, other, nullptr, 1, 4, 1),
                  ContractError);
}

TEST_CASE("grow_pipeline: depth then width on the toy plan") {
  const ModelConfig cfg = toy_config(4, 16, 4, 2, 32, 40);
  TransformerWeights w = testutil::conditioned_model(cfg, 71);
  GrowthPlan plan;
  plan.depth_strategy = DepthStrategy::llamapro;
  plan.new_layers = 1;
  plan.width_targets = WidthTargets{24, 48, 6};
  plan.mask_steps = 50;
  plan.seed = 3;

  PipelineResult r = grow_pipeline(w, cfg, plan);
  CHECK(r.config.layers == 5);
  CHECK(r.config.model_dim == 24);
  CHECK(r.config.ffn_dim == 48);
  CHECK(r.config.attn_heads == 6);
  CHECK(r.report.max_logit_divergence <= 1e-4f);
  CHECK(r.report.strategy == "llamapro+msg");
  CHECK(r.report.base_param_count == count_params(cfg));
  CHECK(r.report.grown_param_count == count_params(r.config));

  // width-only plan delegates to expand_width_msg bit-identically
  GrowthPlan wonly;
  wonly.width_targets = WidthTargets{24, 48, 6};
  wonly.mask_steps = 50;
  wonly.seed = 3;
  PipelineResult wr = grow_pipeline(w, cfg, wonly);
  MsgResult direct = expand_width_msg(w, cfg, WidthTargets{24, 48, 6}, 50, 3);
  CHECK(wr.config == direct.config);
  for (size_t i = 0; i < direct.weights.layers.size(); ++i)
    CHECK(same_layer(wr.weights.layers[i], direct.weights.layers[i]));
  CHECK(same_data(wr.weights.token_embedding, direct.weights.token_embedding));
}

TEST_CASE("planned_config reproduces the flagship geometry from the base") {
  ModelConfig base;
  base.layers = 80;
  base.model_dim = 8192;
  base.ffn_dim = 28672;
  base.attn_heads = 64;
  base.kv_heads = 8;
  base.vocab_size = 128000;
  base.head_dim = 128;

  GrowthPlan plan;
  plan.depth_strategy = DepthStrategy::llamapro;
  plan.new_layers = base.layers / 5;  // +20%
  plan.width_targets = WidthTargets{9216, 30720, 72};

  ModelConfig grown = planned_config(base, plan);
  CHECK(grown.layers == 96);
  CHECK(grown.model_dim == 9216);
  CHECK(grown.ffn_dim == 30720);
  CHECK(grown.attn_heads == 72);
  CHECK(grown.kv_heads == 8);
  CHECK(grown.head_dim == 128);
  CHECK(grown.vocab_size == 128000);
  const double total = static_cast<double>(count_params(grown));
  CHECK(std::fabs(total - 102e9) / 102e9 <= 0.02);
}

TEST_CASE("per-layer hidden states expose the inserted identity block") {
  const ModelConfig cfg = toy_config(3, 16, 2, 1, 32, 40);
  TransformerWeights w = testutil::conditioned_model(cfg, 91);
  GrownModel g = expand_depth_llamapro(w, cfg, 1, {2});  // identity block at index 2

  NoGradGuard ng;
  std::vector<int> ids{5, 1, 9, 3};
  ForwardOptions opts;
  opts.want_hiddens = true;
  ForwardOutput out = forward(g.weights, g.config, ids, opts);
  REQUIRE(out.hiddens.size() == 4);
  // the identity block leaves the residual stream bit-identical
  CHECK(std::equal(out.hiddens[1].data().begin(), out.hiddens[1].data().end(),
                   out.hiddens[2].data().begin()));
  CHECK(!std::equal(out.hiddens[0].data().begin(), out.hiddens[0].data().end(),
                    out.hiddens[1].data().begin()));
}

TEST_CASE("property: group ramps are monotone and pinned at the endpoints") {
  Rng rng(77);
  const ModelConfig cfg = toy_config(3, 16, 2, 1, 32, 40);
  TransformerWeights w = init_model(cfg, 1);
  for (int trial = 0; trial < 10; ++trial) {
    const int steps = 1 + static_cast<int>(rng.below(200));
    const bool staggered = rng.below(2) == 1;
    MsgResult r = expand_width_msg(w, cfg, WidthTargets{24, 48, 3}, steps, trial, staggered);
    for (const MaskGroup& g : r.schedule.groups) {
      CHECK(group_mask_value(r.schedule, g, 0) == 0.0f);
      CHECK(group_mask_value(r.schedule, g, steps) == 1.0f);
      float prev = -1.0f;
      for (int t = 0; t <= steps; ++t) {
        const float m = group_mask_value(r.schedule, g, t);
        CHECK(m >= prev);
        CHECK(m >= 0.0f);
        CHECK(m <= 1.0f);
        prev = m;
      }
    }
    // schedule serialization round-trips
    MaskSchedule back = MaskSchedule::from_json(r.schedule.to_json());
    CHECK(back.total_steps == r.schedule.total_steps);
    CHECK(back.groups.size() == r.schedule.groups.size());
  }
}

TEST_CASE("identity preservation implies matching argmax on every probe position") {
  const ModelConfig cfg = toy_config(2, 16, 2, 2, 32, 40);
  TransformerWeights w = testutil::conditioned_model(cfg, 81);
  GrownModel g = expand_depth_llamapro(w, cfg, 1);

  NoGradGuard ng;
  Rng rng(4242);
  for (int p = 0; p < 5; ++p) {
    std::vector<int> ids(20);
    for (int& id : ids) id = static_cast<int>(rng.below(40));
    ForwardOutput base = forward(w, cfg, ids);
    ForwardOutput grown = forward(g.weights, g.config, ids);
    for (int s = 0; s < 20; ++s) {
      const auto* brow = base.logits.data().data() + static_cast<size_t>(s) * 40;
      const auto* grow = grown.logits.data().data() + static_cast<size_t>(s) * 40;
      const int ab = static_cast<int>(std::max_element(brow, brow + 40) - brow);
      const int ag = static_cast<int>(std::max_element(grow, grow + 40) - grow);
      CHECK(ab == ag);
    }
  }
}
