#include "growkit/growth.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>

namespace growkit {

using nlohmann::json;

namespace {

const char* strategy_name(DepthStrategy s) {
  switch (s) {
    case DepthStrategy::llamapro: return "llamapro";
    case DepthStrategy::staged: return "staged";
    case DepthStrategy::depthup: return "depthup";
    case DepthStrategy::normal_init: return "normal_init";
    case DepthStrategy::none: return "none";
  }
  return "?";
}

Tensor cloned_param(const Tensor& t) {
  Tensor c = t.clone();
  c.set_requires_grad();
  return c;
}

LayerWeights clone_layer(const LayerWeights& L) {
  LayerWeights out;
  out.attn_norm_gain = cloned_param(L.attn_norm_gain);
  out.q_proj = cloned_param(L.q_proj);
  out.k_proj = cloned_param(L.k_proj);
  out.v_proj = cloned_param(L.v_proj);
  out.o_proj = cloned_param(L.o_proj);
  out.ffn_norm_gain = cloned_param(L.ffn_norm_gain);
  out.gate_proj = cloned_param(L.gate_proj);
  out.up_proj = cloned_param(L.up_proj);
  out.down_proj = cloned_param(L.down_proj);
  return out;
}

void zero_tensor(Tensor& t) {
  for (float& v : t.raw()) v = 0.0f;
}

}  // namespace

std::vector<int> default_insertion_positions(int base_layers, int new_layers) {
  if (new_layers < 1 || new_layers > base_layers)
    throw PlanError(fmt::format(
        "uniform interleaving needs 1 <= new_layers <= base layers, got {} for {} layers",
        new_layers, base_layers));
  const int stride = base_layers / new_layers;
  std::vector<int> positions;
  for (int i = 1; i <= new_layers; ++i) positions.push_back(stride * i);
  return positions;
}

ModelConfig planned_config(const ModelConfig& base, const GrowthPlan& plan) {
  plan.validate(base);
  ModelConfig out = base;
  if (plan.depth_strategy != DepthStrategy::none) out.layers += plan.new_layers;
  if (plan.width_targets) {
    out.model_dim = plan.width_targets->model_dim;
    out.ffn_dim = plan.width_targets->ffn_dim;
    out.attn_heads = plan.width_targets->attn_heads;
  }
  out.validate();
  return out;
}

void GrowthPlan::validate(const ModelConfig& base) const {
  if (!preserve_head_dim) throw PlanError("plan: preserve_head_dim must be true");
  if (depth_strategy != DepthStrategy::none && new_layers < 1)
    throw PlanError(fmt::format("plan: depth strategy '{}' needs new_layers >= 1",
                                strategy_name(depth_strategy)));
  if (!insertion_positions.empty()) {
    if (static_cast<int>(insertion_positions.size()) != new_layers &&
        depth_strategy == DepthStrategy::llamapro)
      throw PlanError(fmt::format("plan: {} insertion positions for {} new layers",
                                  insertion_positions.size(), new_layers));
    int prev = -1;
    for (int p : insertion_positions) {
      if (p <= prev)
        throw PlanError("plan: insertion positions must be strictly increasing");
      if (p < 0 || p > base.layers)
        throw PlanError(
            fmt::format("plan: insertion position {} outside [0,{}]", p, base.layers));
      prev = p;
    }
  }
  if (width_targets) {
    const WidthTargets& t = *width_targets;
    if (t.model_dim < base.model_dim || t.ffn_dim < base.ffn_dim ||
        t.attn_heads < base.attn_heads)
      throw PlanError(fmt::format(
          "plan: width targets (d={}, ffn={}, heads={}) shrink the base (d={}, ffn={}, heads={})",
          t.model_dim, t.ffn_dim, t.attn_heads, base.model_dim, base.ffn_dim, base.attn_heads));
    if (t.model_dim != t.attn_heads * base.head_dim)
      throw PlanError(fmt::format(
          "plan: width model_dim {} != attn_heads {} x preserved head_dim {}", t.model_dim,
          t.attn_heads, base.head_dim));
    if (mask_steps < 1) throw PlanError("plan: mask_steps must be >= 1");
  }
}

// ---- depth: llamapro ----

GrownModel expand_depth_llamapro(const TransformerWeights& w, const ModelConfig& cfg,
                                 int new_layers, std::vector<int> positions) {
  if (new_layers < 1) throw PlanError("llamapro: new_layers must be >= 1");
  if (positions.empty()) positions = default_insertion_positions(cfg.layers, new_layers);
  if (static_cast<int>(positions.size()) != new_layers)
    throw PlanError(fmt::format("llamapro: {} positions for {} new layers", positions.size(),
                                new_layers));
  int prev = -1;
  for (int p : positions) {
    if (p <= prev) throw PlanError("llamapro: positions must be strictly increasing");
    if (p < 0 || p > cfg.layers)
      throw PlanError(fmt::format("llamapro: position {} outside [0,{}]", p, cfg.layers));
    prev = p;
  }

  GrownModel out;
  out.config = cfg;
  out.config.layers = cfg.layers + new_layers;
  out.weights.token_embedding = cloned_param(w.token_embedding);
  out.weights.final_norm_gain = cloned_param(w.final_norm_gain);
  out.weights.output_head = cloned_param(w.output_head);

  size_t pi = 0;
  for (int i = 0; i <= cfg.layers; ++i) {
    while (pi < positions.size() && positions[pi] == i) {
      // Copy of the preceding block with both output projections zeroed:
      // under pre-norm residuals the block contributes exactly nothing.
      LayerWeights ident = clone_layer(w.layers[static_cast<size_t>(std::max(i - 1, 0))]);
      zero_tensor(ident.o_proj);
      zero_tensor(ident.down_proj);
      out.weights.layers.push_back(std::move(ident));
      ++pi;
    }
    if (i < cfg.layers) out.weights.layers.push_back(clone_layer(w.layers[static_cast<size_t>(i)]));
  }
  return out;
}

// ---- width: masked structure growth ----

namespace {

// Fresh values drawn for the full grown shape from a name-derived stream;
// the original block then overwrites its mapped slice, so new-slice values
// are independent of the base content.
Tensor widened_shell(int rows, int cols, uint64_t seed, const std::string& name,
                     bool gain_ones) {
  if (gain_ones)
    return Tensor::ones(cols > 0 ? std::vector<int>{rows, cols} : std::vector<int>{rows});
  Rng rng(derive_seed(seed, "msg." + name));
  return Tensor::randn(cols > 0 ? std::vector<int>{rows, cols} : std::vector<int>{rows}, rng,
                       0.02f);
}

// Original values occupy the leading rows/columns.
Tensor widen_tensor(const Tensor& orig, int rows, int cols, uint64_t seed,
                    const std::string& name, bool gain_ones) {
  Tensor grown = widened_shell(rows, cols, seed, name, gain_ones);
  if (cols > 0) {
    const int orows = orig.dim(0), ocols = orig.dim(1);
    for (int r = 0; r < orows; ++r)
      std::copy(orig.data().begin() + static_cast<size_t>(r) * ocols,
                orig.data().begin() + static_cast<size_t>(r + 1) * ocols,
                grown.raw().begin() + static_cast<size_t>(r) * cols);
  } else {
    std::copy(orig.data().begin(), orig.data().end(), grown.raw().begin());
  }
  grown.set_requires_grad();
  return grown;
}

// Grown q-head index of base head j: heads stay inside their kv group, so
// group g's heads occupy slots [g*Hg', g*Hg' + Hg) and the new heads fill
// the rest of the group. Appending at the tail instead would re-bind
// original heads to different kv heads and break function preservation.
int mapped_head(int j, int heads_per_group, int grown_per_group) {
  return (j / heads_per_group) * grown_per_group + (j % heads_per_group);
}

// q_proj: [d, H*hd] -> [d', H'*hd] with per-group column placement.
Tensor widen_q_proj(const Tensor& orig, int d_new, int heads_old, int heads_new, int kv,
                    int hd, uint64_t seed, const std::string& name) {
  Tensor grown = widened_shell(d_new, heads_new * hd, seed, name, false);
  const int d_old = orig.dim(0);
  const int hg_old = heads_old / kv, hg_new = heads_new / kv;
  for (int r = 0; r < d_old; ++r)
    for (int j = 0; j < heads_old; ++j) {
      const int jn = mapped_head(j, hg_old, hg_new);
      std::copy(orig.data().begin() + (static_cast<size_t>(r) * heads_old + j) * hd,
                orig.data().begin() + (static_cast<size_t>(r) * heads_old + j + 1) * hd,
                grown.raw().begin() + (static_cast<size_t>(r) * heads_new + jn) * hd);
    }
  grown.set_requires_grad();
  return grown;
}

// o_proj: [H*hd, d] -> [H'*hd, d'] with per-group row placement.
Tensor widen_o_proj(const Tensor& orig, int d_new, int heads_old, int heads_new, int kv,
                    int hd, uint64_t seed, const std::string& name) {
  Tensor grown = widened_shell(heads_new * hd, d_new, seed, name, false);
  const int d_old = orig.dim(1);
  const int hg_old = heads_old / kv, hg_new = heads_new / kv;
  for (int j = 0; j < heads_old; ++j) {
    const int jn = mapped_head(j, hg_old, hg_new);
    for (int c = 0; c < hd; ++c)
      std::copy(orig.data().begin() + (static_cast<size_t>(j) * hd + c) * d_old,
                orig.data().begin() + (static_cast<size_t>(j) * hd + c + 1) * d_old,
                grown.raw().begin() + (static_cast<size_t>(jn) * hd + c) * d_new);
  }
  grown.set_requires_grad();
  return grown;
}

}  // namespace

MsgResult expand_width_msg(const TransformerWeights& w, const ModelConfig& cfg,
                           const WidthTargets& targets, int mask_steps, uint64_t seed,
                           bool staggered) {
  if (targets.model_dim < cfg.model_dim || targets.ffn_dim < cfg.ffn_dim ||
      targets.attn_heads < cfg.attn_heads)
    throw PlanError(fmt::format(
        "msg: targets (d={}, ffn={}, heads={}) smaller than current (d={}, ffn={}, heads={})",
        targets.model_dim, targets.ffn_dim, targets.attn_heads, cfg.model_dim, cfg.ffn_dim,
        cfg.attn_heads));
  if (targets.model_dim != targets.attn_heads * cfg.head_dim)
    throw PlanError(fmt::format("msg: model_dim {} would change head_dim (heads {} x hd {})",
                                targets.model_dim, targets.attn_heads, cfg.head_dim));
  if (mask_steps < 1) throw PlanError("msg: mask_steps must be >= 1");

  MsgResult out;
  out.config = cfg;
  out.config.model_dim = targets.model_dim;
  out.config.ffn_dim = targets.ffn_dim;
  out.config.attn_heads = targets.attn_heads;
  out.config.validate();

  const int d = targets.model_dim, f = targets.ffn_dim;
  const int kv = cfg.kv_heads * cfg.head_dim;

  out.weights.token_embedding =
      widen_tensor(w.token_embedding, cfg.vocab_size, d, seed, "token_embedding", false);
  for (size_t i = 0; i < w.layers.size(); ++i) {
    const LayerWeights& L = w.layers[i];
    const std::string p = fmt::format("layers.{}.", i);
    LayerWeights g;
    g.attn_norm_gain = widen_tensor(L.attn_norm_gain, d, 0, seed, p + "attn_norm_gain", true);
    g.q_proj = widen_q_proj(L.q_proj, d, cfg.attn_heads, targets.attn_heads, cfg.kv_heads,
                            cfg.head_dim, seed, p + "q_proj");
    g.k_proj = widen_tensor(L.k_proj, d, kv, seed, p + "k_proj", false);
    g.v_proj = widen_tensor(L.v_proj, d, kv, seed, p + "v_proj", false);
    g.o_proj = widen_o_proj(L.o_proj, d, cfg.attn_heads, targets.attn_heads, cfg.kv_heads,
                            cfg.head_dim, seed, p + "o_proj");
    g.ffn_norm_gain = widen_tensor(L.ffn_norm_gain, d, 0, seed, p + "ffn_norm_gain", true);
    g.gate_proj = widen_tensor(L.gate_proj, d, f, seed, p + "gate_proj", false);
    g.up_proj = widen_tensor(L.up_proj, d, f, seed, p + "up_proj", false);
    g.down_proj = widen_tensor(L.down_proj, f, d, seed, p + "down_proj", false);
    out.weights.layers.push_back(std::move(g));
  }
  out.weights.final_norm_gain = widen_tensor(w.final_norm_gain, d, 0, seed, "final_norm_gain", true);
  out.weights.output_head = widen_tensor(w.output_head, d, cfg.vocab_size, seed, "output_head", false);

  // Unmask schedule: one channel group plus per-layer head and FFN groups.
  out.schedule.total_steps = mask_steps;
  out.schedule.groups.push_back({"channel", cfg.model_dim, d, 0});
  const int L = cfg.layers;
  for (int i = 0; i < L; ++i) {
    const int offset = staggered ? static_cast<int>(static_cast<int64_t>(i) * mask_steps / (2 * L)) : 0;
    out.schedule.groups.push_back({fmt::format("head.{}", i), cfg.attn_heads, targets.attn_heads, offset});
    out.schedule.groups.push_back({fmt::format("ffn.{}", i), cfg.ffn_dim, f, offset});
  }
  return out;
}

// ---- depth: normal-init ----

GrownModel expand_normal_init(const TransformerWeights& w, const ModelConfig& cfg,
                              const GrowthPlan& plan) {
  plan.validate(cfg);
  if (plan.new_layers < 1) throw PlanError("normal_init: plan must specify new_layers >= 1");
  std::vector<int> positions = plan.insertion_positions.empty()
                                   ? default_insertion_positions(cfg.layers, plan.new_layers)
                                   : plan.insertion_positions;

  // Pooled mean/std per parameter group over all base blocks.
  struct Stats {
    double mu = 0.0, sigma = 0.0;
  };
  auto fit = [&](auto member) {
    double s = 0.0, s2 = 0.0;
    int64_t n = 0;
    for (const auto& L : w.layers) {
      for (float v : (L.*member).data()) {
        s += v;
        s2 += static_cast<double>(v) * v;
        ++n;
      }
    }
    Stats st;
    st.mu = s / static_cast<double>(n);
    st.sigma = std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - st.mu * st.mu));
    return st;
  };
  const Stats st_attn_gain = fit(&LayerWeights::attn_norm_gain);
  const Stats st_q = fit(&LayerWeights::q_proj);
  const Stats st_k = fit(&LayerWeights::k_proj);
  const Stats st_v = fit(&LayerWeights::v_proj);
  const Stats st_o = fit(&LayerWeights::o_proj);
  const Stats st_ffn_gain = fit(&LayerWeights::ffn_norm_gain);
  const Stats st_gate = fit(&LayerWeights::gate_proj);
  const Stats st_up = fit(&LayerWeights::up_proj);
  const Stats st_down = fit(&LayerWeights::down_proj);

  int fresh_index = 0;
  auto draw = [&](std::vector<int> shape, const Stats& st, const std::string& name) {
    Rng rng(derive_seed(plan.seed, fmt::format("norminit.{}.{}", fresh_index, name)));
    Tensor t(shape);
    for (float& v : t.raw())
      v = rng.normal(static_cast<float>(st.mu), static_cast<float>(st.sigma));
    t.set_requires_grad();
    return t;
  };
  auto fresh_layer = [&] {
    const int d = cfg.model_dim, f = cfg.ffn_dim;
    const int qo = cfg.attn_heads * cfg.head_dim, kv = cfg.kv_heads * cfg.head_dim;
    LayerWeights L;
    L.attn_norm_gain = draw({d}, st_attn_gain, "attn_norm_gain");
    L.q_proj = draw({d, qo}, st_q, "q_proj");
    L.k_proj = draw({d, kv}, st_k, "k_proj");
    L.v_proj = draw({d, kv}, st_v, "v_proj");
    L.o_proj = draw({qo, d}, st_o, "o_proj");
    L.ffn_norm_gain = draw({d}, st_ffn_gain, "ffn_norm_gain");
    L.gate_proj = draw({d, f}, st_gate, "gate_proj");
    L.up_proj = draw({d, f}, st_up, "up_proj");
    L.down_proj = draw({f, d}, st_down, "down_proj");
    ++fresh_index;
    return L;
  };

  GrownModel out;
  out.config = cfg;
  out.config.layers = cfg.layers + plan.new_layers;
  out.weights.token_embedding = cloned_param(w.token_embedding);
  out.weights.final_norm_gain = cloned_param(w.final_norm_gain);
  out.weights.output_head = cloned_param(w.output_head);
  size_t pi = 0;
  for (int i = 0; i <= cfg.layers; ++i) {
    while (pi < positions.size() && positions[pi] == i) {
      out.weights.layers.push_back(fresh_layer());
      ++pi;
    }
    if (i < cfg.layers) out.weights.layers.push_back(clone_layer(w.layers[static_cast<size_t>(i)]));
  }
  return out;
}

// ---- depth: duplicate-and-splice ----

GrownModel expand_depthup(const TransformerWeights& w, const ModelConfig& cfg, int new_layers) {
  const int L = cfg.layers;
  if (new_layers < 0 || new_layers > L)
    throw PlanError(fmt::format("depthup: new_layers {} outside [0,{}]", new_layers, L));
  if ((L - new_layers) % 2 != 0)
    throw PlanError(fmt::format(
        "depthup: no integer split exists for {} layers + {} new (L - k must be even)", L,
        new_layers));
  const int m = (L - new_layers) / 2;

  GrownModel out;
  out.config = cfg;
  out.config.layers = L + new_layers;
  out.weights.token_embedding = cloned_param(w.token_embedding);
  out.weights.final_norm_gain = cloned_param(w.final_norm_gain);
  out.weights.output_head = cloned_param(w.output_head);
  for (int i = 0; i < L - m; ++i)
    out.weights.layers.push_back(clone_layer(w.layers[static_cast<size_t>(i)]));
  for (int i = m; i < L; ++i)
    out.weights.layers.push_back(clone_layer(w.layers[static_cast<size_t>(i)]));
  return out;
}

// ---- masks ----

json MaskSchedule::to_json() const {
  json groups_j = json::array();
  for (const auto& g : groups)
    groups_j.push_back({{"name", g.name},
                        {"base_size", g.base_size},
                        {"full_size", g.full_size},
                        {"ramp_start", g.ramp_start}});
  return json{{"total_steps", total_steps}, {"groups", groups_j}};
}

MaskSchedule MaskSchedule::from_json(const json& j) {
  MaskSchedule s;
  s.total_steps = j.at("total_steps").get<int>();
  for (const auto& g : j.at("groups"))
    s.groups.push_back({g.at("name").get<std::string>(), g.at("base_size").get<int>(),
                        g.at("full_size").get<int>(), g.at("ramp_start").get<int>()});
  return s;
}

float mask_value(const MaskSchedule& schedule, int step) {
  if (schedule.total_steps < 1) throw ContractError("mask_value: schedule has no steps");
  if (step < 0 || step > schedule.total_steps)
    throw ContractError(fmt::format("mask_value: step {} outside [0,{}]", step,
                                    schedule.total_steps));
  return static_cast<float>(step) / static_cast<float>(schedule.total_steps);
}

float group_mask_value(const MaskSchedule& schedule, const MaskGroup& group, int step) {
  if (step < 0 || step > schedule.total_steps)
    throw ContractError(fmt::format("mask_value: step {} outside [0,{}]", step,
                                    schedule.total_steps));
  if (step <= group.ramp_start) return 0.0f;
  const int span = schedule.total_steps - group.ramp_start;
  return static_cast<float>(step - group.ramp_start) / static_cast<float>(span);
}

MaskState mask_state_at(const MaskSchedule& schedule, const ModelConfig& grown_cfg, int step) {
  const int s = std::min(step, schedule.total_steps);
  if (s < 0) throw ContractError("mask_state_at: negative step");

  MaskState st;
  st.channel.assign(static_cast<size_t>(grown_cfg.model_dim), 1.0f);
  st.head.assign(static_cast<size_t>(grown_cfg.layers),
                 std::vector<float>(static_cast<size_t>(grown_cfg.attn_heads), 1.0f));
  st.ffn.assign(static_cast<size_t>(grown_cfg.layers),
                std::vector<float>(static_cast<size_t>(grown_cfg.ffn_dim), 1.0f));
  for (const MaskGroup& g : schedule.groups) {
    const float m = group_mask_value(schedule, g, s);
    auto apply_tail = [&](std::vector<float>& v) {
      if (g.full_size != static_cast<int>(v.size()))
        throw ContractError(fmt::format("mask group '{}' sized {} does not fit config ({})",
                                        g.name, g.full_size, v.size()));
      for (int i = g.base_size; i < g.full_size; ++i) v[static_cast<size_t>(i)] = m;
    };
    if (g.name == "channel") {
      apply_tail(st.channel);
    } else if (g.name.rfind("head.", 0) == 0) {
      // New heads sit at the tail of each kv group (original heads keep
      // their kv bindings), so the new indices are per-group tail slots.
      auto& v = st.head.at(static_cast<size_t>(std::stoi(g.name.substr(5))));
      if (g.full_size != static_cast<int>(v.size()))
        throw ContractError(fmt::format("mask group '{}' sized {} does not fit config ({})",
                                        g.name, g.full_size, v.size()));
      const int kv = grown_cfg.kv_heads;
      const int hg_old = g.base_size / kv, hg_new = g.full_size / kv;
      for (int h = 0; h < g.full_size; ++h)
        if (h % hg_new >= hg_old) v[static_cast<size_t>(h)] = m;
    } else if (g.name.rfind("ffn.", 0) == 0) {
      apply_tail(st.ffn.at(static_cast<size_t>(std::stoi(g.name.substr(4)))));
    } else {
      throw ContractError(fmt::format("unknown mask group '{}'", g.name));
    }
  }
  return st;
}

// ---- verification ----

float verify_function_preservation(const TransformerWeights& base_w, const ModelConfig& base_cfg,
                                   const TransformerWeights& grown_w,
                                   const ModelConfig& grown_cfg, const MaskState* masks_at_zero,
                                   int n_probes, int seq_len, uint64_t seed) {
  if (base_cfg.vocab_size != grown_cfg.vocab_size)
    throw ContractError(fmt::format("verify: vocab mismatch {} vs {}", base_cfg.vocab_size,
                                    grown_cfg.vocab_size));
  NoGradGuard ng;
  Rng rng(derive_seed(seed, "verify.probes"));
  float worst = 0.0f;
  for (int p = 0; p < n_probes; ++p) {
    std::vector<int> ids(static_cast<size_t>(seq_len));
    for (int& id : ids) id = static_cast<int>(rng.below(static_cast<uint64_t>(base_cfg.vocab_size)));
    ForwardOutput base = forward(base_w, base_cfg, ids);
    ForwardOptions opts;
    opts.masks = masks_at_zero;
    ForwardOutput grown = forward(grown_w, grown_cfg, ids, opts);
    const auto bv = base.logits.data();
    const auto gv = grown.logits.data();
    for (size_t i = 0; i < bv.size(); ++i)
      worst = std::max(worst, std::fabs(bv[i] - gv[i]));
  }
  return worst;
}

// ---- staged and pipeline ----

namespace {

GrowthReport make_report(const char* strategy, const ModelConfig& base_cfg,
                         const ModelConfig& grown_cfg, float divergence, double elapsed) {
  GrowthReport r;
  r.base_param_count = count_params(base_cfg);
  r.grown_param_count = count_params(grown_cfg);
  r.max_logit_divergence = divergence;
  r.strategy = strategy;
  r.elapsed_seconds = elapsed;
  return r;
}

}  // namespace

StagedResult expand_staged(const TransformerWeights& w, const ModelConfig& cfg,
                           const std::vector<GrowthPlan>& stages) {
  if (stages.empty()) throw PlanError("staged: empty stage list");
  for (size_t i = 0; i + 1 < stages.size(); ++i)
    if (stages[i].width_targets)
      throw PlanError(fmt::format(
          "stage {}: width expansion must be the final stage (later stages would "
          "invalidate its unmask schedule)", i));
  StagedResult out;
  out.weights = w;  // shared until the first stage replaces it
  out.config = cfg;
  for (size_t i = 0; i < stages.size(); ++i) {
    try {
      PipelineResult stage = grow_pipeline(out.weights, out.config, stages[i]);
      out.weights = std::move(stage.weights);
      out.config = stage.config;
      out.schedule = std::move(stage.schedule);
      stage.report.strategy = fmt::format("stage{}:{}", i, stage.report.strategy);
      out.stage_reports.push_back(std::move(stage.report));
    } catch (const PlanError& e) {
      throw PlanError(fmt::format("stage {}: {}", i, e.what()));
    }
  }
  return out;
}

PipelineResult grow_pipeline(const TransformerWeights& w, const ModelConfig& cfg,
                             const GrowthPlan& plan) {
  plan.validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  PipelineResult out;
  std::string strategy;

  // depth first
  const TransformerWeights* cur_w = &w;
  const ModelConfig* cur_cfg = &cfg;
  GrownModel deep;
  switch (plan.depth_strategy) {
    case DepthStrategy::none:
      break;
    case DepthStrategy::llamapro:
      deep = expand_depth_llamapro(*cur_w, *cur_cfg, plan.new_layers, plan.insertion_positions);
      cur_w = &deep.weights;
      cur_cfg = &deep.config;
      strategy = "llamapro";
      break;
    case DepthStrategy::depthup:
      deep = expand_depthup(*cur_w, *cur_cfg, plan.new_layers);
      cur_w = &deep.weights;
      cur_cfg = &deep.config;
      strategy = "depthup";
      break;
    case DepthStrategy::normal_init:
      deep = expand_normal_init(*cur_w, *cur_cfg, plan);
      cur_w = &deep.weights;
      cur_cfg = &deep.config;
      strategy = "normal_init";
      break;
    case DepthStrategy::staged:
      throw PlanError("pipeline: nested 'staged' strategy; call expand_staged with sub-plans");
  }

  // then width
  if (plan.width_targets) {
    MsgResult msg = expand_width_msg(*cur_w, *cur_cfg, *plan.width_targets, plan.mask_steps,
                                     plan.seed, plan.staggered_unmask);
    out.weights = std::move(msg.weights);
    out.config = msg.config;
    out.schedule = std::move(msg.schedule);
    strategy = strategy.empty() ? "msg" : strategy + "+msg";
  } else {
    out.weights = *cur_w;
    out.config = *cur_cfg;
  }

  // Function-preservation probe against the pipeline input. For strategies
  // that are not identity-preserving (normal_init, depthup) the number is
  // reported as-is.
  float divergence = 0.0f;
  {
    MaskState zero_masks;
    const MaskState* mp = nullptr;
    if (!out.schedule.empty()) {
      zero_masks = mask_state_at(out.schedule, out.config, 0);
      mp = &zero_masks;
    }
    const int seq = std::min(64, cfg.max_seq);
    divergence = verify_function_preservation(w, cfg, out.weights, out.config, mp,
                                              /*n_probes=*/10, seq, plan.seed);
  }

  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.report = make_report(strategy.empty() ? "none" : strategy.c_str(), cfg, out.config,
                           divergence, elapsed);
  return out;
}

json GrowthReport::to_json() const {
  return json{{"base_param_count", base_param_count},
              {"grown_param_count", grown_param_count},
              {"max_logit_divergence", max_logit_divergence},
              {"strategy", strategy},
              {"elapsed_seconds", elapsed_seconds}};
}

json growth_plan_to_json(const GrowthPlan& plan) {
  json j{{"depth_strategy", strategy_name(plan.depth_strategy)},
         {"new_layers", plan.new_layers},
         {"insertion_positions", plan.insertion_positions},
         {"preserve_head_dim", plan.preserve_head_dim},
         {"preserve_kv_heads", plan.preserve_kv_heads},
         {"mask_steps", plan.mask_steps},
         {"staggered_unmask", plan.staggered_unmask},
         {"seed", plan.seed}};
  if (plan.width_targets)
    j["width_targets"] = {{"model_dim", plan.width_targets->model_dim},
                          {"ffn_dim", plan.width_targets->ffn_dim},
                          {"attn_heads", plan.width_targets->attn_heads}};
  return j;
}

}  // namespace growkit
