#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "growkit/model.hpp"

namespace growkit {

// Model surgery: depth and width expansion of a trained decoder while
// preserving its function at the moment of growth.
//
// Depth strategies:
//   llamapro    - insert copies of the preceding block with the attention
//                 output and FFN down projections zeroed; under pre-norm
//                 residuals each inserted block is exactly the identity.
//   depthup     - duplicate the layer stack and splice with the overlap
//                 dropped: layers [0, L-m) followed by [m, L).
//   normal_init - append/insert fresh blocks drawn from per-parameter-group
//                 normal fits of the base blocks.
//   staged      - a sequence of sub-plans applied in order.
//
// Width growth uses neuron masking: new channels, FFN units and attention
// heads are multiplied by masks that start at 0 (the grown model computes
// exactly the base function) and ramp to 1 over a step schedule.

enum class DepthStrategy { llamapro, staged, depthup, normal_init, none };

struct WidthTargets {
  int model_dim = 0;
  int ffn_dim = 0;
  int attn_heads = 0;
  bool operator==(const WidthTargets&) const = default;
};

struct GrowthPlan {
  DepthStrategy depth_strategy = DepthStrategy::none;
  int new_layers = 0;
  std::vector<int> insertion_positions;  // empty -> uniform interleaving
  std::optional<WidthTargets> width_targets;
  bool preserve_head_dim = true;  // must stay true
  bool preserve_kv_heads = true;
  // Unmask schedule length for width growth.
  int mask_steps = 100;
  // When true, group ramps are offset per layer instead of synchronized.
  bool staggered_unmask = false;
  uint64_t seed = 0;  // new-parameter initialization

  // Validates against a base config; throws PlanError.
  void validate(const ModelConfig& base) const;
};

// Uniform interleaving: one new block after every floor(L/new_layers)
// originals.
std::vector<int> default_insertion_positions(int base_layers, int new_layers);

// The geometry grow_pipeline would produce, without touching any weights.
ModelConfig planned_config(const ModelConfig& base, const GrowthPlan& plan);

// Per-group unmask trajectory for the newly added units of a width
// expansion. Group masks are 0 at step 0 and exactly 1 at total_steps;
// original units are pinned at 1 throughout.
struct MaskGroup {
  std::string name;  // "channel", "head.<layer>", "ffn.<layer>"
  int base_size = 0;
  int full_size = 0;
  int ramp_start = 0;  // group value ramps linearly over [ramp_start, total_steps]
};

struct MaskSchedule {
  int total_steps = 0;
  std::vector<MaskGroup> groups;

  bool empty() const { return groups.empty(); }
  nlohmann::json to_json() const;
  static MaskSchedule from_json(const nlohmann::json& j);
};

// Linear ramp value of the synchronized schedule: step/total_steps.
// ContractError outside [0, total_steps].
float mask_value(const MaskSchedule& schedule, int step);
// Ramp value of one group (differs from mask_value only when staggered).
float group_mask_value(const MaskSchedule& schedule, const MaskGroup& group, int step);
// Concrete per-unit masks at `step` for forwarding through the grown model.
// Steps past total_steps clamp to fully unmasked.
MaskState mask_state_at(const MaskSchedule& schedule, const ModelConfig& grown_cfg, int step);

struct GrowthReport {
  int64_t base_param_count = 0;
  int64_t grown_param_count = 0;
  float max_logit_divergence = 0.0f;
  std::string strategy;
  double elapsed_seconds = 0.0;
  nlohmann::json to_json() const;
};

struct GrownModel {
  TransformerWeights weights;
  ModelConfig config;
};

// Inserts copies of the preceding block with zeroed output projections.
// Every original parameter is carried over bit-identically.
GrownModel expand_depth_llamapro(const TransformerWeights& w, const ModelConfig& cfg,
                                 int new_layers, std::vector<int> positions = {});

// Widens to the target dims; original values occupy the leading slice of
// every tensor, new slices are freshly initialized, and the returned
// schedule starts with all new-unit masks at 0.
struct MsgResult {
  TransformerWeights weights;
  ModelConfig config;
  MaskSchedule schedule;
};
MsgResult expand_width_msg(const TransformerWeights& w, const ModelConfig& cfg,
                           const WidthTargets& targets, int mask_steps, uint64_t seed,
                           bool staggered = false);

// New blocks drawn from N(mu, sigma^2) fitted per parameter group over the
// base blocks.
GrownModel expand_normal_init(const TransformerWeights& w, const ModelConfig& cfg,
                              const GrowthPlan& plan);

// Duplicate-and-splice depth growth: [0, L-m) ++ [m, L) with
// m = (L - new_layers) / 2.
GrownModel expand_depthup(const TransformerWeights& w, const ModelConfig& cfg, int new_layers);

// Sequential application of sub-plans; one report per stage. A width
// stage must be the final stage (later surgery would invalidate its
// unmask schedule); the schedule, when present, is that stage's.
struct StagedResult {
  TransformerWeights weights;
  ModelConfig config;
  MaskSchedule schedule;
  std::vector<GrowthReport> stage_reports;
};
StagedResult expand_staged(const TransformerWeights& w, const ModelConfig& cfg,
                           const std::vector<GrowthPlan>& stages);

// Max |logit(base) - logit(grown)| over n random probe sequences.
float verify_function_preservation(const TransformerWeights& base_w, const ModelConfig& base_cfg,
                                   const TransformerWeights& grown_w,
                                   const ModelConfig& grown_cfg, const MaskState* masks_at_zero,
                                   int n_probes, int seq_len, uint64_t seed);

// The paper's pipeline: depth expansion first, then width expansion, with a
// function-preservation check folded into the report.
struct PipelineResult {
  TransformerWeights weights;
  ModelConfig config;
  MaskSchedule schedule;
  GrowthReport report;
};
PipelineResult grow_pipeline(const TransformerWeights& w, const ModelConfig& cfg,
                             const GrowthPlan& plan);

nlohmann::json growth_plan_to_json(const GrowthPlan& plan);

}  // namespace growkit
