#pragma once

#include <cstdint>
#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "growkit/growth.hpp"
#include "growkit/hash.hpp"
#include "growkit/model.hpp"

namespace growkit {

// ---- configuration ----

struct OptimizerConfig {
  enum class Kind { sgd, adamw } kind = Kind::adamw;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

struct TrainConfig {
  int batch_size = 8;
  float learning_rate = 1e-3f;
  int steps = 100;
  float neft_alpha = 0.0f;
  OptimizerConfig optimizer;
  std::optional<float> grad_clip = 1.0f;  // global-norm clip
  uint64_t seed = 0;
  void validate() const;
};

struct KtoConfig {
  float lambda_desired = 1.375f;
  float lambda_undesired = 1.0f;
  float beta = 0.1f;
  int reference_kl_batch = 8;
  void validate() const;
};

struct PreferenceExample {
  std::vector<int> prompt;
  std::vector<int> completion;  // non-empty
  bool desirable = true;
};

struct InstructionExample {
  std::vector<int> prompt;
  std::vector<int> response;
};

// ---- optimizer ----

// In-place SGD / AdamW over a fixed parameter list, with optional
// global-norm gradient clipping. Deterministic: no randomness, fixed
// parameter order.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor*> params, const OptimizerConfig& cfg, float lr,
            std::optional<float> grad_clip);
  void step();
  void zero_grad();

 private:
  std::vector<Tensor*> params_;
  OptimizerConfig cfg_;
  float lr_;
  std::optional<float> clip_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// ---- NEFTune ----

// Adds iid uniform noise in [-alpha/sqrt(L*d), +alpha/sqrt(L*d)] to a
// [L, d] embedding tensor. alpha = 0 returns the input unchanged. Training
// only; evaluation never calls this.
Tensor neftune_noise(const Tensor& embeddings, float alpha, uint64_t seed);

// ---- pretraining ----

class SequenceSource {
 public:
  virtual ~SequenceSource() = default;
  virtual std::vector<int> next() = 0;
};

// Cycles through a fixed set of sequences in order.
class CyclingSequenceSource final : public SequenceSource {
 public:
  explicit CyclingSequenceSource(std::vector<std::vector<int>> seqs)
      : seqs_(std::move(seqs)) {
    if (seqs_.empty()) throw ContractError("sequence source: empty dataset");
  }
  std::vector<int> next() override {
    auto& s = seqs_[pos_];
    pos_ = (pos_ + 1) % seqs_.size();
    return s;
  }

 private:
  std::vector<std::vector<int>> seqs_;
  size_t pos_ = 0;
};

struct StepMetrics {
  int step = 0;
  float loss = 0.0f;
  float mask_m = -1.0f;  // synchronized unmask ramp value, -1 when unmasked
  nlohmann::json to_json() const;
};

// Next-token training; weights are updated in place. With a schedule, step t
// runs under mask state m(t) and the schedule advances each step (clamping
// at fully-unmasked once past total_steps). Halts with a diagnostic on a
// non-finite loss.
std::vector<StepMetrics> pretrain(TransformerWeights& w, const ModelConfig& cfg,
                                  const TrainConfig& tc, SequenceSource& stream,
                                  const MaskSchedule* schedule = nullptr);

// ---- supervised fine-tuning ----

struct SftExampleLoss {
  Tensor loss;
  Tensor logits;
  int prompt_len = 0;
};

// Response-only loss for one example: prompt tokens are excluded via the
// position mask; NEFTune noise (alpha > 0) is injected after the embedding
// lookup.
SftExampleLoss sft_example_loss(const TransformerWeights& w, const ModelConfig& cfg,
                                const InstructionExample& ex, float neft_alpha,
                                uint64_t noise_seed);

struct SftResult {
  std::vector<StepMetrics> log;
  int skipped_records = 0;  // empty responses
};

SftResult sft(TransformerWeights& w, const ModelConfig& cfg, const TrainConfig& tc,
              const std::vector<InstructionExample>& dataset);

// ---- KTO preference optimization ----

// Loss for one example given the policy/reference completion log-probs.
// r = beta * (policy - ref); desirable examples pay
// lambda_D * (1 - sigmoid(r - z0)), undesirable lambda_U * (1 - sigmoid(z0 - r)).
// z0 is the batch KL reference point, already gradient-detached.
Tensor kto_loss(const Tensor& policy_logp, float ref_logp, bool desirable, float z0,
                const KtoConfig& kcfg);

// Per-token completion log-probs under the model (no gradients), and the
// summation both logp sources share so their results are bit-identical.
std::vector<float> completion_token_logps(const TransformerWeights& w, const ModelConfig& cfg,
                                          const PreferenceExample& ex);
float sum_token_logps(const std::vector<float>& logps);

// Differentiable sum of completion log-probs under the policy.
Tensor policy_completion_logp(const TransformerWeights& w, const ModelConfig& cfg,
                              const PreferenceExample& ex);

// ---- reference-logit sources ----

class RefLogitSource {
 public:
  virtual ~RefLogitSource() = default;
  virtual float completion_logp(const PreferenceExample& ex) = 0;
  // Frozen-model forward passes performed so far (0 for a cache).
  virtual int64_t forward_passes() const = 0;
};

class FrozenModelSource final : public RefLogitSource {
 public:
  FrozenModelSource(const TransformerWeights& w, const ModelConfig& cfg) : w_(w), cfg_(cfg) {}
  float completion_logp(const PreferenceExample& ex) override;
  int64_t forward_passes() const override { return forwards_; }

 private:
  const TransformerWeights& w_;
  const ModelConfig& cfg_;
  int64_t forwards_ = 0;
};

// Append-only store of per-token completion log-probs keyed by
// (model fingerprint, example id, token content). The header records the
// fingerprint; opening with a different one fails rather than silently
// reusing stale values.
class LogitCache {
 public:
  static LogitCache create(const std::string& path, const std::string& fingerprint);
  static LogitCache open(const std::string& path, const std::string& expected_fingerprint);

  static Sha256Digest make_key(const std::string& fingerprint, std::string_view example_id,
                               std::span<const int> prompt, std::span<const int> completion);

  bool contains(const Sha256Digest& key) const;
  const std::vector<float>* get(const Sha256Digest& key) const;
  void put(const Sha256Digest& key, const std::vector<float>& logps);
  const std::string& fingerprint() const { return fingerprint_; }
  size_t size() const { return entries_.size(); }

 private:
  LogitCache() = default;
  std::string path_;
  std::string fingerprint_;
  std::unordered_map<std::string, std::vector<float>> entries_;
};

class CachedRefSource final : public RefLogitSource {
 public:
  explicit CachedRefSource(const LogitCache& cache) : cache_(cache) {}
  float completion_logp(const PreferenceExample& ex) override;
  int64_t forward_passes() const override { return 0; }

 private:
  const LogitCache& cache_;
};

// Cache header fingerprint: model content hash combined with the tokenizer
// identity, so a cache built under a different vocabulary can never be
// silently reused.
std::string ref_cache_fingerprint(const TransformerWeights& w);

// One frozen pass over the dataset: stores per-token log-probs for every
// (prompt, completion) pair and for the rotation-mismatched KL pairs that
// kto_train consumes, so later tuning rounds never touch the frozen model.
LogitCache cache_ref_logits(const TransformerWeights& w, const ModelConfig& cfg,
                            const std::vector<PreferenceExample>& dataset,
                            const std::string& store_path);

// ---- KTO training ----

struct KtoStepMetrics {
  int step = 0;
  float loss = 0.0f;
  float z0 = 0.0f;
  float mean_desirable_margin = 0.0f;
  float mean_undesirable_margin = 0.0f;
  int n_desirable = 0;
  int n_undesirable = 0;
  nlohmann::json to_json() const;
};

// Minibatch KTO; weights updated in place. The KL pair of example i is
// (prompt_i, completion of the next dataset example), fixed in dataset
// order so a populated cache covers every reference query.
std::vector<KtoStepMetrics> kto_train(TransformerWeights& w, const ModelConfig& cfg,
                                      const TrainConfig& tc, const KtoConfig& kcfg,
                                      const std::vector<PreferenceExample>& dataset,
                                      RefLogitSource& ref);

}  // namespace growkit
