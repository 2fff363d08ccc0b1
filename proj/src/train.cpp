#include "growkit/train.hpp"

#include "growkit/checkpoint.hpp"
#include "growkit/data.hpp"

#include <fmt/format.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace growkit {

using nlohmann::json;

void TrainConfig::validate() const {
  if (learning_rate < 0.0f) throw ConfigError("train: learning_rate must be >= 0");
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (neft_alpha < 0.0f) throw ConfigError("train: neft_alpha must be >= 0");
  if (grad_clip && *grad_clip <= 0.0f) throw ConfigError("train: grad_clip must be positive");
}

void KtoConfig::validate() const {
  if (lambda_desired <= 0.0f || lambda_undesired <= 0.0f)
    throw ConfigError("kto: lambda values must be positive");
  if (beta <= 0.0f) throw ConfigError("kto: beta must be positive");
  if (reference_kl_batch < 1) throw ConfigError("kto: reference_kl_batch must be >= 1");
}

// ---- optimizer ----

Optimizer::Optimizer(std::vector<Tensor*> params, const OptimizerConfig& cfg, float lr,
                     std::optional<float> grad_clip)
    : params_(std::move(params)), cfg_(cfg), lr_(lr), clip_(grad_clip) {
  if (cfg_.kind == OptimizerConfig::Kind::adamw) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params_[i]->size()), 0.0f);
      v_[i].assign(static_cast<size_t>(params_[i]->size()), 0.0f);
    }
  }
}

void Optimizer::step() {
  ++t_;

  float scale = 1.0f;
  if (clip_) {
    double norm2 = 0.0;
    for (Tensor* p : params_) {
      if (!p->has_grad()) continue;
      for (float g : p->grad()) norm2 += static_cast<double>(g) * g;
    }
    const float norm = static_cast<float>(std::sqrt(norm2));
    if (norm > *clip_) scale = *clip_ / norm;
  }

  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor* p = params_[i];
    if (!p->has_grad()) continue;
    auto w = p->raw();
    auto g = p->grad();
    if (cfg_.kind == OptimizerConfig::Kind::sgd) {
      for (size_t j = 0; j < w.size(); ++j)
        w[j] -= lr_ * (scale * g[j] + cfg_.weight_decay * w[j]);
    } else {
      const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
      const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
      for (size_t j = 0; j < w.size(); ++j) {
        const float gj = scale * g[j];
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0f - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0f - cfg_.beta2) * gj * gj;
        const float mhat = m_[i][j] / bc1;
        const float vhat = v_[i][j] / bc2;
        w[j] -= lr_ * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
      }
    }
  }
}

void Optimizer::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

// ---- NEFTune ----

Tensor neftune_noise(const Tensor& embeddings, float alpha, uint64_t seed) {
  if (alpha < 0.0f) throw ContractError("neftune: alpha must be >= 0");
  if (embeddings.ndim() != 2)
    throw DimensionError(fmt::format("neftune: want [L,d], got {}", embeddings.shape_str()));
  if (alpha == 0.0f) return embeddings;
  const float bound =
      alpha / std::sqrt(static_cast<float>(embeddings.dim(0)) * embeddings.dim(1));
  Rng rng(derive_seed(seed, "neftune"));
  Tensor noise(embeddings.shape());
  for (float& v : noise.raw()) v = rng.uniform(-bound, bound);
  return add(embeddings, noise);
}

// ---- pretraining ----

json StepMetrics::to_json() const {
  json j{{"step", step}, {"loss", loss}};
  if (mask_m >= 0.0f) j["mask_m"] = mask_m;
  return j;
}

std::vector<StepMetrics> pretrain(TransformerWeights& w, const ModelConfig& cfg,
                                  const TrainConfig& tc, SequenceSource& stream,
                                  const MaskSchedule* schedule) {
  tc.validate();
  std::vector<Tensor*> params;
  for (auto& [name, t] : named_parameters(w)) params.push_back(t);
  Optimizer opt(params, tc.optimizer, tc.learning_rate, tc.grad_clip);

  std::vector<StepMetrics> log;
  for (int step = 0; step < tc.steps; ++step) {
    MaskState masks;
    ForwardOptions fopts;
    float mask_m = -1.0f;
    if (schedule && !schedule->empty()) {
      const int s = std::min(step, schedule->total_steps);
      masks = mask_state_at(*schedule, cfg, s);
      fopts.masks = &masks;
      mask_m = mask_value(*schedule, s);
    }

    Tensor batch_loss;
    for (int b = 0; b < tc.batch_size; ++b) {
      const std::vector<int> seq = stream.next();
      Tensor loss = loss_next_token(w, cfg, seq, fopts);
      if (!std::isfinite(loss.item()))
        throw ContractError(
            fmt::format("pretrain: non-finite loss at step {}, batch sequence {}", step, b));
      batch_loss = b == 0 ? loss : add(batch_loss, loss);
    }
    batch_loss = scale(batch_loss, 1.0f / static_cast<float>(tc.batch_size));

    opt.zero_grad();
    batch_loss.backward();
    opt.step();
    log.push_back({step, batch_loss.item(), mask_m});
  }
  return log;
}

// ---- supervised fine-tuning ----

SftExampleLoss sft_example_loss(const TransformerWeights& w, const ModelConfig& cfg,
                                const InstructionExample& ex, float neft_alpha,
                                uint64_t noise_seed) {
  if (ex.response.empty()) throw ContractError("sft: empty response");
  std::vector<int> seq = ex.prompt;
  seq.insert(seq.end(), ex.response.begin(), ex.response.end());
  const int n = static_cast<int>(seq.size());
  const int plen = static_cast<int>(ex.prompt.size());
  if (n < 2) throw ContractError("sft: sequence needs at least 2 tokens");

  for (int id : seq)
    if (id < 0 || id >= cfg.vocab_size)
      throw IndexError(fmt::format("sft: token id {} out of range [0,{})", id, cfg.vocab_size));

  Tensor embedded = embedding(w.token_embedding, seq);
  embedded = neftune_noise(embedded, neft_alpha, noise_seed);
  ForwardOutput out = forward_from_embeddings(w, cfg, embedded);

  // Positions predicting response tokens: max(plen-1, 0) .. n-2.
  Tensor pred = slice_rows(out.logits, 0, n - 1);
  Tensor logps = log_softmax_gather(pred, std::span<const int>(seq).subspan(1));
  std::vector<float> mask(static_cast<size_t>(n - 1), 0.0f);
  int count = 0;
  for (int t = std::max(plen - 1, 0); t < n - 1; ++t) {
    mask[static_cast<size_t>(t)] = 1.0f;
    ++count;
  }
  Tensor loss = scale(weighted_sum(logps, mask), -1.0f / static_cast<float>(count));
  return {loss, out.logits, plen};
}

SftResult sft(TransformerWeights& w, const ModelConfig& cfg, const TrainConfig& tc,
              const std::vector<InstructionExample>& dataset) {
  tc.validate();
  SftResult result;
  std::vector<const InstructionExample*> usable;
  for (const auto& ex : dataset) {
    if (ex.response.empty())
      ++result.skipped_records;
    else
      usable.push_back(&ex);
  }
  if (usable.empty()) throw ContractError("sft: no usable examples (all responses empty)");

  std::vector<Tensor*> params;
  for (auto& [name, t] : named_parameters(w)) params.push_back(t);
  Optimizer opt(params, tc.optimizer, tc.learning_rate, tc.grad_clip);

  std::vector<size_t> order;
  size_t cursor = 0;
  int epoch = 0;
  auto next_index = [&] {
    if (cursor >= order.size()) {
      order.resize(usable.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(derive_seed(tc.seed, fmt::format("sft.epoch{}", epoch++)));
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  for (int step = 0; step < tc.steps; ++step) {
    Tensor batch_loss;
    for (int b = 0; b < tc.batch_size; ++b) {
      const InstructionExample& ex = *usable[next_index()];
      const uint64_t noise_seed = derive_seed(tc.seed, fmt::format("sft.noise.{}.{}", step, b));
      Tensor loss = sft_example_loss(w, cfg, ex, tc.neft_alpha, noise_seed).loss;
      if (!std::isfinite(loss.item()))
        throw ContractError(
            fmt::format("sft: non-finite loss at step {}, batch example {}", step, b));
      batch_loss = b == 0 ? loss : add(batch_loss, loss);
    }
    batch_loss = scale(batch_loss, 1.0f / static_cast<float>(tc.batch_size));
    opt.zero_grad();
    batch_loss.backward();
    opt.step();
    result.log.push_back({step, batch_loss.item(), -1.0f});
  }
  return result;
}

// ---- KTO ----

Tensor kto_loss(const Tensor& policy_logp, float ref_logp, bool desirable, float z0,
                const KtoConfig& kcfg) {
  kcfg.validate();
  if (policy_logp.size() != 1)
    throw ContractError("kto_loss: policy log-prob must be a scalar");
  if (!std::isfinite(policy_logp.item()) || !std::isfinite(ref_logp) || !std::isfinite(z0))
    throw ContractError("kto_loss: non-finite input");
  if (z0 < 0.0f) throw ContractError("kto_loss: z0 must be >= 0");

  // r = beta * (policy - ref)
  Tensor r = affine(policy_logp, kcfg.beta, -kcfg.beta * ref_logp);
  if (desirable) {
    // lambda_D * (1 - sigmoid(r - z0))
    return affine(sigmoid(affine(r, 1.0f, -z0)), -kcfg.lambda_desired, kcfg.lambda_desired);
  }
  // lambda_U * (1 - sigmoid(z0 - r))
  return affine(sigmoid(affine(r, -1.0f, z0)), -kcfg.lambda_undesired, kcfg.lambda_undesired);
}

namespace {

std::vector<int> preference_sequence(const PreferenceExample& ex) {
  if (ex.completion.empty()) throw ContractError("preference example: empty completion");
  std::vector<int> seq = ex.prompt;
  seq.insert(seq.end(), ex.completion.begin(), ex.completion.end());
  if (seq.size() < 2) throw ContractError("preference example: too short to score");
  return seq;
}

}  // namespace

Tensor policy_completion_logp(const TransformerWeights& w, const ModelConfig& cfg,
                              const PreferenceExample& ex) {
  const std::vector<int> seq = preference_sequence(ex);
  const int n = static_cast<int>(seq.size());
  const int plen = static_cast<int>(ex.prompt.size());
  ForwardOutput out = forward(w, cfg, seq);
  // Rows predicting completion tokens: start = max(plen-1, 0) (when the
  // prompt is empty the first completion token is unconditioned and skipped).
  const int start = std::max(plen - 1, 0);
  const int count = n - 1 - start;
  if (count < 1) throw ContractError("preference example: nothing to score");
  Tensor rows = slice_rows(out.logits, start, count);
  Tensor logps =
      log_softmax_gather(rows, std::span<const int>(seq).subspan(static_cast<size_t>(start + 1)));
  std::vector<float> ones(static_cast<size_t>(count), 1.0f);
  return weighted_sum(logps, ones);
}

std::vector<float> completion_token_logps(const TransformerWeights& w, const ModelConfig& cfg,
                                          const PreferenceExample& ex) {
  NoGradGuard ng;
  const std::vector<int> seq = preference_sequence(ex);
  const int n = static_cast<int>(seq.size());
  const int plen = static_cast<int>(ex.prompt.size());
  ForwardOutput out = forward(w, cfg, seq);
  const int start = std::max(plen - 1, 0);
  const int count = n - 1 - start;
  if (count < 1) throw ContractError("preference example: nothing to score");
  Tensor rows = slice_rows(out.logits, start, count);
  Tensor logps =
      log_softmax_gather(rows, std::span<const int>(seq).subspan(static_cast<size_t>(start + 1)));
  return std::vector<float>(logps.data().begin(), logps.data().end());
}

float sum_token_logps(const std::vector<float>& logps) {
  float s = 0.0f;
  for (float v : logps) s += v;
  return s;
}

float FrozenModelSource::completion_logp(const PreferenceExample& ex) {
  ++forwards_;
  return sum_token_logps(completion_token_logps(w_, cfg_, ex));
}

// ---- logit cache ----

namespace {
constexpr char kCacheMagic[8] = {'G', 'K', 'L', 'O', 'G', 'C', '0', '1'};
}

Sha256Digest LogitCache::make_key(const std::string& fingerprint, std::string_view example_id,
                                  std::span<const int> prompt, std::span<const int> completion) {
  Sha256 h;
  h.update(fingerprint);
  h.update(example_id);
  h.update_u64(prompt.size());
  for (int t : prompt) h.update_u64(static_cast<uint64_t>(static_cast<uint32_t>(t)));
  h.update_u64(completion.size());
  for (int t : completion) h.update_u64(static_cast<uint64_t>(static_cast<uint32_t>(t)));
  return h.finish();
}

LogitCache LogitCache::create(const std::string& path, const std::string& fingerprint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("logit cache: cannot create '{}'", path));
  out.write(kCacheMagic, 8);
  const uint32_t fl = static_cast<uint32_t>(fingerprint.size());
  out.write(reinterpret_cast<const char*>(&fl), 4);
  out.write(fingerprint.data(), fl);
  if (!out) throw IoError(fmt::format("logit cache: write to '{}' failed", path));
  LogitCache c;
  c.path_ = path;
  c.fingerprint_ = fingerprint;
  return c;
}

LogitCache LogitCache::open(const std::string& path, const std::string& expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("logit cache: cannot open '{}'", path));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCacheMagic, 8) != 0)
    throw CacheError(fmt::format("logit cache: '{}' is not a cache file", path));
  uint32_t fl = 0;
  in.read(reinterpret_cast<char*>(&fl), 4);
  std::string fp(fl, '\0');
  in.read(fp.data(), fl);
  if (!in) throw CacheError(fmt::format("logit cache: '{}' truncated header", path));
  if (fp != expected_fingerprint)
    throw CacheError(fmt::format(
        "logit cache: '{}' was built for model {} but the current model is {}", path,
        fp.substr(0, 12), expected_fingerprint.substr(0, 12)));

  LogitCache c;
  c.path_ = path;
  c.fingerprint_ = fp;
  while (true) {
    char key[32];
    in.read(key, 32);
    if (!in) break;
    uint32_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 4);
    std::vector<float> vals(n);
    in.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw CacheError(fmt::format("logit cache: '{}' truncated record", path));
    c.entries_[std::string(key, 32)] = std::move(vals);
  }
  return c;
}

bool LogitCache::contains(const Sha256Digest& key) const {
  return entries_.count(std::string(reinterpret_cast<const char*>(key.data()), 32)) > 0;
}

const std::vector<float>* LogitCache::get(const Sha256Digest& key) const {
  auto it = entries_.find(std::string(reinterpret_cast<const char*>(key.data()), 32));
  return it == entries_.end() ? nullptr : &it->second;
}

void LogitCache::put(const Sha256Digest& key, const std::vector<float>& logps) {
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw IoError(fmt::format("logit cache: cannot append to '{}'", path_));
  out.write(reinterpret_cast<const char*>(key.data()), 32);
  const uint32_t n = static_cast<uint32_t>(logps.size());
  out.write(reinterpret_cast<const char*>(&n), 4);
  out.write(reinterpret_cast<const char*>(logps.data()),
            static_cast<std::streamsize>(logps.size() * sizeof(float)));
  if (!out) throw IoError(fmt::format("logit cache: write to '{}' failed", path_));
  entries_[std::string(reinterpret_cast<const char*>(key.data()), 32)] = logps;
}

float CachedRefSource::completion_logp(const PreferenceExample& ex) {
  const Sha256Digest key = LogitCache::make_key(cache_.fingerprint(), "", ex.prompt, ex.completion);
  const std::vector<float>* logps = cache_.get(key);
  if (!logps)
    throw CacheError(
        "logit cache: missing entry for example (dataset changed since the cache was built?)");
  return sum_token_logps(*logps);
}

namespace {

PreferenceExample kl_pair(const std::vector<PreferenceExample>& dataset, size_t i) {
  PreferenceExample mis;
  mis.prompt = dataset[i].prompt;
  mis.completion = dataset[(i + 1) % dataset.size()].completion;
  return mis;
}

}  // namespace

std::string ref_cache_fingerprint(const TransformerWeights& w) {
  Sha256 h;
  h.update(weights_fingerprint(w));
  h.update(fmt::format("tokenizer=bytes-{}", kVocabSize));
  return hex(h.finish());
}

LogitCache cache_ref_logits(const TransformerWeights& w, const ModelConfig& cfg,
                            const std::vector<PreferenceExample>& dataset,
                            const std::string& store_path) {
  const std::string fp = ref_cache_fingerprint(w);
  LogitCache cache = LogitCache::create(store_path, fp);
  for (size_t i = 0; i < dataset.size(); ++i) {
    const PreferenceExample& ex = dataset[i];
    cache.put(LogitCache::make_key(fp, "", ex.prompt, ex.completion),
              completion_token_logps(w, cfg, ex));
    const PreferenceExample mis = kl_pair(dataset, i);
    const Sha256Digest mk = LogitCache::make_key(fp, "", mis.prompt, mis.completion);
    if (!cache.contains(mk)) cache.put(mk, completion_token_logps(w, cfg, mis));
  }
  return cache;
}

// ---- KTO training ----

json KtoStepMetrics::to_json() const {
  return json{{"step", step},
              {"loss", loss},
              {"z0", z0},
              {"mean_desirable_margin", mean_desirable_margin},
              {"mean_undesirable_margin", mean_undesirable_margin},
              {"n_desirable", n_desirable},
              {"n_undesirable", n_undesirable}};
}

std::vector<KtoStepMetrics> kto_train(TransformerWeights& w, const ModelConfig& cfg,
                                      const TrainConfig& tc, const KtoConfig& kcfg,
                                      const std::vector<PreferenceExample>& dataset,
                                      RefLogitSource& ref) {
  tc.validate();
  kcfg.validate();
  if (dataset.empty()) throw ContractError("kto: empty dataset");
  {
    bool any_d = false, any_u = false;
    for (const auto& ex : dataset) (ex.desirable ? any_d : any_u) = true;
    if (!any_d || !any_u)
      std::fprintf(stderr,
                   "kto: warning: dataset has only %s examples; z0 estimate degenerates\n",
                   any_d ? "desirable" : "undesirable");
  }

  std::vector<Tensor*> params;
  for (auto& [name, t] : named_parameters(w)) params.push_back(t);
  Optimizer opt(params, tc.optimizer, tc.learning_rate, tc.grad_clip);

  std::vector<size_t> order;
  size_t cursor = 0;
  int epoch = 0;
  auto next_index = [&] {
    if (cursor >= order.size()) {
      order.resize(dataset.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(derive_seed(tc.seed, fmt::format("kto.epoch{}", epoch++)));
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<KtoStepMetrics> log;
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<size_t> batch(static_cast<size_t>(tc.batch_size));
    for (auto& b : batch) b = next_index();

    // Batch KL reference point: mean of max(0, r) over the mismatched pairs
    // of the first reference_kl_batch minibatch examples, policy side
    // computed without gradients.
    const size_t kl_count =
        std::min(batch.size(), static_cast<size_t>(kcfg.reference_kl_batch));
    float z0_acc = 0.0f;
    for (size_t b = 0; b < kl_count; ++b) {
      const PreferenceExample mis = kl_pair(dataset, batch[b]);
      const float pol = sum_token_logps(completion_token_logps(w, cfg, mis));
      const float rref = ref.completion_logp(mis);
      z0_acc += std::max(0.0f, kcfg.beta * (pol - rref));
    }
    const float z0 = z0_acc / static_cast<float>(kl_count);

    Tensor batch_loss;
    KtoStepMetrics m;
    m.step = step;
    m.z0 = z0;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
      const PreferenceExample& ex = dataset[batch[bi]];
      Tensor pol = policy_completion_logp(w, cfg, ex);
      const float rref = ref.completion_logp(ex);
      Tensor loss = kto_loss(pol, rref, ex.desirable, z0, kcfg);
      const float margin = kcfg.beta * (pol.item() - rref);
      if (ex.desirable) {
        m.mean_desirable_margin += margin;
        ++m.n_desirable;
      } else {
        m.mean_undesirable_margin += margin;
        ++m.n_undesirable;
      }
      batch_loss = bi == 0 ? loss : add(batch_loss, loss);
    }
    batch_loss = scale(batch_loss, 1.0f / static_cast<float>(tc.batch_size));
    if (!std::isfinite(batch_loss.item()))
      throw ContractError(fmt::format("kto: non-finite loss at step {}", step));

    opt.zero_grad();
    batch_loss.backward();
    opt.step();

    m.loss = batch_loss.item();
    if (m.n_desirable > 0) m.mean_desirable_margin /= static_cast<float>(m.n_desirable);
    if (m.n_undesirable > 0) m.mean_undesirable_margin /= static_cast<float>(m.n_undesirable);
    log.push_back(m);
  }
  return log;
}

}  // namespace growkit
