#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "growkit/tensor.hpp"

namespace growkit {

// Decoder geometry. Mirrors the usual Llama-family configuration surface:
// grouped-query attention, RMS pre-norm, SwiGLU FFN, rotary positions,
// untied input/output embeddings.
struct ModelConfig {
  int layers = 0;
  int model_dim = 0;
  int ffn_dim = 0;
  int attn_heads = 0;
  int kv_heads = 0;
  int vocab_size = 0;
  int head_dim = 0;
  float rope_base = 500000.0f;
  float rms_eps = 1e-5f;
  int max_seq = 2048;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Tensor attn_norm_gain;  // [d]
  Tensor q_proj;          // [d, H*hd]
  Tensor k_proj;          // [d, KV*hd]
  Tensor v_proj;          // [d, KV*hd]
  Tensor o_proj;          // [H*hd, d]
  Tensor ffn_norm_gain;   // [d]
  Tensor gate_proj;       // [d, f]
  Tensor up_proj;         // [d, f]
  Tensor down_proj;       // [f, d]
};

struct TransformerWeights {
  Tensor token_embedding;  // [V, d]
  std::vector<LayerWeights> layers;
  Tensor final_norm_gain;  // [d]
  Tensor output_head;      // [d, V]
};

// Canonical (name, tensor) view in a fixed order: token_embedding,
// layers.<i>.<field>..., final_norm_gain, output_head.
std::vector<std::pair<std::string, Tensor*>> named_parameters(TransformerWeights& w);
std::vector<std::pair<std::string, const Tensor*>> named_parameters(const TransformerWeights& w);

// Concrete multiplicative masks for a width-expanded model, one value per
// channel / attention head / FFN unit. Entries for pre-expansion units are
// always 1; newly added units ramp from 0 to 1 along the unmask schedule.
// With all new-unit masks at 0 the forward pass reproduces the base model
// bit-for-bit on the original subspace. The residual-stream channel mask is
// shared; head and FFN masks are per layer (they only differ when the
// unmask schedule is staggered).
struct MaskState {
  std::vector<float> channel;             // [model_dim]
  std::vector<std::vector<float>> head;   // [layers][attn_heads]
  std::vector<std::vector<float>> ffn;    // [layers][ffn_dim]
};

struct ForwardOptions {
  const MaskState* masks = nullptr;
  bool want_hiddens = false;
};

struct ForwardOutput {
  Tensor logits;                // [S, vocab]
  std::vector<Tensor> hiddens;  // per-layer residual stream, when requested
};

// Fresh weights: projections and embeddings ~ N(0, 0.02^2), norm gains 1.
// Deterministic in (config, seed); each tensor uses a name-derived substream.
TransformerWeights init_model(const ModelConfig& cfg, uint64_t seed);

// Causal decoder forward pass over one token sequence.
ForwardOutput forward(const TransformerWeights& w, const ModelConfig& cfg,
                      std::span<const int> token_ids, const ForwardOptions& opts = {});

// Same pass starting from already-built input embeddings [S, d] (used to
// inject NEFTune noise after the lookup).
ForwardOutput forward_from_embeddings(const TransformerWeights& w, const ModelConfig& cfg,
                                      const Tensor& embedded, const ForwardOptions& opts = {});

// Exact parameter total from the geometry alone.
int64_t count_params(const ModelConfig& cfg);

// Mean next-token cross entropy: logits[0..n-1) scored against ids[1..n).
Tensor loss_next_token(const TransformerWeights& w, const ModelConfig& cfg,
                       std::span<const int> token_ids, const ForwardOptions& opts = {});

}  // namespace growkit
