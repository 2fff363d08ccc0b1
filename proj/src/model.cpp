#include "growkit/model.hpp"

#include <fmt/format.h>

#include <cmath>

namespace growkit {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(fmt::format("config: {} must be positive, got {}", name, v));
  };
  positive(layers, "layers");
  positive(model_dim, "model_dim");
  positive(ffn_dim, "ffn_dim");
  positive(attn_heads, "attn_heads");
  positive(kv_heads, "kv_heads");
  positive(vocab_size, "vocab_size");
  positive(head_dim, "head_dim");
  positive(max_seq, "max_seq");
  if (model_dim != attn_heads * head_dim)
    throw ConfigError(fmt::format("config: model_dim {} != attn_heads {} * head_dim {}",
                                  model_dim, attn_heads, head_dim));
  if (attn_heads % kv_heads != 0)
    throw ConfigError(fmt::format("config: attn_heads {} not divisible by kv_heads {}",
                                  attn_heads, kv_heads));
  if (head_dim % 2 != 0)
    throw ConfigError(fmt::format("config: head_dim {} must be even", head_dim));
  if (rope_base <= 0.0f) throw ConfigError("config: rope_base must be positive");
  if (rms_eps < 0.0f) throw ConfigError("config: rms_eps must be non-negative");
}

namespace {

template <typename W, typename T>
std::vector<std::pair<std::string, T*>> named_params_impl(W& w) {
  std::vector<std::pair<std::string, T*>> out;
  out.emplace_back("token_embedding", &w.token_embedding);
  for (size_t i = 0; i < w.layers.size(); ++i) {
    auto& L = w.layers[i];
    const std::string p = fmt::format("layers.{}.", i);
    out.emplace_back(p + "attn_norm_gain", &L.attn_norm_gain);
    out.emplace_back(p + "q_proj", &L.q_proj);
    out.emplace_back(p + "k_proj", &L.k_proj);
    out.emplace_back(p + "v_proj", &L.v_proj);
    out.emplace_back(p + "o_proj", &L.o_proj);
    out.emplace_back(p + "ffn_norm_gain", &L.ffn_norm_gain);
    out.emplace_back(p + "gate_proj", &L.gate_proj);
    out.emplace_back(p + "up_proj", &L.up_proj);
    out.emplace_back(p + "down_proj", &L.down_proj);
  }
  out.emplace_back("final_norm_gain", &w.final_norm_gain);
  out.emplace_back("output_head", &w.output_head);
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> named_parameters(TransformerWeights& w) {
  return named_params_impl<TransformerWeights, Tensor>(w);
}

std::vector<std::pair<std::string, const Tensor*>> named_parameters(const TransformerWeights& w) {
  return named_params_impl<const TransformerWeights, const Tensor>(w);
}

TransformerWeights init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  const float std = 0.02f;
  auto randn = [&](std::vector<int> shape, const std::string& name) {
    Rng rng(derive_seed(seed, "init." + name));
    return Tensor::randn(std::move(shape), rng, std, /*requires_grad=*/true);
  };
  auto gain = [&](std::vector<int> shape) {
    Tensor t = Tensor::ones(std::move(shape));
    t.set_requires_grad();
    return t;
  };

  const int d = cfg.model_dim, hd = cfg.head_dim;
  TransformerWeights w;
  w.token_embedding = randn({cfg.vocab_size, d}, "token_embedding");
  w.layers.resize(static_cast<size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) {
    auto& L = w.layers[static_cast<size_t>(i)];
    const std::string p = fmt::format("layers.{}.", i);
    L.attn_norm_gain = gain({d});
    L.q_proj = randn({d, cfg.attn_heads * hd}, p + "q_proj");
    L.k_proj = randn({d, cfg.kv_heads * hd}, p + "k_proj");
    L.v_proj = randn({d, cfg.kv_heads * hd}, p + "v_proj");
    L.o_proj = randn({cfg.attn_heads * hd, d}, p + "o_proj");
    L.ffn_norm_gain = gain({d});
    L.gate_proj = randn({d, cfg.ffn_dim}, p + "gate_proj");
    L.up_proj = randn({d, cfg.ffn_dim}, p + "up_proj");
    L.down_proj = randn({cfg.ffn_dim, d}, p + "down_proj");
  }
  w.final_norm_gain = gain({d});
  w.output_head = randn({d, cfg.vocab_size}, "output_head");
  return w;
}

namespace {

Tensor norm_maybe_masked(const Tensor& x, const Tensor& g, const ModelConfig& cfg,
                         const MaskState* masks) {
  if (masks) return rms_norm_masked(x, g, masks->channel, cfg.rms_eps);
  return rms_norm(x, g, cfg.rms_eps);
}

}  // namespace

ForwardOutput forward_from_embeddings(const TransformerWeights& w, const ModelConfig& cfg,
                                      const Tensor& embedded, const ForwardOptions& opts) {
  const int S = embedded.dim(0);
  if (embedded.ndim() != 2 || embedded.dim(1) != cfg.model_dim)
    throw DimensionError(fmt::format("forward: embeddings {} do not match model_dim {}",
                                     embedded.shape_str(), cfg.model_dim));
  if (S > cfg.max_seq)
    throw ContractError(
        fmt::format("forward: sequence length {} exceeds max_seq {}", S, cfg.max_seq));
  const MaskState* masks = opts.masks;
  const int H = cfg.attn_heads, KV = cfg.kv_heads, hd = cfg.head_dim;
  const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

  if (masks && (masks->head.size() != w.layers.size() || masks->ffn.size() != w.layers.size()))
    throw DimensionError("forward: mask state does not cover every layer");

  ForwardOutput out;
  Tensor h = masks ? scale_channels(embedded, masks->channel) : embedded;
  for (size_t li = 0; li < w.layers.size(); ++li) {
    const LayerWeights& L = w.layers[li];
    // attention
    Tensor xn = norm_maybe_masked(h, L.attn_norm_gain, cfg, masks);
    Tensor q = rope_apply(reshape(matmul(xn, L.q_proj), {S, H, hd}), cfg.rope_base);
    Tensor k = rope_apply(reshape(matmul(xn, L.k_proj), {S, KV, hd}), cfg.rope_base);
    Tensor v = reshape(matmul(xn, L.v_proj), {S, KV, hd});
    Tensor qh = permute_102(q);  // [H,S,hd]
    Tensor kh = permute_102(k);  // [KV,S,hd]
    Tensor vh = permute_102(v);
    if (KV != H) {
      kh = repeat_interleave0(kh, H / KV);
      vh = repeat_interleave0(vh, H / KV);
    }
    Tensor scores = scale(bmm(qh, transpose_last2(kh)), inv_sqrt_hd);  // [H,S,S]
    Tensor attn = permute_102(bmm(causal_softmax(scores), vh));        // [S,H,hd]
    if (masks) attn = scale_heads(attn, masks->head[li]);
    Tensor o = matmul(reshape(attn, {S, H * hd}), L.o_proj);
    if (masks) o = scale_channels(o, masks->channel);
    h = add(h, o);

    // feedforward
    Tensor fn = norm_maybe_masked(h, L.ffn_norm_gain, cfg, masks);
    Tensor ff = mul(silu(matmul(fn, L.gate_proj)), matmul(fn, L.up_proj));
    if (masks) ff = scale_channels(ff, masks->ffn[li]);
    Tensor down = matmul(ff, L.down_proj);
    if (masks) down = scale_channels(down, masks->channel);
    h = add(h, down);

    if (opts.want_hiddens) out.hiddens.push_back(h.detach());
  }

  Tensor fin = norm_maybe_masked(h, w.final_norm_gain, cfg, masks);
  out.logits = matmul(fin, w.output_head);
  return out;
}

ForwardOutput forward(const TransformerWeights& w, const ModelConfig& cfg,
                      std::span<const int> token_ids, const ForwardOptions& opts) {
  if (token_ids.empty()) throw ContractError("forward: empty token sequence");
  if (static_cast<int>(token_ids.size()) > cfg.max_seq)
    throw ContractError(fmt::format("forward: sequence length {} exceeds max_seq {}",
                                    token_ids.size(), cfg.max_seq));
  for (size_t i = 0; i < token_ids.size(); ++i)
    if (token_ids[i] < 0 || token_ids[i] >= cfg.vocab_size)
      throw IndexError(fmt::format("forward: token id {} at position {} out of range [0,{})",
                                   token_ids[i], i, cfg.vocab_size));
  return forward_from_embeddings(w, cfg, embedding(w.token_embedding, token_ids), opts);
}

int64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.model_dim, f = cfg.ffn_dim, v = cfg.vocab_size;
  const int64_t qo = static_cast<int64_t>(cfg.attn_heads) * cfg.head_dim;
  const int64_t kv = static_cast<int64_t>(cfg.kv_heads) * cfg.head_dim;
  const int64_t per_layer = d * qo      // q_proj
                            + 2 * d * kv  // k_proj, v_proj
                            + qo * d      // o_proj
                            + 3 * d * f   // gate, up, down
                            + 2 * d;      // norm gains
  return 2 * v * d + cfg.layers * per_layer + d;
}

Tensor loss_next_token(const TransformerWeights& w, const ModelConfig& cfg,
                       std::span<const int> token_ids, const ForwardOptions& opts) {
  const int n = static_cast<int>(token_ids.size());
  if (n < 2)
    throw ContractError(fmt::format("loss_next_token: need at least 2 tokens, got {}", n));
  ForwardOutput out = forward(w, cfg, token_ids, opts);
  return cross_entropy(slice_rows(out.logits, 0, n - 1), token_ids.subspan(1));
}

}  // namespace growkit
