#pragma once

// Independent reference implementations used as test oracles. Everything in
// here is written straight-line against the math, without touching the
// library's autodiff or fused kernels, so the two sides can disagree.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Plain triple-loop matrix product, row-major.
inline std::vector<float> matmul(const std::vector<float>& a, const std::vector<float>& b,
                                 int m, int k, int n) {
  std::vector<float> c(static_cast<size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int p = 0; p < k; ++p)
        acc += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
      c[static_cast<size_t>(i) * n + j] = acc;
    }
  return c;
}

inline std::vector<float> softmax_row(const std::vector<float>& x) {
  float mx = x[0];
  for (float v : x) mx = std::max(mx, v);
  std::vector<float> out(x.size());
  float denom = 0.0f;
  for (size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    denom += out[i];
  }
  for (float& v : out) v /= denom;
  return out;
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Reference decoder forward pass for one pre-norm block plus embeddings and
// output head: grouped-query attention with rotary positions, RMS norm,
// SwiGLU. Written with explicit loops over positions and heads.
struct RefLayer {
  std::vector<float> attn_norm_gain;  // [d]
  std::vector<float> q_proj;          // [d, H*hd]
  std::vector<float> k_proj;          // [d, KV*hd]
  std::vector<float> v_proj;          // [d, KV*hd]
  std::vector<float> o_proj;          // [H*hd, d]
  std::vector<float> ffn_norm_gain;   // [d]
  std::vector<float> gate_proj;       // [d, f]
  std::vector<float> up_proj;         // [d, f]
  std::vector<float> down_proj;       // [f, d]
};

struct RefModel {
  int layers, d, f, heads, kv_heads, head_dim, vocab;
  float rope_base, eps;
  std::vector<float> token_embedding;  // [V, d]
  std::vector<RefLayer> layer;
  std::vector<float> final_norm_gain;  // [d]
  std::vector<float> output_head;      // [d, V]
};

inline std::vector<float> ref_rms_norm(const std::vector<float>& x,
                                       const std::vector<float>& gain, float eps) {
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float r = std::sqrt(ss / static_cast<float>(x.size()) + eps);
  std::vector<float> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * x[i] / r;
  return out;
}

inline void ref_rope(std::vector<float>& v, int pos, int head_dim, float base) {
  for (int p = 0; p < head_dim / 2; ++p) {
    const double theta = std::pow(static_cast<double>(base), -2.0 * p / head_dim);
    const double ang = pos * theta;
    const float c = static_cast<float>(std::cos(ang));
    const float s = static_cast<float>(std::sin(ang));
    const float a = v[static_cast<size_t>(2 * p)], b = v[static_cast<size_t>(2 * p + 1)];
    v[static_cast<size_t>(2 * p)] = a * c - b * s;
    v[static_cast<size_t>(2 * p + 1)] = a * s + b * c;
  }
}

// Returns logits [S, V].
inline std::vector<float> ref_forward(const RefModel& m, const std::vector<int>& ids) {
  const int S = static_cast<int>(ids.size());
  const int d = m.d, hd = m.head_dim, H = m.heads, KV = m.kv_heads;
  std::vector<std::vector<float>> h(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s)
    h[static_cast<size_t>(s)] =
        std::vector<float>(m.token_embedding.begin() + static_cast<size_t>(ids[s]) * d,
                           m.token_embedding.begin() + static_cast<size_t>(ids[s] + 1) * d);

  for (const RefLayer& L : m.layer) {
    // attention
    std::vector<std::vector<float>> q(static_cast<size_t>(S)), k(static_cast<size_t>(S)),
        v(static_cast<size_t>(S));
    for (int s = 0; s < S; ++s) {
      auto xn = ref_rms_norm(h[static_cast<size_t>(s)], L.attn_norm_gain, m.eps);
      q[static_cast<size_t>(s)].assign(static_cast<size_t>(H) * hd, 0.0f);
      k[static_cast<size_t>(s)].assign(static_cast<size_t>(KV) * hd, 0.0f);
      v[static_cast<size_t>(s)].assign(static_cast<size_t>(KV) * hd, 0.0f);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < H * hd; ++j)
          q[static_cast<size_t>(s)][static_cast<size_t>(j)] +=
              xn[static_cast<size_t>(i)] * L.q_proj[static_cast<size_t>(i) * H * hd + j];
        for (int j = 0; j < KV * hd; ++j) {
          k[static_cast<size_t>(s)][static_cast<size_t>(j)] +=
              xn[static_cast<size_t>(i)] * L.k_proj[static_cast<size_t>(i) * KV * hd + j];
          v[static_cast<size_t>(s)][static_cast<size_t>(j)] +=
              xn[static_cast<size_t>(i)] * L.v_proj[static_cast<size_t>(i) * KV * hd + j];
        }
      }
      for (int hh = 0; hh < H; ++hh) {
        std::vector<float> qh(q[static_cast<size_t>(s)].begin() + static_cast<size_t>(hh) * hd,
                              q[static_cast<size_t>(s)].begin() + static_cast<size_t>(hh + 1) * hd);
        ref_rope(qh, s, hd, m.rope_base);
        std::copy(qh.begin(), qh.end(),
                  q[static_cast<size_t>(s)].begin() + static_cast<size_t>(hh) * hd);
      }
      for (int g = 0; g < KV; ++g) {
        std::vector<float> kh(k[static_cast<size_t>(s)].begin() + static_cast<size_t>(g) * hd,
                              k[static_cast<size_t>(s)].begin() + static_cast<size_t>(g + 1) * hd);
        ref_rope(kh, s, hd, m.rope_base);
        std::copy(kh.begin(), kh.end(),
                  k[static_cast<size_t>(s)].begin() + static_cast<size_t>(g) * hd);
      }
    }
    for (int s = 0; s < S; ++s) {
      std::vector<float> attn_out(static_cast<size_t>(H) * hd, 0.0f);
      for (int hh = 0; hh < H; ++hh) {
        const int g = hh / (H / KV);
        std::vector<float> scores(static_cast<size_t>(s) + 1);
        for (int t = 0; t <= s; ++t) {
          float dot = 0.0f;
          for (int c = 0; c < hd; ++c)
            dot += q[static_cast<size_t>(s)][static_cast<size_t>(hh) * hd + c] *
                   k[static_cast<size_t>(t)][static_cast<size_t>(g) * hd + c];
          scores[static_cast<size_t>(t)] = dot / std::sqrt(static_cast<float>(hd));
        }
        auto p = softmax_row(scores);
        for (int t = 0; t <= s; ++t)
          for (int c = 0; c < hd; ++c)
            attn_out[static_cast<size_t>(hh) * hd + c] +=
                p[static_cast<size_t>(t)] * v[static_cast<size_t>(t)][static_cast<size_t>(g) * hd + c];
      }
      for (int i = 0; i < d; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < H * hd; ++j)
          acc += attn_out[static_cast<size_t>(j)] * L.o_proj[static_cast<size_t>(j) * d + i];
        h[static_cast<size_t>(s)][static_cast<size_t>(i)] += acc;
      }
    }
    // ffn
    for (int s = 0; s < S; ++s) {
      auto xn = ref_rms_norm(h[static_cast<size_t>(s)], L.ffn_norm_gain, m.eps);
      std::vector<float> gate(static_cast<size_t>(m.f), 0.0f), up(static_cast<size_t>(m.f), 0.0f);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < m.f; ++j) {
          gate[static_cast<size_t>(j)] +=
              xn[static_cast<size_t>(i)] * L.gate_proj[static_cast<size_t>(i) * m.f + j];
          up[static_cast<size_t>(j)] +=
              xn[static_cast<size_t>(i)] * L.up_proj[static_cast<size_t>(i) * m.f + j];
        }
      for (int j = 0; j < m.f; ++j)
        gate[static_cast<size_t>(j)] =
            gate[static_cast<size_t>(j)] * sigmoid(gate[static_cast<size_t>(j)]) * up[static_cast<size_t>(j)];
      for (int i = 0; i < d; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < m.f; ++j)
          acc += gate[static_cast<size_t>(j)] * L.down_proj[static_cast<size_t>(j) * d + i];
        h[static_cast<size_t>(s)][static_cast<size_t>(i)] += acc;
      }
    }
  }

  std::vector<float> logits(static_cast<size_t>(S) * m.vocab, 0.0f);
  for (int s = 0; s < S; ++s) {
    auto xn = ref_rms_norm(h[static_cast<size_t>(s)], m.final_norm_gain, m.eps);
    for (int i = 0; i < d; ++i)
      for (int vv = 0; vv < m.vocab; ++vv)
        logits[static_cast<size_t>(s) * m.vocab + vv] +=
            xn[static_cast<size_t>(i)] * m.output_head[static_cast<size_t>(i) * m.vocab + vv];
  }
  return logits;
}

}  // namespace oracle
