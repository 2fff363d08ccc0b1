#include <doctest.h>

#include <cmath>
#include <fstream>
#include <vector>

#include "growkit/checkpoint.hpp"
#include "growkit/model.hpp"
#include "oracles.hpp"
#include "toy_models.hpp"

using namespace growkit;

namespace {

using testutil::toy_config;

oracle::RefModel to_ref(const TransformerWeights& w, const ModelConfig& cfg) {
  oracle::RefModel m;
  m.layers = cfg.layers;
  m.d = cfg.model_dim;
  m.f = cfg.ffn_dim;
  m.heads = cfg.attn_heads;
  m.kv_heads = cfg.kv_heads;
  m.head_dim = cfg.head_dim;
  m.vocab = cfg.vocab_size;
  m.rope_base = cfg.rope_base;
  m.eps = cfg.rms_eps;
  auto vec = [](const Tensor& t) {
    return std::vector<float>(t.data().begin(), t.data().end());
  };
  m.token_embedding = vec(w.token_embedding);
  for (const auto& L : w.layers) {
    oracle::RefLayer r;
    r.attn_norm_gain = vec(L.attn_norm_gain);
    r.q_proj = vec(L.q_proj);
    r.k_proj = vec(L.k_proj);
    r.v_proj = vec(L.v_proj);
    r.o_proj = vec(L.o_proj);
    r.ffn_norm_gain = vec(L.ffn_norm_gain);
    r.gate_proj = vec(L.gate_proj);
    r.up_proj = vec(L.up_proj);
    r.down_proj = vec(L.down_proj);
    m.layer.push_back(std::move(r));
  }
  m.final_norm_gain = vec(w.final_norm_gain);
  m.output_head = vec(w.output_head);
  return m;
}

std::vector<float> dump_weights(const TransformerWeights& w) {
  std::vector<float> all;
  for (const auto& [name, t] : named_parameters(w))
    all.insert(all.end(), t->data().begin(), t->data().end());
  return all;
}

}  // namespace

TEST_CASE("init_model is deterministic and gains start at one") {
  const ModelConfig cfg = toy_config(2);
  TransformerWeights a = init_model(cfg, 42);
  TransformerWeights b = init_model(cfg, 42);
  CHECK(dump_weights(a) == dump_weights(b));

  TransformerWeights c = init_model(cfg, 43);
  CHECK(dump_weights(a) != dump_weights(c));

  for (float v : a.layers[0].attn_norm_gain.data()) CHECK(v == 1.0f);
  for (float v : a.final_norm_gain.data()) CHECK(v == 1.0f);

  ModelConfig bad = cfg;
  bad.model_dim = 12;  // != heads * head_dim
  CHECK_THROWS_AS(init_model(bad, 1), ConfigError);
}

TEST_CASE("count_params: flagship geometry lands on 102B within 2%") {
  ModelConfig cfg;
  cfg.layers = 96;
  cfg.model_dim = 9216;
  cfg.ffn_dim = 30720;
  cfg.attn_heads = 72;
  cfg.kv_heads = 8;
  cfg.vocab_size = 128000;
  cfg.head_dim = 128;
  const double total = static_cast<double>(count_params(cfg));
  CHECK(std::fabs(total - 102e9) / 102e9 <= 0.02);
}

TEST_CASE("count_params equals summed tensor sizes and is linear in vocab") {
  ModelConfig cfg = toy_config(2, 16, 4, 2, 32, 64);
  TransformerWeights w = init_model(cfg, 7);
  int64_t actual = 0;
  for (const auto& [name, t] : named_parameters(w)) actual += t->size();
  CHECK(count_params(cfg) == actual);

  ModelConfig doubled = cfg;
  doubled.vocab_size *= 2;
  const int64_t d = cfg.model_dim;
  CHECK(count_params(doubled) - count_params(cfg) == 2 * int64_t(cfg.vocab_size) * d);
}

TEST_CASE("forward: shapes, causality, bounds") {
  const ModelConfig cfg = toy_config(2);
  TransformerWeights w = init_model(cfg, 3);
  std::vector<int> ids{5, 9, 1, 30, 2, 17};
  NoGradGuard ng;
  ForwardOutput out = forward(w, cfg, ids);
  CHECK(out.logits.shape() == std::vector<int>{6, cfg.vocab_size});

  // Changing a later token leaves logits at earlier positions bit-identical.
  std::vector<int> ids2 = ids;
  ids2[4] = 8;
  ForwardOutput out2 = forward(w, cfg, ids2);
  for (int s = 0; s < 4; ++s)
    for (int v = 0; v < cfg.vocab_size; ++v) {
      const size_t i = static_cast<size_t>(s) * cfg.vocab_size + v;
      CHECK(out.logits.data()[i] == out2.logits.data()[i]);
    }

  std::vector<int> bad{5, cfg.vocab_size};
  CHECK_THROWS_AS(forward(w, cfg, bad), IndexError);
  std::vector<int> toolong(static_cast<size_t>(cfg.max_seq) + 1, 1);
  CHECK_THROWS_AS(forward(w, cfg, toolong), ContractError);
}

TEST_CASE("forward matches the straight-line oracle") {
  const ModelConfig cfg = toy_config(1, 8, 2, 1, 16, 32);
  TransformerWeights w = init_model(cfg, 11);
  // Inflate weights so the comparison is not trivially near zero.
  for (auto& [name, t] : named_parameters(w))
    for (float& v : t->raw()) v *= 5.0f;

  std::vector<int> ids{3, 14, 7, 7, 31, 0, 22};
  NoGradGuard ng;
  ForwardOutput out = forward(w, cfg, ids);
  auto expect = oracle::ref_forward(to_ref(w, cfg), ids);
  REQUIRE(out.logits.data().size() == expect.size());
  float worst = 0.0f;
  for (size_t i = 0; i < expect.size(); ++i)
    worst = std::max(worst, std::fabs(out.logits.data()[i] - expect[i]));
  CHECK(worst <= 1e-5f);
}

TEST_CASE("GQA with kv_heads == attn_heads reduces to standard MHA") {
  const ModelConfig cfg = toy_config(2, 12, 3, 3, 24, 40);
  TransformerWeights w = init_model(cfg, 19);
  std::vector<int> ids{1, 2, 3, 4, 5, 6, 7, 8};
  NoGradGuard ng;
  ForwardOutput out = forward(w, cfg, ids);
  auto expect = oracle::ref_forward(to_ref(w, cfg), ids);
  float worst = 0.0f;
  for (size_t i = 0; i < expect.size(); ++i)
    worst = std::max(worst, std::fabs(out.logits.data()[i] - expect[i]));
  CHECK(worst <= 1e-6f);
}

TEST_CASE("forward never mutates weights") {
  const ModelConfig cfg = toy_config(2);
  TransformerWeights w = init_model(cfg, 5);
  const std::string before = weights_fingerprint(w);
  std::vector<int> ids{1, 2, 3, 4};
  forward(w, cfg, ids);
  loss_next_token(w, cfg, ids);
  CHECK(weights_fingerprint(w) == before);
}

TEST_CASE("loss_next_token: uniform logits give ln V, manual 3-token oracle") {
  const ModelConfig cfg = toy_config(1);
  // All-zero weights: logits are identically zero -> uniform distribution.
  TransformerWeights zero = init_model(cfg, 1);
  for (auto& [name, t] : named_parameters(zero))
    for (float& v : t->raw()) v = 0.0f;
  std::vector<int> ids{4, 9, 2};
  NoGradGuard ng;
  CHECK(loss_next_token(zero, cfg, ids).item() ==
        doctest::Approx(std::log(static_cast<float>(cfg.vocab_size))).epsilon(1e-6));

  TransformerWeights w = init_model(cfg, 9);
  const float loss = loss_next_token(w, cfg, ids).item();
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0f);

  // Manual per-position computation from the oracle forward.
  auto logits = oracle::ref_forward(to_ref(w, cfg), ids);
  float manual = 0.0f;
  for (int t = 0; t < 2; ++t) {
    std::vector<float> row(logits.begin() + t * cfg.vocab_size,
                           logits.begin() + (t + 1) * cfg.vocab_size);
    auto p = oracle::softmax_row(row);
    manual += -std::log(p[static_cast<size_t>(ids[static_cast<size_t>(t) + 1])]);
  }
  manual /= 2.0f;
  CHECK(loss == doctest::Approx(manual).epsilon(1e-5));

  std::vector<int> one{3};
  CHECK_THROWS_AS(loss_next_token(w, cfg, one), ContractError);
}

TEST_CASE("full transformer loss passes the finite-difference check") {
  const ModelConfig cfg = toy_config(1, 8, 2, 1, 16, 32);
  TransformerWeights w = testutil::conditioned_model(cfg, 23);
  std::vector<int> ids{3, 1, 4, 1, 5, 9, 2, 6};

  auto check_param = [&](Tensor TransformerWeights::* field) {
    TransformerWeights probe = w;
    auto f = [&](const Tensor& t) {
      probe.*field = t;
      return loss_next_token(probe, cfg, ids);
    };
    return grad_check(f, w.*field, {.h = 1e-2f, .max_coords = 8, .seed = 17, .atol = 5e-2f});
  };
  CHECK(check_param(&TransformerWeights::output_head) <= 1e-3f);
  CHECK(check_param(&TransformerWeights::final_norm_gain) <= 1e-3f);
  CHECK(check_param(&TransformerWeights::token_embedding) <= 1e-3f);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  const ModelConfig cfg = toy_config(2, 16, 4, 2, 32, 64);
  TransformerWeights w = init_model(cfg, 77);
  const std::string p1 = "/tmp/growkit_test_ck1.bin";
  const std::string p2 = "/tmp/growkit_test_ck2.bin";
  save_checkpoint(p1, w, cfg);
  LoadedCheckpoint ck = load_checkpoint(p1);
  CHECK(ck.config == cfg);
  CHECK(dump_weights(ck.weights) == dump_weights(w));
  save_checkpoint(p2, ck.weights, ck.config);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);
  CHECK(!c1.empty());

  CHECK_THROWS_AS(load_checkpoint("/tmp/growkit_missing_ck.bin"), IoError);
}
