#include "growkit/checkpoint.hpp"

#include <fmt/format.h>

#include <cstring>
#include <fstream>

#include "growkit/hash.hpp"

namespace growkit {

using nlohmann::json;

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"layers", cfg.layers},
              {"model_dim", cfg.model_dim},
              {"ffn_dim", cfg.ffn_dim},
              {"attn_heads", cfg.attn_heads},
              {"kv_heads", cfg.kv_heads},
              {"vocab_size", cfg.vocab_size},
              {"head_dim", cfg.head_dim},
              {"rope_base", cfg.rope_base},
              {"rms_eps", cfg.rms_eps},
              {"max_seq", cfg.max_seq}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.layers = j.at("layers").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.attn_heads = j.at("attn_heads").get<int>();
  cfg.kv_heads = j.at("kv_heads").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.head_dim = j.at("head_dim").get<int>();
  cfg.rope_base = j.at("rope_base").get<float>();
  cfg.rms_eps = j.at("rms_eps").get<float>();
  cfg.max_seq = j.at("max_seq").get<int>();
  cfg.validate();
  return cfg;
}

void save_checkpoint(const std::string& path, const TransformerWeights& w,
                     const ModelConfig& cfg) {
  const auto params = named_parameters(w);

  json tensors = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    tensors.push_back({{"name", name},
                       {"shape", t->shape()},
                       {"dtype", "f32"},
                       {"offset", offset}});
    offset += static_cast<uint64_t>(t->size()) * sizeof(float);
  }
  json manifest{{"config", model_config_to_json(cfg)}, {"tensors", tensors}};
  const std::string mstr = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("checkpoint: cannot open '{}' for writing", path));
  uint8_t lenbuf[8];
  const uint64_t mlen = mstr.size();
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<uint8_t>(mlen >> (8 * i));
  out.write(reinterpret_cast<const char*>(lenbuf), 8);
  out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& [name, t] : params) {
    out.write(reinterpret_cast<const char*>(t->data().data()),
              static_cast<std::streamsize>(t->size() * sizeof(float)));
  }
  if (!out) throw IoError(fmt::format("checkpoint: write to '{}' failed", path));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("checkpoint: cannot open '{}'", path));
  uint8_t lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  if (!in) throw IoError(fmt::format("checkpoint: '{}' truncated", path));
  uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw IoError(fmt::format("checkpoint: '{}' truncated manifest", path));

  json manifest = json::parse(mstr);
  LoadedCheckpoint ck;
  ck.config = model_config_from_json(manifest.at("config"));

  // Rebuild the weight structure, then fill tensors by manifest name.
  ck.weights.layers.resize(static_cast<size_t>(ck.config.layers));
  auto params = named_parameters(ck.weights);

  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size())
    throw IoError(fmt::format("checkpoint: '{}' has {} tensors, config wants {}", path,
                              tensors.size(), params.size()));
  const std::streampos data_start = in.tellg();
  size_t idx = 0;
  for (const auto& entry : tensors) {
    const std::string name = entry.at("name").get<std::string>();
    if (name != params[idx].first)
      throw IoError(fmt::format("checkpoint: tensor '{}' out of order, expected '{}'", name,
                                params[idx].first));
    if (entry.at("dtype").get<std::string>() != "f32")
      throw IoError(fmt::format("checkpoint: tensor '{}' has unsupported dtype", name));
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<float> buf(static_cast<size_t>(n));
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError(fmt::format("checkpoint: '{}' truncated at tensor '{}'", path, name));
    *params[idx].second = Tensor::from_data(shape, std::move(buf), /*requires_grad=*/true);
    ++idx;
  }
  return ck;
}

std::string weights_fingerprint(const TransformerWeights& w) {
  Sha256 h;
  for (const auto& [name, t] : named_parameters(w)) {
    h.update(name);
    for (int d : t->shape()) h.update_u64(static_cast<uint64_t>(d));
    h.update_floats(t->data());
  }
  return hex(h.finish());
}

}  // namespace growkit
