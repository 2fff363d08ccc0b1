#pragma once

#include <json.hpp>
#include <string>

#include "growkit/model.hpp"

namespace growkit {

// Checkpoint file layout:
//   [u64 little-endian manifest length][manifest JSON][raw tensor data]
// The manifest carries the ModelConfig and one {name, shape, dtype, offset}
// entry per tensor, offsets relative to the start of the data section.
// Tensors are stored in canonical named_parameters() order as little-endian
// float32, so save -> load -> save is byte-identical.

void save_checkpoint(const std::string& path, const TransformerWeights& w,
                     const ModelConfig& cfg);

struct LoadedCheckpoint {
  ModelConfig config;
  TransformerWeights weights;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// SHA-256 over names, shapes and raw values of all parameters. Identifies
// the exact model content (used by the reference-logit cache).
std::string weights_fingerprint(const TransformerWeights& w);

}  // namespace growkit
