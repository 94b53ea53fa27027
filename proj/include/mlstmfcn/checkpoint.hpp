#pragma once

#include <filesystem>
#include <utility>

#include "mlstmfcn/model.hpp"

namespace mlstmfcn {

// Allocates every parameter tensor for the configuration, zero-filled (batch
// norm scale and running variance start at one).
ModelParams allocate_params(const ModelConfig& config);

// Single self-describing binary container: magic, format version, the full
// configuration, then every parameter tensor under its canonical name with
// raw little-endian 64-bit values. Written atomically; a write-then-read
// round trip is bit-exact.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params);

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace mlstmfcn
