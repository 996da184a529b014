#pragma once

// Weights file: little-endian binary.
//   "RADW"  u32 version  u8 arch  u32 layer_count
//   per layer: u32 Co, u32 Ci, u32 K, u32 K, Co*Ci*K*K f32 weights, Co f32 bias

#include <filesystem>

#include "rad/toynet/model.hpp"

namespace rad::toynet {

inline constexpr std::uint32_t kWeightsVersion = 1;

void save_model(const std::filesystem::path& path, const Model& model);
// Errors: missing file, bad magic/version, layer dims not matching the arch.
Model load_model(const std::filesystem::path& path);

}  // namespace rad::toynet
