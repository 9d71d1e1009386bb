#pragma once

#include <filesystem>

#include <json.hpp>

#include "cotlab/model.hpp"

namespace cotlab {

// Bundle layout: <dir>/manifest.json plus <dir>/params.bin holding every
// array as raw little-endian float64 in manifest order. Loads are bit-exact.
void save_array_bundle(const std::filesystem::path& dir, const std::string& kind,
                       nlohmann::ordered_json extra,
                       const std::vector<std::pair<std::string, const Tensor*>>& arrays);

nlohmann::ordered_json read_bundle_manifest(const std::filesystem::path& dir,
                                            const std::string& kind);

// Fills pre-shaped tensors by name; missing arrays, extra arrays, shape or
// size mismatches raise validation errors.
void load_array_bundle(const std::filesystem::path& dir, const std::string& kind,
                       const std::vector<std::pair<std::string, Tensor*>>& arrays);

void save_model_checkpoint(const std::filesystem::path& dir, const Model& m,
                           const std::string& config_echo, uint64_t seed);

// Reconstructs the model from manifest dimensions, then loads weights.
Model load_model_checkpoint(const std::filesystem::path& dir);

}  // namespace cotlab
