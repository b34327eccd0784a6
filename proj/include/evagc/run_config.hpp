#ifndef EVAGC_RUN_CONFIG_HPP
#define EVAGC_RUN_CONFIG_HPP

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "evagc/classifier.hpp"
#include "evagc/event_io.hpp"
#include "evagc/pipeline.hpp"

namespace evagc {

std::array<std::uint8_t, 32> sha256_digest(const std::string& data);
std::string hex_string(const std::array<std::uint8_t, 32>& digest);

// Whole-run configuration: dataset, preprocessing, model and training.
// Serialized as JSON with alphabetically ordered keys, which makes the
// dump canonical and hashable.
struct RunConfig {
    std::string manifest;  // dataset manifest path
    std::uint64_t seed = 0;
    SynthConfig synth;
    SamplingConfig sampling;
    VoxelizationConfig voxel;
    double point_radius = 5.0;
    double voxel_radius = 2.0;
    ModelDims model;
    TrainConfig train;

    // Builds from defaults + optional JSON file + repeated key=value
    // overrides (e.g. "train.lr=0.01"). Unknown keys are rejected.
    static RunConfig load(const std::string& path, const std::vector<std::string>& overrides);

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);

    // Flat key -> default value (as JSON text), the documented schema.
    static std::vector<std::pair<std::string, std::string>> schema();

    // Hash of the full canonical form; stored in checkpoints.
    std::array<std::uint8_t, 32> canonical_hash() const;

    // Hash of the preprocessing-relevant subset (sampling, voxel, graph
    // radii, seed); keys the on-disk graph cache so training-only changes
    // do not invalidate it.
    std::string preprocess_cache_key() const;

    PipelineConfig pipeline() const;
};

} // namespace evagc

#endif
