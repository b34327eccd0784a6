#ifndef EVAGC_PIPELINE_HPP
#define EVAGC_PIPELINE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "evagc/classifier.hpp"
#include "evagc/event_io.hpp"
#include "evagc/sampling.hpp"
#include "evagc/voxelizer.hpp"

namespace evagc {

struct PipelineConfig {
    SamplingConfig sampling;
    VoxelizationConfig voxel;
    double point_radius = 5.0;
    double voxel_radius = 2.0;
    BranchMode branch_mode = BranchMode::Dual;

    int point_feature_dim() const { return 4; }
};

// Counters for tests and the CLI timing log. Single-branch modes must keep
// the other branch's counter at zero.
struct PipelineStats {
    std::uint64_t point_graphs_built = 0;
    std::uint64_t voxel_graphs_built = 0;
    std::uint64_t cache_hits = 0;
    std::uint64_t cache_misses = 0;
};

// Event cloud -> normalized points -> (center-point graph, voxel graph)
// for whichever branches the config enables. Node features: points get
// (x/width, y/height, t'/t_norm, p); voxels get their descriptor.
SampleGraphs preprocess_sample(const EventCloud& cloud, const PipelineConfig& config,
                               std::uint64_t seed, PipelineStats* stats = nullptr);

// Preprocesses one split of a manifest. When cache_dir is non-empty,
// per-sample graphs are stored under cache_dir/<cache_key>/ and reused;
// writers hold an advisory flock so concurrent invocations do not collide.
std::vector<SampleGraphs> preprocess_split(const DatasetManifest& manifest, Split split,
                                           const PipelineConfig& config, std::uint64_t seed,
                                           const std::string& cache_dir = "",
                                           const std::string& cache_key = "",
                                           PipelineStats* stats = nullptr);

} // namespace evagc

#endif
