#ifndef EVAGC_SAMPLING_HPP
#define EVAGC_SAMPLING_HPP

#include <cstdint>
#include <string>

#include "evagc/event_io.hpp"
#include "evagc/point.hpp"

namespace evagc {

enum class SamplingStrategy { OctreeGrid, Fps, Uniform };

struct SamplingConfig {
    SamplingStrategy strategy = SamplingStrategy::OctreeGrid;
    int max_num_events = 40;  // octree leaf capacity
    int target_count = 1024;  // fps / uniform output size
    double t_norm = 64.0;     // timestamp span after normalization
};

SamplingStrategy sampling_strategy_from_string(const std::string& s);
std::string to_string(SamplingStrategy s);

// Affine map of timestamps onto [0, t_norm]; x/y pass through unchanged.
// A degenerate time span maps every event to t' = 0.
PointCloud normalize_time(const EventCloud& cloud, double t_norm);

// Non-uniform grid downsampling: recursively bisect the tight bounding box
// into octants until a cell holds <= max_num_events points or its longest
// edge is <= 1 unit, then keep one point per non-empty leaf, chosen by a
// per-leaf hash of (seed, leaf cell id). Output is ordered by original
// point index.
PointCloud octree_downsample(const PointCloud& points, int max_num_events, std::uint64_t seed);

// Farthest-point sampling under the spatio-temporal Euclidean distance.
// The seeded variant draws the first point uniformly; ties in the argmax
// go to the lowest index.
PointCloud fps_downsample(const PointCloud& points, int target_count, std::uint64_t seed);
PointCloud fps_downsample_from(const PointCloud& points, int target_count, int first_index);

// Uniform subset without replacement (selection sampling, so output keeps
// input order).
PointCloud uniform_downsample(const PointCloud& points, int target_count, std::uint64_t seed);

PointCloud downsample(const PointCloud& points, const SamplingConfig& config, std::uint64_t seed);

// Identifies an octree leaf by its depth and integer cell path; the
// representative pick is a pure function of (seed, this key), which is what
// lets an independent partitioner reproduce the exact output in tests.
std::uint64_t octree_leaf_key(int depth, std::uint64_t ix, std::uint64_t iy, std::uint64_t iz);
std::size_t octree_leaf_pick(std::uint64_t seed, std::uint64_t leaf_key, std::size_t count);

} // namespace evagc

#endif
