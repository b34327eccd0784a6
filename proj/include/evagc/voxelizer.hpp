#ifndef EVAGC_VOXELIZER_HPP
#define EVAGC_VOXELIZER_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evagc/point.hpp"

namespace evagc {

enum class VoxelCoordMode { CellCenter, EventCentroid };

struct VoxelizationConfig {
    // Cell extents: h applies to y, w to x, t to the normalized timestamp.
    double size_h = 4.0;
    double size_w = 4.0;
    double size_t = 4.0;
    int top_k = 2048;
    int feature_dim = 2;
    VoxelCoordMode coord_mode = VoxelCoordMode::CellCenter;
};

struct VoxelCell {
    std::array<double, 3> coord{};        // (x, y, t) in normalized units
    int count = 0;                        // events contained, >= 1
    std::vector<double> feature;          // length = feature_dim
    std::array<std::int64_t, 3> index{};  // lattice cell (ix, iy, it)
};

struct VoxelSet {
    std::vector<VoxelCell> voxels;  // count-descending, ties by cell index
    std::optional<int> label;
    std::size_t total_events = 0;   // input size, retained + discarded
};

// Per-cell descriptor: (n+/n, n-/n) polarity fractions, and for
// feature_dim > 2 a (feature_dim - 2)-bin normalized histogram of the
// cell's event times over their own extent.
std::vector<double> voxel_feature(const std::vector<Point>& events_in_cell, int feature_dim);

// Bins points into the (x/w, y/h, t/t') lattice, ranks non-empty cells by
// event count (ties broken by ascending cell index) and keeps at most top_k.
VoxelSet voxelize(const PointCloud& points, const VoxelizationConfig& config);

VoxelCoordMode voxel_coord_mode_from_string(const std::string& s);
std::string to_string(VoxelCoordMode m);

} // namespace evagc

#endif
