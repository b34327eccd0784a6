#include "evagc/voxelizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "evagc/errors.hpp"

namespace evagc {

VoxelCoordMode voxel_coord_mode_from_string(const std::string& s) {
    if (s == "cell_center") return VoxelCoordMode::CellCenter;
    if (s == "event_centroid") return VoxelCoordMode::EventCentroid;
    throw ValidationError("unknown voxel coord mode '" + s + "'");
}

std::string to_string(VoxelCoordMode m) {
    return m == VoxelCoordMode::CellCenter ? "cell_center" : "event_centroid";
}

std::vector<double> voxel_feature(const std::vector<Point>& events_in_cell, int feature_dim) {
    if (events_in_cell.empty()) throw ValidationError("voxel_feature: empty cell");
    if (feature_dim < 2) throw ValidationError("voxel_feature: feature_dim must be >= 2");

    std::vector<double> f(feature_dim, 0.0);
    const double n = static_cast<double>(events_in_cell.size());
    std::size_t pos = 0;
    for (const Point& p : events_in_cell)
        if (p.p > 0) ++pos;
    f[0] = static_cast<double>(pos) / n;
    f[1] = 1.0 - f[0];

    if (feature_dim > 2) {
        const int bins = feature_dim - 2;
        double t_lo = events_in_cell.front().t, t_hi = t_lo;
        for (const Point& p : events_in_cell) {
            t_lo = std::min(t_lo, p.t);
            t_hi = std::max(t_hi, p.t);
        }
        const double span = t_hi - t_lo;
        for (const Point& p : events_in_cell) {
            int b = span > 0.0 ? static_cast<int>((p.t - t_lo) / span * bins) : 0;
            b = std::min(b, bins - 1);
            f[2 + b] += 1.0 / n;
        }
    }
    return f;
}

VoxelSet voxelize(const PointCloud& points, const VoxelizationConfig& config) {
    if (points.empty()) throw ValidationError("voxelize: empty point set");
    if (!(config.size_h > 0.0 && config.size_w > 0.0 && config.size_t > 0.0))
        throw ValidationError("voxelize: voxel sizes must be positive");
    if (config.top_k < 1) throw ValidationError("voxelize: top_k must be >= 1");

    // std::map keeps cells in lexicographic index order, which is exactly the
    // tie-break order for ranking.
    std::map<std::array<std::int64_t, 3>, std::vector<Point>> cells;
    for (const Point& p : points) {
        const std::array<std::int64_t, 3> idx = {
            static_cast<std::int64_t>(std::floor(p.x / config.size_w)),
            static_cast<std::int64_t>(std::floor(p.y / config.size_h)),
            static_cast<std::int64_t>(std::floor(p.t / config.size_t))};
        cells[idx].push_back(p);
    }

    std::vector<VoxelCell> all;
    all.reserve(cells.size());
    for (const auto& [idx, pts] : cells) {
        VoxelCell cell;
        cell.index = idx;
        cell.count = static_cast<int>(pts.size());
        if (config.coord_mode == VoxelCoordMode::CellCenter) {
            cell.coord = {(idx[0] + 0.5) * config.size_w, (idx[1] + 0.5) * config.size_h,
                          (idx[2] + 0.5) * config.size_t};
        } else {
            double sx = 0, sy = 0, st = 0;
            for (const Point& p : pts) {
                sx += p.x;
                sy += p.y;
                st += p.t;
            }
            cell.coord = {sx / cell.count, sy / cell.count, st / cell.count};
        }
        cell.feature = voxel_feature(pts, config.feature_dim);
        all.push_back(std::move(cell));
    }

    // stable_sort by descending count preserves the map's index order inside
    // each count class.
    std::stable_sort(all.begin(), all.end(),
                     [](const VoxelCell& a, const VoxelCell& b) { return a.count > b.count; });
    if (static_cast<int>(all.size()) > config.top_k) all.resize(config.top_k);

    VoxelSet out;
    out.voxels = std::move(all);
    out.total_events = points.size();
    return out;
}

} // namespace evagc
