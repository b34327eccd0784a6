#include "evagc/sampling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "evagc/errors.hpp"
#include "evagc/rng.hpp"

namespace evagc {

SamplingStrategy sampling_strategy_from_string(const std::string& s) {
    if (s == "octree_grid") return SamplingStrategy::OctreeGrid;
    if (s == "fps") return SamplingStrategy::Fps;
    if (s == "uniform") return SamplingStrategy::Uniform;
    throw ValidationError("unknown sampling strategy '" + s + "'");
}

std::string to_string(SamplingStrategy s) {
    switch (s) {
        case SamplingStrategy::OctreeGrid: return "octree_grid";
        case SamplingStrategy::Fps: return "fps";
        case SamplingStrategy::Uniform: return "uniform";
    }
    return "?";
}

PointCloud normalize_time(const EventCloud& cloud, double t_norm) {
    if (cloud.events.empty()) throw ValidationError("normalize_time: empty cloud");
    if (!(t_norm > 0.0)) throw ValidationError("normalize_time: t_norm must be positive");
    const std::uint64_t t_min = cloud.events.front().t;
    const std::uint64_t t_max = cloud.events.back().t;
    const double span = static_cast<double>(std::max<std::uint64_t>(t_max - t_min, 1));
    PointCloud out;
    out.reserve(cloud.events.size());
    for (const Event& e : cloud.events) {
        out.push_back({static_cast<double>(e.x), static_cast<double>(e.y),
                       static_cast<double>(e.t - t_min) / span * t_norm, e.p});
    }
    return out;
}

std::uint64_t octree_leaf_key(int depth, std::uint64_t ix, std::uint64_t iy, std::uint64_t iz) {
    return mix_seed(mix_seed(mix_seed(static_cast<std::uint64_t>(depth), ix), iy), iz);
}

std::size_t octree_leaf_pick(std::uint64_t seed, std::uint64_t leaf_key, std::size_t count) {
    return static_cast<std::size_t>(splitmix64(seed ^ leaf_key) % count);
}

namespace {

struct Box {
    std::array<double, 3> lo, hi;
    double max_edge() const {
        return std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    }
};

std::array<double, 3> coords_of(const Point& p) { return {p.x, p.y, p.t}; }

// idx: original point indices in this cell, ascending.
void octree_recurse(const PointCloud& points, const std::vector<std::size_t>& idx,
                    const Box& box, int depth, std::uint64_t ix, std::uint64_t iy,
                    std::uint64_t iz, int max_num_events, std::uint64_t seed,
                    std::vector<std::size_t>& chosen) {
    if (idx.empty()) return;
    if (static_cast<int>(idx.size()) <= max_num_events || box.max_edge() <= 1.0) {
        const std::uint64_t key = octree_leaf_key(depth, ix, iy, iz);
        chosen.push_back(idx[octree_leaf_pick(seed, key, idx.size())]);
        return;
    }
    const std::array<double, 3> mid = {0.5 * (box.lo[0] + box.hi[0]),
                                       0.5 * (box.lo[1] + box.hi[1]),
                                       0.5 * (box.lo[2] + box.hi[2])};
    std::array<std::vector<std::size_t>, 8> buckets;
    for (std::size_t i : idx) {
        const auto c = coords_of(points[i]);
        const int o = (c[0] >= mid[0] ? 1 : 0) | (c[1] >= mid[1] ? 2 : 0) | (c[2] >= mid[2] ? 4 : 0);
        buckets[o].push_back(i);
    }
    for (int o = 0; o < 8; ++o) {
        if (buckets[o].empty()) continue;
        Box child = box;
        for (int a = 0; a < 3; ++a) {
            if (o & (1 << a))
                child.lo[a] = mid[a];
            else
                child.hi[a] = mid[a];
        }
        octree_recurse(points, buckets[o], child, depth + 1,
                       2 * ix + ((o >> 0) & 1), 2 * iy + ((o >> 1) & 1),
                       2 * iz + ((o >> 2) & 1), max_num_events, seed, chosen);
    }
}

} // namespace

PointCloud octree_downsample(const PointCloud& points, int max_num_events, std::uint64_t seed) {
    if (points.empty()) throw ValidationError("octree_downsample: empty point set");
    if (max_num_events < 1) throw ValidationError("octree_downsample: max_num_events must be >= 1");

    Box root;
    root.lo = root.hi = coords_of(points[0]);
    for (const Point& p : points) {
        const auto c = coords_of(p);
        for (int a = 0; a < 3; ++a) {
            root.lo[a] = std::min(root.lo[a], c[a]);
            root.hi[a] = std::max(root.hi[a], c[a]);
        }
    }
    std::vector<std::size_t> all(points.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

    std::vector<std::size_t> chosen;
    octree_recurse(points, all, root, 0, 0, 0, 0, max_num_events, seed, chosen);
    std::sort(chosen.begin(), chosen.end());

    PointCloud out;
    out.reserve(chosen.size());
    for (std::size_t i : chosen) out.push_back(points[i]);
    return out;
}

namespace {

double dist2(const Point& a, const Point& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dt = a.t - b.t;
    return dx * dx + dy * dy + dt * dt;
}

} // namespace

PointCloud fps_downsample_from(const PointCloud& points, int target_count, int first_index) {
    const std::size_t n = points.size();
    if (target_count < 1) throw ValidationError("fps_downsample: target_count must be >= 1");
    if (n < static_cast<std::size_t>(target_count))
        throw ValidationError("fps_downsample: fewer points than target_count");

    std::vector<std::size_t> selected;
    selected.reserve(target_count);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());

    std::size_t current = static_cast<std::size_t>(first_index);
    selected.push_back(current);
    for (int k = 1; k < target_count; ++k) {
        std::size_t best = 0;
        double best_d2 = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            min_d2[i] = std::min(min_d2[i], dist2(points[i], points[current]));
            if (min_d2[i] > best_d2) {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        selected.push_back(current);
    }
    PointCloud out;
    out.reserve(selected.size());
    for (std::size_t i : selected) out.push_back(points[i]);
    return out;
}

PointCloud fps_downsample(const PointCloud& points, int target_count, std::uint64_t seed) {
    if (points.empty()) throw ValidationError("fps_downsample: empty point set");
    Rng rng(mix_seed(seed, 0xF5));
    return fps_downsample_from(points, target_count, rng.index(points.size()));
}

PointCloud uniform_downsample(const PointCloud& points, int target_count, std::uint64_t seed) {
    const std::size_t n = points.size();
    if (target_count < 1) throw ValidationError("uniform_downsample: target_count must be >= 1");
    if (n < static_cast<std::size_t>(target_count))
        throw ValidationError("uniform_downsample: fewer points than target_count");

    // Selection sampling: pass over the input once, keeping each remaining
    // slot with probability need/remaining.
    Rng rng(mix_seed(seed, 0x05));
    PointCloud out;
    out.reserve(target_count);
    std::size_t need = static_cast<std::size_t>(target_count);
    for (std::size_t i = 0; i < n && need > 0; ++i) {
        if (rng.below(n - i) < need) {
            out.push_back(points[i]);
            --need;
        }
    }
    return out;
}

PointCloud downsample(const PointCloud& points, const SamplingConfig& config, std::uint64_t seed) {
    switch (config.strategy) {
        case SamplingStrategy::OctreeGrid:
            return octree_downsample(points, config.max_num_events, seed);
        case SamplingStrategy::Fps:
            return fps_downsample(points, config.target_count, seed);
        case SamplingStrategy::Uniform:
            return uniform_downsample(points, config.target_count, seed);
    }
    throw ValidationError("downsample: bad strategy");
}

} // namespace evagc
