#include "evagc/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "evagc/errors.hpp"
#include "evagc/rng.hpp"

namespace evagc {

namespace {

Matrix point_features(const PointCloud& points, const EventCloud& cloud, double t_norm) {
    Matrix f(static_cast<int>(points.size()), 4);
    for (std::size_t i = 0; i < points.size(); ++i) {
        f(i, 0) = points[i].x / cloud.sensor_width;
        f(i, 1) = points[i].y / cloud.sensor_height;
        f(i, 2) = points[i].t / t_norm;
        f(i, 3) = static_cast<double>(points[i].p);
    }
    return f;
}

Matrix point_coords(const PointCloud& points) {
    Matrix c(static_cast<int>(points.size()), 3);
    for (std::size_t i = 0; i < points.size(); ++i) {
        c(i, 0) = points[i].x;
        c(i, 1) = points[i].y;
        c(i, 2) = points[i].t;
    }
    return c;
}

// RAII advisory lock on <dir>/.lock.
class DirLock {
public:
    explicit DirLock(const std::string& dir) {
        fd_ = ::open((dir + "/.lock").c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ >= 0) ::flock(fd_, LOCK_EX);
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }

private:
    int fd_ = -1;
};

void save_sample_graphs(const SampleGraphs& sample, const PipelineConfig& config,
                        const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot write " + tmp);
        const char has_point = config.branch_mode != BranchMode::VoxelOnly ? 1 : 0;
        const char has_voxel = config.branch_mode != BranchMode::PointOnly ? 1 : 0;
        os.write(&has_point, 1);
        os.write(&has_voxel, 1);
        if (has_point) save_graph(sample.point_graph, os);
        if (has_voxel) save_graph(sample.voxel_graph, os);
        if (!os) throw IoError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);  // atomic publish
}

bool load_sample_graphs(const std::string& path, SampleGraphs& sample) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return false;
    char has_point = 0, has_voxel = 0;
    is.read(&has_point, 1);
    is.read(&has_voxel, 1);
    if (!is) return false;
    if (has_point) sample.point_graph = load_graph(is);
    if (has_voxel) sample.voxel_graph = load_graph(is);
    return static_cast<bool>(is);
}

} // namespace

SampleGraphs preprocess_sample(const EventCloud& cloud, const PipelineConfig& config,
                               std::uint64_t seed, PipelineStats* stats) {
    validate(cloud);
    if (cloud.events.empty()) throw ValidationError("preprocess: empty event cloud");
    const PointCloud normalized = normalize_time(cloud, config.sampling.t_norm);

    SampleGraphs sample;
    sample.label = cloud.label.value_or(-1);

    if (config.branch_mode != BranchMode::VoxelOnly) {
        const PointCloud centers = downsample(normalized, config.sampling, seed);
        sample.point_graph =
            build_radius_graph(point_coords(centers),
                               point_features(centers, cloud, config.sampling.t_norm),
                               config.point_radius);
        if (stats) ++stats->point_graphs_built;
    }
    if (config.branch_mode != BranchMode::PointOnly) {
        const VoxelSet voxels = voxelize(normalized, config.voxel);
        const int k = static_cast<int>(voxels.voxels.size());
        Matrix coords(k, 3);
        Matrix features(k, config.voxel.feature_dim);
        for (int i = 0; i < k; ++i) {
            for (int c = 0; c < 3; ++c) coords(i, c) = voxels.voxels[i].coord[c];
            for (int c = 0; c < config.voxel.feature_dim; ++c)
                features(i, c) = voxels.voxels[i].feature[c];
        }
        sample.voxel_graph = build_radius_graph(coords, features, config.voxel_radius);
        if (stats) ++stats->voxel_graphs_built;
    }
    return sample;
}

std::vector<SampleGraphs> preprocess_split(const DatasetManifest& manifest, Split split,
                                           const PipelineConfig& config, std::uint64_t seed,
                                           const std::string& cache_dir,
                                           const std::string& cache_key,
                                           PipelineStats* stats) {
    const std::vector<int> ids = manifest.indices(split);
    std::vector<SampleGraphs> out(ids.size());

    std::string bucket;
    if (!cache_dir.empty()) {
        bucket = cache_dir + "/" + cache_key;
        std::filesystem::create_directories(bucket);
    }

    // Per-sample RNG streams are derived from (seed, manifest index), so
    // outputs do not depend on split composition or processing order.
    for (std::size_t n = 0; n < ids.size(); ++n) {
        const int idx = ids[n];
        SampleGraphs& sample = out[n];
        const std::string cache_path =
            bucket.empty() ? "" : bucket + "/sample_" + std::to_string(idx) + ".graphs";

        if (!cache_path.empty() && load_sample_graphs(cache_path, sample)) {
            if (stats) ++stats->cache_hits;
        } else {
            const EventCloud cloud =
                read_events(manifest.sample_path(idx), EventFormat::Binary);
            sample = preprocess_sample(cloud, config,
                                       mix_seed(seed, static_cast<std::uint64_t>(idx)), stats);
            if (!cache_path.empty()) {
                DirLock lock(bucket);
                if (!std::filesystem::exists(cache_path))
                    save_sample_graphs(sample, config, cache_path);
                if (stats) ++stats->cache_misses;
            }
        }
        sample.label = manifest.samples[idx].label;
        sample.id = manifest.samples[idx].path;
    }
    return out;
}

} // namespace evagc
