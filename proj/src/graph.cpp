#include "evagc/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "evagc/errors.hpp"
#include "evagc/rng.hpp"

namespace evagc {

double spatio_temporal_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dt = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dt * dt);
}

bool AbsorbingGraph::adjacent(int u, int v) const {
    if (u == v) return false;
    const int m = num_event_nodes;
    if (u == m || v == m) return u <= m && v <= m;
    const auto& nb = adjacency_[u];
    return std::binary_search(nb.begin(), nb.end(), v);
}

const std::vector<int>& AbsorbingGraph::neighbors(int u) const { return adjacency_[u]; }

void AbsorbingGraph::finalize() {
    const int m = num_event_nodes;
    adjacency_.assign(m, {});
    for (const auto& [i, j] : edges) {
        adjacency_[i].push_back(j);
        adjacency_[j].push_back(i);
    }
    for (auto& nb : adjacency_) std::sort(nb.begin(), nb.end());

    degrees.assign(m + 1, 0);
    for (int i = 0; i < m; ++i)
        degrees[i] = static_cast<int>(adjacency_[i].size()) + 1;  // + absorbing edge
    degrees[m] = m;

    // Directed message pairs: every event node receives from its radius
    // neighbours and from the absorbing node; the absorbing node receives
    // from every event node.
    plan_ = MessagePlan{};
    std::unordered_map<std::uint64_t, int> group_of;
    auto group_id = [&](int ru, int sv) {
        const std::uint64_t key =
            (static_cast<std::uint64_t>(static_cast<std::uint32_t>(degrees[ru])) << 32) |
            static_cast<std::uint32_t>(degrees[sv]);
        auto it = group_of.find(key);
        if (it != group_of.end()) return it->second;
        const int id = static_cast<int>(plan_.group_z.size());
        group_of.emplace(key, id);
        plan_.group_z.push_back({1.0 / std::sqrt(static_cast<double>(degrees[ru])),
                                 1.0 / std::sqrt(static_cast<double>(degrees[sv]))});
        return id;
    };
    auto add_pair = [&](int ru, int sv) {
        plan_.recv.push_back(ru);
        plan_.send.push_back(sv);
        plan_.group.push_back(group_id(ru, sv));
    };
    for (int u = 0; u < m; ++u) {
        for (int v : adjacency_[u]) add_pair(u, v);
        add_pair(u, m);
    }
    for (int v = 0; v < m; ++v) add_pair(m, v);
}

namespace {

AbsorbingGraph make_graph(const Matrix& coords, const Matrix& features,
                          std::vector<std::pair<int, int>> edges) {
    AbsorbingGraph g;
    g.num_event_nodes = coords.rows();
    g.coords = coords;
    g.features = features;
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    g.edges = std::move(edges);
    g.finalize();
    return g;
}

void check_build_inputs(const Matrix& coords, const Matrix& features, double radius) {
    if (coords.rows() < 1) throw ValidationError("build_radius_graph: need at least one node");
    if (coords.cols() != 3) throw ValidationError("build_radius_graph: coords must be Mx3");
    if (features.rows() != coords.rows())
        throw ValidationError("build_radius_graph: feature row count mismatch");
    if (!(radius > 0.0)) throw ValidationError("build_radius_graph: radius must be positive");
}

std::array<double, 3> row3(const Matrix& m, int r) {
    return {m(r, 0), m(r, 1), m(r, 2)};
}

} // namespace

AbsorbingGraph build_radius_graph(const Matrix& coords, const Matrix& features, double radius) {
    check_build_inputs(coords, features, radius);
    const int m = coords.rows();

    // Cell key is a hash of the integer grid coordinates. Collisions only
    // merge candidate buckets; the exact distance test below filters them.
    auto cell_key = [&](int r) {
        const std::uint64_t ix = static_cast<std::uint64_t>(
            static_cast<std::int64_t>(std::floor(coords(r, 0) / radius)));
        const std::uint64_t iy = static_cast<std::uint64_t>(
            static_cast<std::int64_t>(std::floor(coords(r, 1) / radius)));
        const std::uint64_t iz = static_cast<std::uint64_t>(
            static_cast<std::int64_t>(std::floor(coords(r, 2) / radius)));
        return std::array<std::int64_t, 3>{static_cast<std::int64_t>(ix),
                                           static_cast<std::int64_t>(iy),
                                           static_cast<std::int64_t>(iz)};
    };
    auto hash_cell = [](std::int64_t ix, std::int64_t iy, std::int64_t iz) {
        return mix_seed(mix_seed(static_cast<std::uint64_t>(ix), static_cast<std::uint64_t>(iy)),
                        static_cast<std::uint64_t>(iz));
    };

    std::unordered_map<std::uint64_t, std::vector<int>> grid;
    grid.reserve(static_cast<std::size_t>(m) * 2);
    std::vector<std::array<std::int64_t, 3>> cell(m);
    for (int i = 0; i < m; ++i) {
        cell[i] = cell_key(i);
        grid[hash_cell(cell[i][0], cell[i][1], cell[i][2])].push_back(i);
    }

    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < m; ++i) {
        const auto ci = row3(coords, i);
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    const auto it = grid.find(
                        hash_cell(cell[i][0] + dx, cell[i][1] + dy, cell[i][2] + dz));
                    if (it == grid.end()) continue;
                    for (int j : it->second) {
                        if (j <= i) continue;
                        if (spatio_temporal_distance(ci, row3(coords, j)) < radius)
                            edges.emplace_back(i, j);
                    }
                }
    }
    return make_graph(coords, features, std::move(edges));
}

AbsorbingGraph build_radius_graph_bruteforce(const Matrix& coords, const Matrix& features,
                                             double radius) {
    check_build_inputs(coords, features, radius);
    const int m = coords.rows();
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j)
            if (spatio_temporal_distance(row3(coords, i), row3(coords, j)) < radius)
                edges.emplace_back(i, j);
    return make_graph(coords, features, std::move(edges));
}

std::array<double, 2> pseudo_coordinate(const AbsorbingGraph& graph, int u, int v) {
    if (!graph.adjacent(u, v))
        throw ValidationError("pseudo_coordinate: nodes " + std::to_string(u) + " and " +
                              std::to_string(v) + " are not adjacent");
    return {1.0 / std::sqrt(static_cast<double>(graph.degrees[u])),
            1.0 / std::sqrt(static_cast<double>(graph.degrees[v]))};
}

void export_edge_list(const AbsorbingGraph& graph, const std::string& path, double radius) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "# M=" << graph.num_event_nodes << " R=" << radius
       << " (absorbing edges omitted)\n";
    for (const auto& [i, j] : graph.edges) os << i << ' ' << j << '\n';
    if (!os) throw IoError("write failed: " + path);
}

namespace {
constexpr char kGraphMagic[4] = {'A', 'G', 'R', 'F'};
constexpr std::uint32_t kGraphVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}
std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
void put_f64s(std::ostream& os, const double* p, std::size_t n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}
void get_f64s(std::istream& is, double* p, std::size_t n) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}
} // namespace

void save_graph(const AbsorbingGraph& graph, std::ostream& os) {
    os.write(kGraphMagic, 4);
    put_u32(os, kGraphVersion);
    put_u32(os, static_cast<std::uint32_t>(graph.num_event_nodes));
    put_u32(os, static_cast<std::uint32_t>(graph.features.cols()));
    put_f64s(os, graph.coords.data(), graph.coords.size());
    put_f64s(os, graph.features.data(), graph.features.size());
    put_u32(os, static_cast<std::uint32_t>(graph.edges.size()));
    for (const auto& [i, j] : graph.edges) {
        put_u32(os, static_cast<std::uint32_t>(i));
        put_u32(os, static_cast<std::uint32_t>(j));
    }
}

AbsorbingGraph load_graph(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kGraphMagic, 4) != 0)
        throw ParseError("graph stream: bad magic");
    if (get_u32(is) != kGraphVersion) throw ParseError("graph stream: unsupported version");
    const int m = static_cast<int>(get_u32(is));
    const int f = static_cast<int>(get_u32(is));
    AbsorbingGraph g;
    g.num_event_nodes = m;
    g.coords = Matrix(m, 3);
    g.features = Matrix(m, f);
    get_f64s(is, g.coords.data(), g.coords.size());
    get_f64s(is, g.features.data(), g.features.size());
    const std::uint32_t ne = get_u32(is);
    g.edges.reserve(ne);
    for (std::uint32_t k = 0; k < ne; ++k) {
        const int i = static_cast<int>(get_u32(is));
        const int j = static_cast<int>(get_u32(is));
        g.edges.emplace_back(i, j);
    }
    if (!is) throw ParseError("graph stream: truncated");
    g.finalize();
    return g;
}

} // namespace evagc
