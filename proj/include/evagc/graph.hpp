#ifndef EVAGC_GRAPH_HPP
#define EVAGC_GRAPH_HPP

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evagc/matrix.hpp"

namespace evagc {

// Directed (receiver <- sender) message pairs of a graph, grouped by the
// degree pair so the GMM kernel is evaluated once per distinct
// pseudo-coordinate instead of once per edge.
struct MessagePlan {
    std::vector<std::array<double, 2>> group_z;  // pseudo-coordinate per group
    std::vector<int> recv;
    std::vector<int> send;
    std::vector<int> group;
    std::size_t pairs() const { return recv.size(); }
};

// Fixed-radius neighbourhood graph over M event nodes plus one absorbing
// node (id M) implicitly connected to every event node. Absorbing edges are
// not stored in `edges`; degrees account for them.
struct AbsorbingGraph {
    int num_event_nodes = 0;                  // M
    Matrix coords;                            // M x 3
    Matrix features;                          // M x F
    std::vector<std::pair<int, int>> edges;   // radius edges, first < second
    std::vector<int> degrees;                 // length M+1

    int absorbing_index() const { return num_event_nodes; }
    int feature_dim() const { return features.cols(); }

    bool adjacent(int u, int v) const;
    const std::vector<int>& neighbors(int u) const;  // radius neighbours, ascending
    const MessagePlan& message_plan() const { return plan_; }

    // Fills degrees, adjacency lists and the message plan from `edges`.
    // Must be called after edges are final; the builders do this.
    void finalize();

private:
    std::vector<std::vector<int>> adjacency_;
    MessagePlan plan_;
};

struct GraphConfig {
    double radius = 5.0;
};

// Eq-style spatio-temporal distance: plain Euclidean norm over (x, y, t').
double spatio_temporal_distance(const std::array<double, 3>& a, const std::array<double, 3>& b);

// Edge (i,j) iff distance < radius (strict). Spatial hash grid of cell size
// radius, probing the 27-neighbourhood.
AbsorbingGraph build_radius_graph(const Matrix& coords, const Matrix& features, double radius);

// All-pairs reference construction; the oracle the hash grid is tested
// against, also fine for small inputs.
AbsorbingGraph build_radius_graph_bruteforce(const Matrix& coords, const Matrix& features,
                                             double radius);

// (deg(u)^-1/2, deg(v)^-1/2) for an adjacent pair; throws on non-adjacent.
std::array<double, 2> pseudo_coordinate(const AbsorbingGraph& graph, int u, int v);

// Debug dump: "u v" per radius edge, header comment with M and R.
void export_edge_list(const AbsorbingGraph& graph, const std::string& path, double radius);

void save_graph(const AbsorbingGraph& graph, std::ostream& os);
AbsorbingGraph load_graph(std::istream& is);

} // namespace evagc

#endif
