#ifndef EVAGC_POINT_HPP
#define EVAGC_POINT_HPP

#include <vector>

namespace evagc {

// Spatio-temporal point after timestamp normalization: x/y in pixels,
// t in normalized units, polarity carried through.
struct Point {
    double x = 0.0;
    double y = 0.0;
    double t = 0.0;
    int p = 1;

    bool operator==(const Point&) const = default;
};

using PointCloud = std::vector<Point>;

} // namespace evagc

#endif
