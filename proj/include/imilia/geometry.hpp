#pragma once

#include <cstdint>
#include <vector>

namespace imilia {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

using Polygon = std::vector<Point>;

struct BoundingBox {
    double min_x = 0.0, min_y = 0.0, max_x = 0.0, max_y = 0.0;
};

BoundingBox bounding_box(const Polygon& polygon);

/// Even-odd point-in-polygon test.
bool contains(const Polygon& polygon, Point p);

/// Pixels whose centre (x + 0.5, y + 0.5) lies inside the polygon (even-odd
/// rule), encoded as (y << 32) | x for x, y >= 0 and sorted ascending.
/// Pixels at negative coordinates are dropped.
std::vector<std::uint64_t> rasterize(const Polygon& polygon);

double pixel_iou(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b);

}  // namespace imilia
