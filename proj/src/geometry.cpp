#include "imilia/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>

namespace imilia {

BoundingBox bounding_box(const Polygon& polygon) {
    BoundingBox box{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                    -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto& p : polygon) {
        box.min_x = std::min(box.min_x, p.x);
        box.min_y = std::min(box.min_y, p.y);
        box.max_x = std::max(box.max_x, p.x);
        box.max_y = std::max(box.max_y, p.y);
    }
    return box;
}

bool contains(const Polygon& polygon, Point p) {
    bool inside = false;
    const std::size_t n = polygon.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Point& a = polygon[i];
        const Point& b = polygon[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (p.x < x_cross) inside = !inside;
        }
    }
    return inside;
}

std::vector<std::uint64_t> rasterize(const Polygon& polygon) {
    std::vector<std::uint64_t> out;
    if (polygon.size() < 3) return out;
    const BoundingBox box = bounding_box(polygon);
    const long y0 = std::max(0L, static_cast<long>(std::floor(box.min_y - 0.5)));
    const long y1 = static_cast<long>(std::ceil(box.max_y - 0.5));
    std::vector<double> crossings;
    const std::size_t n = polygon.size();
    // Scanline fill: per row, sort edge crossings at the pixel-centre height
    // and take the pixels between alternate pairs.
    for (long y = y0; y <= y1; ++y) {
        const double cy = static_cast<double>(y) + 0.5;
        crossings.clear();
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
            const Point& a = polygon[i];
            const Point& b = polygon[j];
            if ((a.y > cy) != (b.y > cy)) crossings.push_back(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
        }
        std::sort(crossings.begin(), crossings.end());
        for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
            // Centre x + 0.5 strictly left of the right crossing and at/after the left one,
            // matching contains(): inside iff an odd number of crossings lie to the right.
            const long x_start = std::max(0L, static_cast<long>(std::ceil(crossings[k] - 0.5)));
            const double right = crossings[k + 1] - 0.5;
            long x_end = static_cast<long>(std::ceil(right)) - 1;
            for (long x = x_start; x <= x_end; ++x)
                out.push_back((static_cast<std::uint64_t>(y) << 32) | static_cast<std::uint64_t>(x));
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double pixel_iou(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
    if (a.empty() && b.empty()) return 0.0;
    std::size_t inter = 0;
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() && ib != b.end()) {
        if (*ia < *ib) {
            ++ia;
        } else if (*ib < *ia) {
            ++ib;
        } else {
            ++inter;
            ++ia;
            ++ib;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace imilia
