#ifndef SCONE_GEOMETRY_HPP_
#define SCONE_GEOMETRY_HPP_

#include <algorithm>
#include <cmath>
#include <vector>

#include "scone/dataset.hpp"

namespace scone {

/// Even-odd rule point-in-polygon test.
inline bool point_in_polygon(double x, double y, const Polygon& poly) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const double xi = poly[i][0], yi = poly[i][1];
    const double xj = poly[j][0], yj = poly[j][1];
    if ((yi > y) != (yj > y)) {
      const double xc = xi + (y - yi) * (xj - xi) / (yj - yi);
      if (x < xc) inside = !inside;
    }
  }
  return inside;
}

inline bool point_in_any(double x, double y, const std::vector<Polygon>& polys) {
  return std::any_of(polys.begin(), polys.end(), [&](const Polygon& p) { return point_in_polygon(x, y, p); });
}

/// Grows the box by min(w, h) * context on every side, then clamps to the image.
inline BBox expand_and_clamp_box(const BBox& box, int image_w, int image_h, double context) {
  const double pad = std::min(box.w, box.h) * context;
  const double x0 = std::max(0.0, box.x - pad);
  const double y0 = std::max(0.0, box.y - pad);
  const double x1 = std::min(static_cast<double>(image_w), box.x + box.w + pad);
  const double y1 = std::min(static_cast<double>(image_h), box.y + box.h + pad);
  return {x0, y0, std::max(x1 - x0, 1.0), std::max(y1 - y0, 1.0)};
}

}  // namespace scone

#endif  // SCONE_GEOMETRY_HPP_
