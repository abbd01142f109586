#pragma once

#include <memory>

#include "isdm/mesh.hpp"

namespace isdm::test {

inline Polygon unit_square() { return make_polygon({{0, 0}, {1, 0}, {1, 1}, {0, 1}}); }

inline std::shared_ptr<const TriangulatedDomain> square_mesh(double max_edge) {
  return std::make_shared<const TriangulatedDomain>(build_mesh(unit_square(), max_edge));
}

inline Polygon square(double x0, double y0, double x1, double y1) {
  return make_polygon({{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}});
}

}  // namespace isdm::test
