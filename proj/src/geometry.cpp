#include "isdm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace isdm {

double distance(Point2D a, Point2D b) { return std::hypot(a.x - b.x, a.y - b.y); }

Polygon make_polygon(std::vector<Point2D> ring) {
  if (ring.size() >= 2 && ring.front() == ring.back()) ring.pop_back();
  return Polygon{std::move(ring)};
}

double signed_area(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  // shoelace relative to the first vertex keeps cancellation small
  double twice = 0.0;
  const Point2D o = poly[0];
  for (std::size_t i = 1; i + 1 < n; ++i) twice += orient(o, poly[i], poly[i + 1]);
  return 0.5 * twice;
}

double area(const Polygon& poly) { return std::abs(signed_area(poly)); }

Point2D centroid(const Polygon& poly) {
  const std::size_t n = poly.size();
  const Point2D o = poly[0];
  double a = 0.0, cx = 0.0, cy = 0.0;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double t = orient(o, poly[i], poly[i + 1]);
    a += t;
    cx += t * (o.x + poly[i].x + poly[i + 1].x);
    cy += t * (o.y + poly[i].y + poly[i + 1].y);
  }
  if (a == 0.0) return o;
  return {cx / (3.0 * a), cy / (3.0 * a)};
}

double diameter(const Polygon& poly) {
  double d = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i)
    for (std::size_t j = i + 1; j < poly.size(); ++j) d = std::max(d, distance(poly[i], poly[j]));
  return d;
}

namespace {

bool on_segment(Point2D p, Point2D a, Point2D b) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

int sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

bool segments_intersect(Point2D a, Point2D b, Point2D c, Point2D d) {
  const int o1 = sign(orient(a, b, c));
  const int o2 = sign(orient(a, b, d));
  const int o3 = sign(orient(c, d, a));
  const int o4 = sign(orient(c, d, b));
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(c, a, b)) return true;
  if (o2 == 0 && on_segment(d, a, b)) return true;
  if (o3 == 0 && on_segment(a, c, d)) return true;
  if (o4 == 0 && on_segment(b, c, d)) return true;
  return false;
}

bool is_simple(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (poly[i] == poly[j]) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2D a = poly[i], b = poly[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) continue;
      if (segments_intersect(a, b, poly[j], poly[(j + 1) % n])) return false;
    }
  }
  return true;
}

void validate_polygon(const Polygon& poly) {
  if (poly.size() < 3) throw GeometryError("polygon needs at least 3 distinct vertices");
  for (const auto& p : poly.ring)
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw GeometryError("polygon has non-finite coordinates");
  if (area(poly) == 0.0) throw GeometryError("degenerate polygon: zero area");
  if (!is_simple(poly)) throw GeometryError("polygon is self-intersecting or repeats a vertex");
}

Polygon oriented_ccw(const Polygon& poly) {
  Polygon out = poly;
  if (signed_area(out) < 0.0) std::reverse(out.ring.begin(), out.ring.end());
  return out;
}

double segment_distance(Point2D p, Point2D a, Point2D b) {
  const Point2D ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return distance(p, a);
  const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return distance(p, a + t * ab);
}

double boundary_distance(const Polygon& poly, Point2D p) {
  double d = std::numeric_limits<double>::infinity();
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) d = std::min(d, segment_distance(p, poly[i], poly[(i + 1) % n]));
  return d;
}

bool contains(const Polygon& poly, Point2D p, double tol) {
  const std::size_t n = poly.size();
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2D a = poly[i], b = poly[j];
    if (segment_distance(p, a, b) <= tol) return true;
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x) inside = !inside;
    }
  }
  return inside;
}

double distance_to_region(std::span<const Polygon> polys, Point2D p) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& poly : polys) {
    if (contains(poly, p, 0.0)) return 0.0;
    d = std::min(d, boundary_distance(poly, p));
  }
  return polys.empty() ? 0.0 : d;
}

}  // namespace isdm
