#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace isdm {

/// Planar location in projected units.
struct Point2D {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2D&, const Point2D&) = default;
};

inline Point2D operator-(Point2D a, Point2D b) { return {a.x - b.x, a.y - b.y}; }
inline Point2D operator+(Point2D a, Point2D b) { return {a.x + b.x, a.y + b.y}; }
inline Point2D operator*(double s, Point2D a) { return {s * a.x, s * a.y}; }

inline double cross(Point2D a, Point2D b) { return a.x * b.y - a.y * b.x; }
inline double dot(Point2D a, Point2D b) { return a.x * b.x + a.y * b.y; }
double distance(Point2D a, Point2D b);

/// Twice the signed area of (a, b, c); positive when counter-clockwise.
inline double orient(Point2D a, Point2D b, Point2D c) { return cross(b - a, c - a); }

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A simple polygon stored as an open ring (the closing vertex is not repeated).
struct Polygon {
  std::vector<Point2D> ring;

  std::size_t size() const { return ring.size(); }
  const Point2D& operator[](std::size_t i) const { return ring[i]; }
};

/// Drops a repeated closing vertex, as found in GeoJSON rings.
Polygon make_polygon(std::vector<Point2D> ring);

double signed_area(const Polygon& poly);
double area(const Polygon& poly);
Point2D centroid(const Polygon& poly);
double diameter(const Polygon& poly);

/// True when no two non-adjacent edges touch and no vertex repeats.
bool is_simple(const Polygon& poly);

/// Throws GeometryError unless the polygon has finite coordinates, nonzero area
/// and no self-intersections.
void validate_polygon(const Polygon& poly);

/// Counter-clockwise copy.
Polygon oriented_ccw(const Polygon& poly);

/// Point-in-polygon; points on the boundary count as inside.
bool contains(const Polygon& poly, Point2D p, double tol = 1e-12);

double segment_distance(Point2D p, Point2D a, Point2D b);
double boundary_distance(const Polygon& poly, Point2D p);

/// Distance to the union of polygons: zero inside any of them, otherwise the
/// distance to the nearest boundary.
double distance_to_region(std::span<const Polygon> polys, Point2D p);

bool segments_intersect(Point2D a, Point2D b, Point2D c, Point2D d);

}  // namespace isdm
