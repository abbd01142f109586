#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "isdm/geometry.hpp"

namespace isdm {

using Triangle = std::array<std::size_t, 3>;

/// Containing triangle and barycentric weights of a point.
struct MeshLocation {
  std::size_t triangle = 0;
  std::array<double, 3> barycentric{1.0, 0.0, 0.0};
};

class OutsideDomainError : public std::runtime_error {
 public:
  explicit OutsideDomainError(Point2D p);
  Point2D point;
};

/// Triangulation of the study region. Immutable once constructed; all queries
/// are const and safe to share across threads.
///
/// Each vertex carries the barycentric-dual area (one third of every incident
/// triangle), which is the quadrature weight for intensity integrals.
class TriangulatedDomain {
 public:
  /// Validates orientation, index ranges and area conservation against the
  /// boundary; triangles are reoriented counter-clockwise.
  TriangulatedDomain(std::vector<Point2D> vertices, std::vector<Triangle> triangles, Polygon boundary,
                     double max_edge);

  const std::vector<Point2D>& vertices() const { return vertices_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }
  const Polygon& boundary() const { return boundary_; }
  const std::vector<double>& dual_areas() const { return dual_areas_; }
  double max_edge() const { return max_edge_; }
  double area() const { return area_; }
  std::size_t vertex_count() const { return vertices_.size(); }
  std::size_t triangle_count() const { return triangles_.size(); }

  double triangle_area(std::size_t t) const;
  double longest_edge() const;
  double diameter() const;

  /// Lowest-index triangle containing p. Throws OutsideDomainError.
  MeshLocation locate(Point2D p) const;
  std::optional<MeshLocation> try_locate(Point2D p) const;

  double interpolate(std::span<const double> node_values, Point2D p) const;
  double interpolate(std::span<const double> node_values, const MeshLocation& loc) const;

  /// Vertices lying inside (or on) the region.
  std::vector<std::size_t> vertices_in(const Polygon& region) const;

  bool contains(Point2D p) const { return try_locate(p).has_value(); }

 private:
  void build_locator();
  std::optional<std::array<double, 3>> barycentric(std::size_t t, Point2D p) const;

  std::vector<Point2D> vertices_;
  std::vector<Triangle> triangles_;
  Polygon boundary_;
  std::vector<double> dual_areas_;
  double max_edge_;
  double area_ = 0.0;

  // uniform bucket grid over the bounding box; each cell lists triangle
  // indices in increasing order
  Point2D lo_{}, hi_{};
  std::size_t nx_ = 1, ny_ = 1;
  std::vector<std::vector<std::size_t>> cells_;
};

/// Conforming Delaunay triangulation of a simple polygon refined so that edges
/// do not exceed max_edge by more than the slack factor.
TriangulatedDomain build_mesh(const Polygon& boundary, double max_edge);

inline constexpr double kEdgeSlack = 1.5;

/// Delaunay triangulation of a point set (Bowyer-Watson). Returns
/// counter-clockwise triangles over the convex hull.
std::vector<Triangle> delaunay(std::span<const Point2D> points);

}  // namespace isdm
