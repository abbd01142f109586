#include "isdm/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <utility>

namespace isdm {

namespace {

std::string describe(Point2D p) {
  std::ostringstream os;
  os.precision(17);
  os << "point (" << p.x << ", " << p.y << ") is outside the domain";
  return os.str();
}

using Edge = std::pair<std::size_t, std::size_t>;

Edge undirected(std::size_t a, std::size_t b) { return a < b ? Edge{a, b} : Edge{b, a}; }

// > 0 when p lies strictly inside the circumcircle of counter-clockwise (a, b, c)
double incircle(Point2D a, Point2D b, Point2D c, Point2D p) {
  const double adx = a.x - p.x, ady = a.y - p.y;
  const double bdx = b.x - p.x, bdy = b.y - p.y;
  const double cdx = c.x - p.x, cdy = c.y - p.y;
  const double ad = adx * adx + ady * ady;
  const double bd = bdx * bdx + bdy * bdy;
  const double cd = cdx * cdx + cdy * cdy;
  return adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx);
}

struct WorkTriangle {
  std::array<std::size_t, 3> v;
  Point2D center;
  double radius2;
  bool alive;
};

WorkTriangle make_work_triangle(std::span<const Point2D> pts, std::size_t a, std::size_t b, std::size_t c) {
  const Point2D pa = pts[a], pb = pts[b], pc = pts[c];
  const double d = 2.0 * orient(pa, pb, pc);
  const double a2 = dot(pa, pa), b2 = dot(pb, pb), c2 = dot(pc, pc);
  Point2D center{(a2 * (pb.y - pc.y) + b2 * (pc.y - pa.y) + c2 * (pa.y - pb.y)) / d,
                 (a2 * (pc.x - pb.x) + b2 * (pa.x - pc.x) + c2 * (pb.x - pa.x)) / d};
  const Point2D r = pa - center;
  return {{a, b, c}, center, dot(r, r), true};
}

}  // namespace

OutsideDomainError::OutsideDomainError(Point2D p) : std::runtime_error(describe(p)), point(p) {}

std::vector<Triangle> delaunay(std::span<const Point2D> input) {
  const std::size_t n = input.size();
  if (n < 3) return {};
  Point2D lo = input[0], hi = input[0];
  for (const auto& p : input) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
  }
  const double span = std::max({hi.x - lo.x, hi.y - lo.y, 1e-12});
  const Point2D mid{0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y)};

  std::vector<Point2D> pts(input.begin(), input.end());
  pts.push_back({mid.x - 40.0 * span, mid.y - 30.0 * span});
  pts.push_back({mid.x + 40.0 * span, mid.y - 30.0 * span});
  pts.push_back({mid.x, mid.y + 40.0 * span});

  std::vector<WorkTriangle> tris;
  tris.reserve(2 * n + 8);
  tris.push_back(make_work_triangle(pts, n, n + 1, n + 2));

  std::vector<std::size_t> bad;
  std::vector<std::pair<Edge, int>> edge_count;
  std::vector<std::pair<std::size_t, std::size_t>> rim;
  const double dup_tol = 1e-12 * span;

  for (std::size_t i = 0; i < n; ++i) {
    const Point2D p = pts[i];
    bad.clear();
    bool duplicate = false;
    for (std::size_t t = 0; t < tris.size() && !duplicate; ++t) {
      const auto& tri = tris[t];
      if (!tri.alive) continue;
      const Point2D r = p - tri.center;
      if (dot(r, r) > tri.radius2 * (1.0 + 1e-9) + 1e-300) continue;
      for (auto v : tri.v)
        if (distance(pts[v], p) <= dup_tol) duplicate = true;
      if (incircle(pts[tri.v[0]], pts[tri.v[1]], pts[tri.v[2]], p) > 0.0) bad.push_back(t);
    }
    if (duplicate || bad.empty()) continue;

    // shrink the cavity until it is star-shaped with respect to p
    for (;;) {
      edge_count.clear();
      for (auto t : bad)
        for (int k = 0; k < 3; ++k) {
          const Edge e = undirected(tris[t].v[k], tris[t].v[(k + 1) % 3]);
          auto it = std::find_if(edge_count.begin(), edge_count.end(), [&](const auto& ec) { return ec.first == e; });
          if (it == edge_count.end()) edge_count.emplace_back(e, 1);
          else ++it->second;
        }
      rim.clear();
      std::size_t offender = bad.size();
      for (std::size_t bi = 0; bi < bad.size() && offender == bad.size(); ++bi) {
        const auto& tri = tris[bad[bi]];
        for (int k = 0; k < 3; ++k) {
          const std::size_t a = tri.v[k], b = tri.v[(k + 1) % 3];
          const Edge e = undirected(a, b);
          const auto it = std::find_if(edge_count.begin(), edge_count.end(), [&](const auto& ec) { return ec.first == e; });
          if (it->second != 1) continue;
          if (orient(pts[a], pts[b], p) <= 0.0) {
            offender = bi;
            break;
          }
          rim.emplace_back(a, b);
        }
      }
      if (offender == bad.size()) break;
      bad.erase(bad.begin() + static_cast<std::ptrdiff_t>(offender));
      if (bad.empty()) break;
    }
    if (bad.empty()) continue;

    for (auto t : bad) tris[t].alive = false;
    for (auto [a, b] : rim) tris.push_back(make_work_triangle(pts, a, b, i));

    if (tris.size() > 4 * n + 64) {
      std::erase_if(tris, [](const WorkTriangle& t) { return !t.alive; });
    }
  }

  std::vector<Triangle> out;
  for (const auto& t : tris) {
    if (!t.alive) continue;
    if (t.v[0] >= n || t.v[1] >= n || t.v[2] >= n) continue;
    out.push_back({t.v[0], t.v[1], t.v[2]});
  }
  return out;
}

TriangulatedDomain build_mesh(const Polygon& boundary_in, double max_edge) {
  if (!(max_edge > 0.0) || !std::isfinite(max_edge)) throw GeometryError("max_edge must be positive");
  validate_polygon(boundary_in);
  const Polygon boundary = oriented_ccw(boundary_in);
  const double h = max_edge;

  std::vector<Point2D> points;
  std::vector<Edge> segments;
  for (std::size_t i = 0; i < boundary.size(); ++i) {
    const Point2D a = boundary[i], b = boundary[(i + 1) % boundary.size()];
    const auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(distance(a, b) / h - 1e-9)));
    for (std::size_t j = 0; j < k; ++j) points.push_back(a + (static_cast<double>(j) / static_cast<double>(k)) * (b - a));
  }
  for (std::size_t i = 0; i < points.size(); ++i) segments.push_back({i, (i + 1) % points.size()});

  // interior points on a triangular lattice, kept clear of the boundary
  Point2D lo = boundary[0], hi = boundary[0];
  for (const auto& p : boundary.ring) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
  }
  const double row = h * std::sqrt(3.0) / 2.0;
  const auto rows = static_cast<long>(std::floor((hi.y - lo.y) / row));
  for (long r = 1; r <= rows; ++r) {
    const double y = lo.y + static_cast<double>(r) * row;
    const double shift = (r % 2 == 0) ? 0.0 : 0.5 * h;
    for (double x = lo.x + shift; x < hi.x; x += h) {
      const Point2D p{x, y};
      if (!contains(boundary, p, 0.0)) continue;
      if (boundary_distance(boundary, p) < 0.5 * h) continue;
      points.push_back(p);
    }
  }

  std::vector<Triangle> kept;
  for (int round = 0;; ++round) {
    if (round > 60) throw GeometryError("mesh refinement did not converge; polygon may have very sharp angles");
    const auto all = delaunay(points);
    kept.clear();
    for (const auto& t : all) {
      const Point2D c = (1.0 / 3.0) * (points[t[0]] + points[t[1]] + points[t[2]]);
      if (contains(boundary, c, 0.0)) kept.push_back(t);
    }
    std::set<Edge> edges;
    for (const auto& t : kept)
      for (int k = 0; k < 3; ++k) edges.insert(undirected(t[k], t[(k + 1) % 3]));

    bool changed = false;
    std::set<Edge> split;
    std::vector<Edge> next_segments;
    const auto split_edge = [&](Edge e) {
      if (!split.insert(e).second) return std::size_t{0};
      points.push_back(0.5 * (points[e.first] + points[e.second]));
      changed = true;
      return points.size() - 1;
    };
    for (const auto& s : segments) {
      const bool missing = !edges.contains(undirected(s.first, s.second));
      const bool too_long = distance(points[s.first], points[s.second]) > kEdgeSlack * max_edge;
      if (missing || too_long) {
        const std::size_t m = split_edge(undirected(s.first, s.second));
        next_segments.push_back({s.first, m});
        next_segments.push_back({m, s.second});
      } else {
        next_segments.push_back(s);
      }
    }
    segments = std::move(next_segments);
    for (const auto& e : edges)
      if (distance(points[e.first], points[e.second]) > kEdgeSlack * max_edge) {
        const bool is_segment = std::any_of(segments.begin(), segments.end(),
                                            [&](const Edge& s) { return undirected(s.first, s.second) == e; });
        if (!is_segment) split_edge(e);
      }
    if (!changed) break;
  }

  // compact to the vertices actually used
  std::vector<std::size_t> remap(points.size(), static_cast<std::size_t>(-1));
  std::vector<Point2D> vertices;
  for (auto& t : kept)
    for (auto& v : t) {
      if (remap[v] == static_cast<std::size_t>(-1)) {
        remap[v] = vertices.size();
        vertices.push_back(points[v]);
      }
      v = remap[v];
    }
  // deterministic vertex order: by first use is already deterministic; sort triangles for stable output
  std::sort(kept.begin(), kept.end());
  return TriangulatedDomain(std::move(vertices), std::move(kept), boundary, max_edge);
}

TriangulatedDomain::TriangulatedDomain(std::vector<Point2D> vertices, std::vector<Triangle> triangles, Polygon boundary,
                                       double max_edge)
    : vertices_(std::move(vertices)), triangles_(std::move(triangles)), boundary_(std::move(boundary)), max_edge_(max_edge) {
  validate_polygon(boundary_);
  if (triangles_.empty()) throw GeometryError("mesh has no triangles");
  const std::size_t n = vertices_.size();
  {
    auto sorted = vertices_;
    std::sort(sorted.begin(), sorted.end(), [](Point2D a, Point2D b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    for (std::size_t i = 1; i < sorted.size(); ++i)
      if (sorted[i] == sorted[i - 1]) throw GeometryError("mesh has two vertices at the same location");
  }
  dual_areas_.assign(n, 0.0);
  double total = 0.0;
  for (auto& t : triangles_) {
    for (auto v : t)
      if (v >= n) throw GeometryError("triangle references a missing vertex");
    double a2 = orient(vertices_[t[0]], vertices_[t[1]], vertices_[t[2]]);
    if (a2 < 0.0) {
      std::swap(t[1], t[2]);
      a2 = -a2;
    }
    if (a2 == 0.0) throw GeometryError("mesh has a degenerate triangle");
    for (auto v : t) dual_areas_[v] += a2 / 6.0;
    total += 0.5 * a2;
  }
  area_ = total;
  const double poly_area = isdm::area(boundary_);
  if (std::abs(total - poly_area) > 1e-9 * poly_area)
    throw GeometryError("triangles do not tile the boundary polygon (area mismatch)");
  for (std::size_t v = 0; v < n; ++v)
    if (!(dual_areas_[v] > 0.0)) throw GeometryError("mesh has a vertex not used by any triangle");
  build_locator();
}

double TriangulatedDomain::triangle_area(std::size_t t) const {
  const auto& tri = triangles_[t];
  return 0.5 * orient(vertices_[tri[0]], vertices_[tri[1]], vertices_[tri[2]]);
}

double TriangulatedDomain::longest_edge() const {
  double m = 0.0;
  for (const auto& t : triangles_)
    for (int k = 0; k < 3; ++k) m = std::max(m, distance(vertices_[t[k]], vertices_[t[(k + 1) % 3]]));
  return m;
}

double TriangulatedDomain::diameter() const { return isdm::diameter(boundary_); }

void TriangulatedDomain::build_locator() {
  lo_ = hi_ = vertices_[0];
  for (const auto& p : vertices_) {
    lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y)};
    hi_ = {std::max(hi_.x, p.x), std::max(hi_.y, p.y)};
  }
  const auto side = static_cast<std::size_t>(std::max(1.0, std::ceil(std::sqrt(triangles_.size() / 2.0))));
  nx_ = ny_ = side;
  cells_.assign(nx_ * ny_, {});
  const double wx = std::max(hi_.x - lo_.x, 1e-300) / static_cast<double>(nx_);
  const double wy = std::max(hi_.y - lo_.y, 1e-300) / static_cast<double>(ny_);
  const auto cell_x = [&](double x) {
    return std::min(nx_ - 1, static_cast<std::size_t>(std::max(0.0, std::floor((x - lo_.x) / wx))));
  };
  const auto cell_y = [&](double y) {
    return std::min(ny_ - 1, static_cast<std::size_t>(std::max(0.0, std::floor((y - lo_.y) / wy))));
  };
  for (std::size_t t = 0; t < triangles_.size(); ++t) {
    const auto& tri = triangles_[t];
    double x0 = vertices_[tri[0]].x, x1 = x0, y0 = vertices_[tri[0]].y, y1 = y0;
    for (auto v : tri) {
      x0 = std::min(x0, vertices_[v].x);
      x1 = std::max(x1, vertices_[v].x);
      y0 = std::min(y0, vertices_[v].y);
      y1 = std::max(y1, vertices_[v].y);
    }
    // pad by one ulp-ish margin so points on shared edges see both triangles
    const double px = 1e-9 * (hi_.x - lo_.x + 1.0), py = 1e-9 * (hi_.y - lo_.y + 1.0);
    for (std::size_t cy = cell_y(y0 - py); cy <= cell_y(y1 + py); ++cy)
      for (std::size_t cx = cell_x(x0 - px); cx <= cell_x(x1 + px); ++cx) cells_[cy * nx_ + cx].push_back(t);
  }
}

std::optional<std::array<double, 3>> TriangulatedDomain::barycentric(std::size_t t, Point2D p) const {
  const auto& tri = triangles_[t];
  const Point2D a = vertices_[tri[0]], b = vertices_[tri[1]], c = vertices_[tri[2]];
  const double d = orient(a, b, c);
  double l0 = orient(p, b, c) / d;
  double l1 = orient(a, p, c) / d;
  double l2 = 1.0 - l0 - l1;
  constexpr double tol = 1e-12;
  if (l0 < -tol || l1 < -tol || l2 < -tol) return std::nullopt;
  l0 = std::max(l0, 0.0);
  l1 = std::max(l1, 0.0);
  l2 = std::max(l2, 0.0);
  const double s = l0 + l1 + l2;
  if (s != 1.0) {
    l0 /= s;
    l1 /= s;
    l2 /= s;
  }
  return std::array<double, 3>{l0, l1, l2};
}

std::optional<MeshLocation> TriangulatedDomain::try_locate(Point2D p) const {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) return std::nullopt;
  const double wx = std::max(hi_.x - lo_.x, 1e-300) / static_cast<double>(nx_);
  const double wy = std::max(hi_.y - lo_.y, 1e-300) / static_cast<double>(ny_);
  const double fx = std::floor((p.x - lo_.x) / wx), fy = std::floor((p.y - lo_.y) / wy);
  if (fx < -1.0 || fy < -1.0 || fx > static_cast<double>(nx_) || fy > static_cast<double>(ny_)) return std::nullopt;
  const auto cx = std::min(nx_ - 1, static_cast<std::size_t>(std::max(0.0, fx)));
  const auto cy = std::min(ny_ - 1, static_cast<std::size_t>(std::max(0.0, fy)));
  for (auto t : cells_[cy * nx_ + cx])
    if (auto w = barycentric(t, p)) return MeshLocation{t, *w};
  return std::nullopt;
}

MeshLocation TriangulatedDomain::locate(Point2D p) const {
  if (auto loc = try_locate(p)) return *loc;
  throw OutsideDomainError(p);
}

double TriangulatedDomain::interpolate(std::span<const double> node_values, const MeshLocation& loc) const {
  if (node_values.size() != vertices_.size()) throw std::invalid_argument("node_values length must equal vertex count");
  const auto& tri = triangles_[loc.triangle];
  return loc.barycentric[0] * node_values[tri[0]] + loc.barycentric[1] * node_values[tri[1]] +
         loc.barycentric[2] * node_values[tri[2]];
}

double TriangulatedDomain::interpolate(std::span<const double> node_values, Point2D p) const {
  return interpolate(node_values, locate(p));
}

std::vector<std::size_t> TriangulatedDomain::vertices_in(const Polygon& region) const {
  std::vector<std::size_t> out;
  for (std::size_t v = 0; v < vertices_.size(); ++v)
    if (isdm::contains(region, vertices_[v])) out.push_back(v);
  return out;
}

}  // namespace isdm
