#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "poissonnet/rng.hpp"

namespace poissonnet {

struct MeshError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Vec2 {
    double x = 0.0, y = 0.0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

enum class NodeKind : std::uint8_t { Interior = 0, Dirichlet = 1, Neumann = 2 };

// ---------------------------------------------------------------------------
// random domains

struct ShapeConfig {
    int min_vertices = 6;
    int max_vertices = 12;
    double base_radius = 0.375;     // around centre (0.5, 0.5)
    double radius_amplitude = 0.125;
    double perturbation = 1.0;      // 0 = regular polygon, 1 = full jitter
    int max_retries = 64;
};

struct DomainShape {
    std::vector<Vec2> vertices;  // CCW, inside the unit square
    std::uint64_t seed = 0;
};

inline double polygon_area(const std::vector<Vec2>& poly) {
    double a = 0.0;
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        a += p.x * q.y - q.x * p.y;
    }
    return 0.5 * a;
}

inline bool point_in_polygon(const std::vector<Vec2>& poly, Vec2 p) {
    bool inside = false;
    const std::size_t n = poly.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double xint = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if (p.x < xint) inside = !inside;
        }
    }
    return inside;
}

namespace detail {

inline double orient2d(Vec2 a, Vec2 b, Vec2 c) {
    return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

inline bool segments_cross(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    const double o1 = orient2d(a, b, c), o2 = orient2d(a, b, d);
    const double o3 = orient2d(c, d, a), o4 = orient2d(c, d, b);
    return ((o1 > 0) != (o2 > 0)) && ((o3 > 0) != (o4 > 0)) &&
           o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0;
}

} // namespace detail

// brute-force simplicity check; quadratic, meant for validation and tests
inline bool is_simple_polygon(const std::vector<Vec2>& poly) {
    const std::size_t n = poly.size();
    if (n < 3) return false;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 a = poly[i], b = poly[(i + 1) % n];
        if ((b - a).norm() < 1e-12) return false;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
            if (detail::segments_cross(a, b, poly[j], poly[(j + 1) % n])) return false;
        }
    }
    return true;
}

inline double min_interior_angle_deg(const std::vector<Vec2>& poly) {
    const std::size_t n = poly.size();
    double best = 360.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 p = poly[(i + n - 1) % n], q = poly[i], r = poly[(i + 1) % n];
        Vec2 u = p - q, v = r - q;
        const double ang = std::acos(std::clamp(dot(u, v) / (u.norm() * v.norm()), -1.0, 1.0));
        best = std::min(best, ang * 180.0 / M_PI);
    }
    return best;
}

// Star-shaped polygon around (0.5, 0.5): evenly spaced angles with jitter and
// radius in [base - amp, base + amp], both scaled by `perturbation`. Zero
// perturbation gives a regular polygon with the first vertex at 45 degrees.
inline DomainShape sample_domain(std::uint64_t seed, const ShapeConfig& config = {}) {
    Rng rng(Rng::mix(seed, 0x5eedd0ca1));
    for (int attempt = 0; attempt < config.max_retries; ++attempt) {
        const int nv = config.min_vertices == config.max_vertices
                           ? config.min_vertices
                           : rng.uniform_int(config.min_vertices, config.max_vertices);
        const double gap = 2.0 * M_PI / nv;
        std::vector<Vec2> pts(nv);
        for (int i = 0; i < nv; ++i) {
            const double jitter = config.perturbation * rng.uniform(-0.45, 0.45) * gap;
            const double theta = M_PI / 4.0 + gap * i + jitter;
            const double r = config.base_radius +
                             config.perturbation * rng.uniform(-config.radius_amplitude, config.radius_amplitude);
            pts[i] = {0.5 + r * std::cos(theta), 0.5 + r * std::sin(theta)};
        }
        bool in_box = true;
        for (const Vec2& p : pts)
            in_box &= p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0;
        if (!in_box) continue;
        if (!is_simple_polygon(pts)) continue;
        if (polygon_area(pts) < 0.05) continue;
        if (min_interior_angle_deg(pts) < 35.0) continue;
        return DomainShape{std::move(pts), seed};
    }
    throw MeshError("sample_domain: no valid polygon within retry budget");
}

// ---------------------------------------------------------------------------
// mesh

struct BoundaryEdge {
    int a = -1, b = -1;  // directed so the owning triangle lies on the left
    Vec2 normal;         // outward unit normal
};

struct Mesh {
    std::vector<Vec2> coords;
    std::vector<std::array<int, 3>> triangles;   // CCW
    std::vector<BoundaryEdge> boundary_edges;
    std::vector<NodeKind> node_kind;

    int num_nodes() const { return static_cast<int>(coords.size()); }
};

inline std::vector<std::vector<int>> node_adjacency(const Mesh& mesh) {
    std::vector<std::vector<int>> adj(mesh.coords.size());
    auto link = [&](int a, int b) {
        if (std::find(adj[a].begin(), adj[a].end(), b) == adj[a].end()) adj[a].push_back(b);
    };
    for (const auto& t : mesh.triangles)
        for (int e = 0; e < 3; ++e) {
            link(t[e], t[(e + 1) % 3]);
            link(t[(e + 1) % 3], t[e]);
        }
    for (auto& v : adj) std::sort(v.begin(), v.end());
    return adj;
}

// ---------------------------------------------------------------------------
// constrained Delaunay triangulation with interior refinement

namespace detail {

class Triangulator {
public:
    explicit Triangulator(const std::vector<Vec2>& chain) {
        // super-triangle well outside the unit square
        pts_ = {{0.5 - 120.0, 0.5 - 80.0}, {0.5 + 120.0, 0.5 - 80.0}, {0.5, 0.5 + 140.0}};
        tris_.push_back(Tri{{0, 1, 2}, {-1, -1, -1}, true, false});
        vert_tri_ = {0, 0, 0};
        for (const Vec2& p : chain) insert_point(p);
    }

    int insert_point(Vec2 p) {
        auto [t, kind, edge, vertex] = locate(p);
        if (kind == LocateKind::Vertex) return vertex;
        const int id = static_cast<int>(pts_.size());
        pts_.push_back(p);
        vert_tri_.push_back(-1);
        touched_.clear();
        if (kind == LocateKind::Interior)
            split_interior(t, id);
        else
            split_edge(t, edge, id);
        legalize_pending();
        return id;
    }

    void insert_constraint(int a, int b) {
        if (a == b) throw MeshError("constraint endpoints coincide");
        if (find_edge(a, b).first >= 0) {
            constrained_.insert(edge_key(a, b));
            return;
        }
        std::deque<std::pair<int, int>> crossing = collect_crossings(a, b);
        std::size_t guard = 0;
        const std::size_t limit = 4096 + crossing.size() * crossing.size() * 16;
        while (!crossing.empty()) {
            if (++guard > limit) throw MeshError("constraint recovery did not converge");
            auto [p, q] = crossing.front();
            crossing.pop_front();
            auto [t, e] = find_edge(p, q);
            if (t < 0) continue;  // flipped away already
            if (is_constrained(p, q)) throw MeshError("constraint crosses a constraint");
            const int u = tris_[t].nb[e];
            if (u < 0) throw MeshError("constraint crossing walked off hull");
            const int r = tris_[t].v[e];
            const int s = tris_[u].v[edge_index(u, q, p)];
            const double o1 = orient2d(pts_[r], pts_[s], pts_[p]);
            const double o2 = orient2d(pts_[r], pts_[s], pts_[q]);
            if ((o1 > kEps && o2 < -kEps) || (o1 < -kEps && o2 > kEps)) {
                flip(t, e);
                if (segments_cross(pts_[r], pts_[s], pts_[a], pts_[b]))
                    crossing.emplace_back(r, s);
            } else {
                crossing.emplace_back(p, q);  // quad not convex yet, retry later
            }
        }
        if (find_edge(a, b).first < 0) throw MeshError("constraint edge not recovered");
        constrained_.insert(edge_key(a, b));
    }

    // global Lawson sweep: flip every non-constrained, non-Delaunay edge
    void restore_delaunay() {
        for (int pass = 0; pass < 64; ++pass) {
            int flips = 0;
            for (int t = 0; t < static_cast<int>(tris_.size()); ++t) {
                if (!tris_[t].alive) continue;
                for (int e = 0; e < 3; ++e) {
                    const int u = tris_[t].nb[e];
                    if (u < t) continue;  // visit each edge once
                    if (should_flip(t, e)) {
                        flip(t, e);
                        ++flips;
                        break;
                    }
                }
            }
            if (flips == 0) return;
        }
        throw MeshError("Delaunay restoration did not converge");
    }

    void classify_inside() {
        // flood from super-triangle corners; constrained edges are walls
        for (auto& t : tris_)
            if (t.alive) t.inside = true;
        std::deque<int> work;
        for (int t = 0; t < static_cast<int>(tris_.size()); ++t) {
            if (!tris_[t].alive) continue;
            if (tris_[t].v[0] < 3 || tris_[t].v[1] < 3 || tris_[t].v[2] < 3) {
                tris_[t].inside = false;
                work.push_back(t);
            }
        }
        while (!work.empty()) {
            const int t = work.front();
            work.pop_front();
            for (int e = 0; e < 3; ++e) {
                const int u = tris_[t].nb[e];
                if (u < 0 || !tris_[u].alive || !tris_[u].inside) continue;
                if (is_constrained(tris_[t].v[(e + 1) % 3], tris_[t].v[(e + 2) % 3])) continue;
                tris_[u].inside = false;
                work.push_back(u);
            }
        }
    }

    void refine(double target_edge_length) {
        classify_inside();
        const double lmin = 0.25 * target_edge_length;
        std::deque<int> work;
        for (int t = 0; t < static_cast<int>(tris_.size()); ++t)
            if (tris_[t].alive && tris_[t].inside) work.push_back(t);
        int inserted = 0;
        const int budget = 200000;
        std::size_t last_points = pts_.size();
        std::size_t stalled = 0;
        while (!work.empty()) {
            const int t = work.front();
            work.pop_front();
            if (t >= static_cast<int>(tris_.size()) || !tris_[t].alive || !tris_[t].inside) continue;
            if (!is_bad(t, target_edge_length, lmin)) continue;
            if (pts_.size() != last_points) {
                last_points = pts_.size();
                stalled = 0;
            } else if (++stalled > 2 * work.size() + 256) {
                break;  // remaining bad triangles are unfixable ties; accept them
            }
            if (++inserted > budget) throw MeshError("refinement budget exhausted");

            const Vec2 c = circumcenter(t);
            bool progressed = false;
            const int enc = std::isfinite(c.x) && std::isfinite(c.y)
                                ? find_encroached_segment(c, 2.0 * lmin)
                                : -1;
            if (enc >= 0) {
                progressed = split_known_edge(enc / 4, enc % 4, work);
            } else if (std::isfinite(c.x) && std::isfinite(c.y)) {
                auto [ct, kind, edge, vertex] = locate_checked(c);
                if (kind != LocateKind::Vertex && ct >= 0 && tris_[ct].inside) {
                    touched_.clear();
                    const int id = static_cast<int>(pts_.size());
                    pts_.push_back(c);
                    vert_tri_.push_back(-1);
                    if (kind == LocateKind::Interior)
                        split_interior(ct, id);
                    else
                        split_edge(ct, edge, id);
                    legalize_pending();
                    queue_touched(work);
                    progressed = true;
                }
            }
            if (!progressed) progressed = fallback_split(t, lmin, work);
            if (progressed && t < static_cast<int>(tris_.size()) && tris_[t].alive && tris_[t].inside)
                work.push_back(t);  // re-check: cocircular ties can leave it untouched
        }
    }

    Mesh extract() const {
        Mesh mesh;
        std::vector<int> remap(pts_.size(), -1);
        for (const auto& t : tris_) {
            if (!t.alive || !t.inside) continue;
            std::array<int, 3> tri{};
            for (int e = 0; e < 3; ++e) {
                const int v = t.v[e];
                if (v < 3) throw MeshError("super vertex inside domain");
                if (remap[v] < 0) {
                    remap[v] = mesh.num_nodes();
                    mesh.coords.push_back(pts_[v]);
                }
                tri[e] = remap[v];
            }
            const double area = 0.5 * orient2d(mesh.coords[tri[0]], mesh.coords[tri[1]], mesh.coords[tri[2]]);
            if (area <= 0.0) std::swap(tri[1], tri[2]);
            mesh.triangles.push_back(tri);
        }
        if (mesh.triangles.empty()) throw MeshError("empty triangulation");
        // boundary edges: inside triangle faces whose neighbour is outside
        for (int t = 0; t < static_cast<int>(tris_.size()); ++t) {
            if (!tris_[t].alive || !tris_[t].inside) continue;
            for (int e = 0; e < 3; ++e) {
                const int u = tris_[t].nb[e];
                if (u >= 0 && tris_[u].alive && tris_[u].inside) continue;
                const int a = remap[tris_[t].v[(e + 1) % 3]];
                const int b = remap[tris_[t].v[(e + 2) % 3]];
                BoundaryEdge be;
                be.a = a;
                be.b = b;
                const Vec2 pa = mesh.coords[a], pb = mesh.coords[b];
                const Vec2 dir = pb - pa;
                const double len = dir.norm();
                Vec2 n{dir.y / len, -dir.x / len};
                const Vec2 mid = (pa + pb) * 0.5;
                const int apex = remap[tris_[t].v[e]];
                const Vec2 centroid = (pa + pb + mesh.coords[apex]) * (1.0 / 3.0);
                if (dot(n, centroid - mid) > 0) n = {-n.x, -n.y};
                be.normal = n;
                mesh.boundary_edges.push_back(be);
            }
        }
        mesh.node_kind.assign(mesh.coords.size(), NodeKind::Interior);
        for (const auto& be : mesh.boundary_edges) {
            mesh.node_kind[be.a] = NodeKind::Dirichlet;
            mesh.node_kind[be.b] = NodeKind::Dirichlet;
        }
        return mesh;
    }

    // adjacency consistency check, used by tests and debugging
    void validate() const {
        for (int t = 0; t < static_cast<int>(tris_.size()); ++t) {
            if (!tris_[t].alive) continue;
            const Vec2 a = pts_[tris_[t].v[0]], b = pts_[tris_[t].v[1]], c = pts_[tris_[t].v[2]];
            if (orient2d(a, b, c) <= 0.0) throw MeshError("validate: non-CCW triangle");
            for (int e = 0; e < 3; ++e) {
                const int u = tris_[t].nb[e];
                if (u < 0) continue;
                if (!tris_[u].alive) throw MeshError("validate: dead neighbour");
                const int p = tris_[t].v[(e + 1) % 3], q = tris_[t].v[(e + 2) % 3];
                const int f = edge_index(u, p, q);
                if (tris_[u].nb[f] != t) throw MeshError("validate: asymmetric adjacency");
            }
        }
    }

private:
    struct Tri {
        std::array<int, 3> v;
        std::array<int, 3> nb;  // nb[i] shares the edge opposite v[i]
        bool alive = true;
        bool inside = false;
    };
    enum class LocateKind { Interior, Edge, Vertex };

    static constexpr double kEps = 1e-13;

    std::vector<Vec2> pts_;
    std::vector<Tri> tris_;
    std::vector<int> vert_tri_;
    std::unordered_set<std::uint64_t> constrained_;
    std::vector<std::pair<int, int>> pending_;  // legalization stack (tri, edge)
    std::vector<int> touched_;
    int hint_ = 0;

    static std::uint64_t edge_key(int a, int b) {
        const std::uint64_t lo = static_cast<std::uint64_t>(std::min(a, b));
        const std::uint64_t hi = static_cast<std::uint64_t>(std::max(a, b));
        return (hi << 32) | lo;
    }
    bool is_constrained(int a, int b) const { return constrained_.count(edge_key(a, b)) > 0; }

    int edge_index(int t, int a, int b) const {
        for (int e = 0; e < 3; ++e) {
            const int p = tris_[t].v[(e + 1) % 3], q = tris_[t].v[(e + 2) % 3];
            if ((p == a && q == b) || (p == b && q == a)) return e;
        }
        throw MeshError("edge not found in triangle");
    }
    int vertex_index(int t, int v) const {
        for (int e = 0; e < 3; ++e)
            if (tris_[t].v[e] == v) return e;
        throw MeshError("vertex not found in triangle");
    }

    bool has_vertex(int t, int v) const {
        return tris_[t].v[0] == v || tris_[t].v[1] == v || tris_[t].v[2] == v;
    }

    int incident_triangle(int a) const {
        const int cached = vert_tri_[a];
        if (cached >= 0 && cached < static_cast<int>(tris_.size()) && tris_[cached].alive &&
            has_vertex(cached, a))
            return cached;
        for (int t = 0; t < static_cast<int>(tris_.size()); ++t)
            if (tris_[t].alive && has_vertex(t, a)) return t;
        return -1;
    }

    std::pair<int, int> find_edge(int a, int b) const {
        // rotate around a
        const int start = incident_triangle(a);
        if (start < 0) return {-1, -1};
        int t = start;
        for (std::size_t guard = 0; guard <= tris_.size(); ++guard) {
            const int i = vertex_index(t, a);
            if (tris_[t].v[(i + 1) % 3] == b || tris_[t].v[(i + 2) % 3] == b) {
                for (int e = 0; e < 3; ++e) {
                    const int p = tris_[t].v[(e + 1) % 3], q = tris_[t].v[(e + 2) % 3];
                    if ((p == a && q == b) || (p == b && q == a)) return {t, e};
                }
            }
            t = tris_[t].nb[(i + 1) % 3];
            if (t < 0 || t == start) break;
        }
        // rotation hit the hull or a stale pointer: brute force
        for (int s = 0; s < static_cast<int>(tris_.size()); ++s) {
            if (!tris_[s].alive) continue;
            for (int e = 0; e < 3; ++e) {
                const int p = tris_[s].v[(e + 1) % 3], q = tris_[s].v[(e + 2) % 3];
                if ((p == a && q == b) || (p == b && q == a)) return {s, e};
            }
        }
        return {-1, -1};
    }

    std::tuple<int, LocateKind, int, int> locate(Vec2 p) const {
        auto r = locate_checked(p);
        if (std::get<0>(r) < 0) throw MeshError("point location failed");
        return r;
    }

    static double orient_tol(Vec2 a, Vec2 b, Vec2 p) {
        return 8.0 * std::numeric_limits<double>::epsilon() *
               (std::fabs((b.x - a.x) * (p.y - a.y)) + std::fabs((b.y - a.y) * (p.x - a.x)) + 1e-300);
    }

    std::tuple<int, LocateKind, int, int> locate_checked(Vec2 p) const {
        int t = (hint_ >= 0 && hint_ < static_cast<int>(tris_.size()) && tris_[hint_].alive) ? hint_ : -1;
        if (t < 0)
            for (int i = 0; i < static_cast<int>(tris_.size()); ++i)
                if (tris_[i].alive) {
                    t = i;
                    break;
                }
        for (std::size_t step = 0; step < 4 * tris_.size() + 16; ++step) {
            double omin = std::numeric_limits<double>::infinity();
            int emin = -1;
            std::array<double, 3> os{};
            std::array<double, 3> tol{};
            for (int e = 0; e < 3; ++e) {
                const Vec2 a = pts_[tris_[t].v[(e + 1) % 3]];
                const Vec2 b = pts_[tris_[t].v[(e + 2) % 3]];
                os[e] = orient2d(a, b, p);
                tol[e] = orient_tol(a, b, p);
                if (os[e] < omin) {
                    omin = os[e];
                    emin = e;
                }
            }
            if (omin >= -tol[emin]) {
                for (int e = 0; e < 3; ++e) {
                    const Vec2 v = pts_[tris_[t].v[e]];
                    const Vec2 d = v - p;
                    if (d.x * d.x + d.y * d.y < 1e-24)
                        return {t, LocateKind::Vertex, -1, tris_[t].v[e]};
                }
                int ebest = -1;
                double obest = std::numeric_limits<double>::infinity();
                for (int e = 0; e < 3; ++e)
                    if (std::fabs(os[e]) <= tol[e] && std::fabs(os[e]) < obest) {
                        obest = std::fabs(os[e]);
                        ebest = e;
                    }
                if (ebest >= 0) return {t, LocateKind::Edge, ebest, -1};
                return {t, LocateKind::Interior, -1, -1};
            }
            const int next = tris_[t].nb[emin];
            if (next < 0) return {-1, LocateKind::Interior, -1, -1};
            t = next;
        }
        return {-1, LocateKind::Interior, -1, -1};
    }

    void set_neighbor(int t, int e, int n) {
        if (t >= 0) tris_[t].nb[e] = n;
    }
    void repoint(int t) {
        if (t < 0) return;
        for (int e = 0; e < 3; ++e) vert_tri_[tris_[t].v[e]] = t;
    }
    int neighbor_edge(int u, int a, int b) const { return u < 0 ? -1 : edge_index(u, a, b); }

    void split_interior(int t, int p) {
        const std::array<int, 3> v = tris_[t].v;
        const std::array<int, 3> nb = tris_[t].nb;
        const int t0 = t;
        const int t1 = static_cast<int>(tris_.size());
        const int t2 = t1 + 1;
        const bool inside = tris_[t].inside;
        tris_[t0] = Tri{{p, v[1], v[2]}, {nb[0], t1, t2}, true, inside};
        tris_.push_back(Tri{{p, v[2], v[0]}, {nb[1], t2, t0}, true, inside});
        tris_.push_back(Tri{{p, v[0], v[1]}, {nb[2], t0, t1}, true, inside});
        if (nb[0] >= 0) set_neighbor(nb[0], neighbor_edge(nb[0], v[1], v[2]), t0);
        if (nb[1] >= 0) set_neighbor(nb[1], neighbor_edge(nb[1], v[2], v[0]), t1);
        if (nb[2] >= 0) set_neighbor(nb[2], neighbor_edge(nb[2], v[0], v[1]), t2);
        repoint(t0);
        repoint(t1);
        repoint(t2);
        hint_ = t0;
        pending_.push_back({t0, 0});
        pending_.push_back({t1, 0});
        pending_.push_back({t2, 0});
        touched_.push_back(t0);
        touched_.push_back(t1);
        touched_.push_back(t2);
    }

    void split_edge(int t, int e, int p) {
        const int a = tris_[t].v[(e + 1) % 3];
        const int b = tris_[t].v[(e + 2) % 3];
        const int w = tris_[t].v[e];
        const int u = tris_[t].nb[e];
        const int n_a = tris_[t].nb[(e + 1) % 3];  // across (b, w)
        const int n_b = tris_[t].nb[(e + 2) % 3];  // across (w, a)
        const bool t_inside = tris_[t].inside;
        if (is_constrained(a, b)) {
            constrained_.erase(edge_key(a, b));
            constrained_.insert(edge_key(a, p));
            constrained_.insert(edge_key(p, b));
        }

        const int tA = t;                               // (w, a, p)
        const int tB = static_cast<int>(tris_.size());  // (w, p, b)
        int uA = -1, uB = -1, z = -1, m_a = -1, m_b = -1;
        bool u_inside = false;
        if (u >= 0) {
            z = tris_[u].v[edge_index(u, a, b)];
            m_a = tris_[u].nb[edge_index(u, z, b)];
            m_b = tris_[u].nb[edge_index(u, a, z)];
            u_inside = tris_[u].inside;
            uA = u;      // (z, b, p)
            uB = tB + 1; // (z, p, a)
        }
        tris_[tA] = Tri{{w, a, p}, {-1, -1, -1}, true, t_inside};
        tris_.push_back(Tri{{w, p, b}, {-1, -1, -1}, true, t_inside});
        if (u >= 0) {
            tris_[uA] = Tri{{z, b, p}, {-1, -1, -1}, true, u_inside};
            tris_.push_back(Tri{{z, p, a}, {-1, -1, -1}, true, u_inside});
        }
        wire(tA, a, p, uB);
        wire(tA, p, w, tB);
        wire(tA, w, a, n_b);
        wire(tB, p, b, uA);
        wire(tB, b, w, n_a);
        wire(tB, w, p, tA);
        if (n_b >= 0) set_neighbor(n_b, neighbor_edge(n_b, w, a), tA);
        if (n_a >= 0) set_neighbor(n_a, neighbor_edge(n_a, b, w), tB);
        if (u >= 0) {
            wire(uA, b, p, tB);
            wire(uA, p, z, uB);
            wire(uA, z, b, m_a);
            wire(uB, p, a, tA);
            wire(uB, a, z, m_b);
            wire(uB, z, p, uA);
            if (m_a >= 0) set_neighbor(m_a, neighbor_edge(m_a, z, b), uA);
            if (m_b >= 0) set_neighbor(m_b, neighbor_edge(m_b, a, z), uB);
            repoint(uA);
            repoint(uB);
            pending_.push_back({uA, edge_index(uA, z, b)});
            pending_.push_back({uB, edge_index(uB, a, z)});
            touched_.push_back(uA);
            touched_.push_back(uB);
        }
        repoint(tA);
        repoint(tB);
        hint_ = tA;
        pending_.push_back({tA, edge_index(tA, w, a)});
        pending_.push_back({tB, edge_index(tB, b, w)});
        touched_.push_back(tA);
        touched_.push_back(tB);
    }

    void wire(int t, int a, int b, int n) { tris_[t].nb[edge_index(t, a, b)] = n; }

    bool should_flip(int t, int e) const {
        const int u = tris_[t].nb[e];
        if (u < 0) return false;
        const int a = tris_[t].v[(e + 1) % 3];
        const int b = tris_[t].v[(e + 2) % 3];
        if (is_constrained(a, b)) return false;
        const int c = tris_[t].v[e];
        const int d = tris_[u].v[edge_index(u, a, b)];
        const Vec2 pa = pts_[a], pb = pts_[b], pc = pts_[c], pd = pts_[d];
        // incircle of CCW (c, a, b) against d, with relative tolerance
        const double adx = pc.x - pd.x, ady = pc.y - pd.y;
        const double bdx = pa.x - pd.x, bdy = pa.y - pd.y;
        const double cdx = pb.x - pd.x, cdy = pb.y - pd.y;
        const double ad = adx * adx + ady * ady;
        const double bd = bdx * bdx + bdy * bdy;
        const double cd = cdx * cdx + cdy * cdy;
        const double det = adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) +
                           ad * (bdx * cdy - bdy * cdx);
        const double mag = std::fabs(adx) * (std::fabs(bdy) * cd + bd * std::fabs(cdy)) +
                           std::fabs(ady) * (std::fabs(bdx) * cd + bd * std::fabs(cdx)) +
                           ad * (std::fabs(bdx) * std::fabs(cdy) + std::fabs(bdy) * std::fabs(cdx));
        return det > 1e-12 * mag;
    }

    void flip(int t, int e) {
        const int u = tris_[t].nb[e];
        if (u < 0) throw MeshError("flip on hull edge");
        const int a = tris_[t].v[(e + 1) % 3];
        const int b = tris_[t].v[(e + 2) % 3];
        const int c = tris_[t].v[e];
        const int f = edge_index(u, a, b);
        const int d = tris_[u].v[f];
        const int n1 = tris_[t].nb[edge_index(t, b, c)];
        const int n2 = tris_[t].nb[edge_index(t, c, a)];
        const int m1 = tris_[u].nb[edge_index(u, a, d)];
        const int m2 = tris_[u].nb[edge_index(u, d, b)];
        const bool inside = tris_[t].inside;
        tris_[t] = Tri{{c, a, d}, {-1, -1, -1}, true, inside};
        tris_[u] = Tri{{c, d, b}, {-1, -1, -1}, true, tris_[u].inside};
        wire(t, a, d, m1);
        wire(t, d, c, u);
        wire(t, c, a, n2);
        wire(u, d, b, m2);
        wire(u, b, c, n1);
        wire(u, c, d, t);
        if (m1 >= 0) set_neighbor(m1, neighbor_edge(m1, a, d), t);
        if (m2 >= 0) set_neighbor(m2, neighbor_edge(m2, d, b), u);
        if (n1 >= 0) set_neighbor(n1, neighbor_edge(n1, b, c), u);
        if (n2 >= 0) set_neighbor(n2, neighbor_edge(n2, c, a), t);
        repoint(t);
        repoint(u);
        touched_.push_back(t);
        touched_.push_back(u);
    }

    void legalize_pending() {
        std::size_t guard = 0;
        while (!pending_.empty()) {
            if (++guard > 64 * tris_.size() + 4096) throw MeshError("legalization did not converge");
            auto [t, e] = pending_.back();
            pending_.pop_back();
            if (t >= static_cast<int>(tris_.size()) || !tris_[t].alive) continue;
            if (e < 0 || e > 2) continue;
            if (should_flip(t, e)) {
                const int u = tris_[t].nb[e];
                const int a = tris_[t].v[(e + 1) % 3];
                const int b = tris_[t].v[(e + 2) % 3];
                const int c = tris_[t].v[e];
                const int d = tris_[u].v[edge_index(u, a, b)];
                flip(t, e);
                pending_.push_back({t, edge_index(t, a, d)});
                pending_.push_back({u, edge_index(u, d, b)});
                (void)c;
            }
        }
    }

    std::deque<std::pair<int, int>> collect_crossings(int a, int b) const {
        // walk incident triangles of a; find the one whose opposite edge blocks (a, b)
        std::deque<std::pair<int, int>> out;
        const int start = incident_triangle(a);
        if (start < 0) throw MeshError("collect_crossings: bad start vertex");
        int t = start;
        int first = -1;
        for (std::size_t guard = 0; guard <= 2 * tris_.size(); ++guard) {
            const int i = vertex_index(t, a);
            const int p = tris_[t].v[(i + 1) % 3];
            const int q = tris_[t].v[(i + 2) % 3];
            if (segments_cross(pts_[p], pts_[q], pts_[a], pts_[b])) {
                first = t;
                out.emplace_back(p, q);
                break;
            }
            t = tris_[t].nb[(i + 1) % 3];
            if (t < 0 || t == start) break;
        }
        if (first < 0) throw MeshError("collect_crossings: no crossing found");
        // march along the segment
        int cur = first;
        int pe = edge_index(cur, out.back().first, out.back().second);
        for (std::size_t guard = 0; guard <= 2 * tris_.size(); ++guard) {
            const int u = tris_[cur].nb[pe];
            if (u < 0) throw MeshError("collect_crossings: walked off hull");
            const int je = edge_index(u, out.back().first, out.back().second);
            const int w = tris_[u].v[je];
            if (w == b) return out;
            const int p = out.back().first, q = out.back().second;
            if (segments_cross(pts_[p], pts_[w], pts_[a], pts_[b])) {
                out.emplace_back(p, w);
                pe = edge_index(u, p, w);
            } else if (segments_cross(pts_[w], pts_[q], pts_[a], pts_[b])) {
                out.emplace_back(w, q);
                pe = edge_index(u, w, q);
            } else {
                throw MeshError("collect_crossings: lost the segment");
            }
            cur = u;
        }
        throw MeshError("collect_crossings: march did not terminate");
    }

    Vec2 circumcenter(int t) const {
        const Vec2 a = pts_[tris_[t].v[0]], b = pts_[tris_[t].v[1]], c = pts_[tris_[t].v[2]];
        const double d = 2.0 * ((a.x - c.x) * (b.y - c.y) - (b.x - c.x) * (a.y - c.y));
        const double a2 = a.x * a.x + a.y * a.y, b2 = b.x * b.x + b.y * b.y, c2 = c.x * c.x + c.y * c.y;
        return {((a2 - c2) * (b.y - c.y) - (b2 - c2) * (a.y - c.y)) / d,
                ((b2 - c2) * (a.x - c.x) - (a2 - c2) * (b.x - c.x)) / d};
    }

    bool is_bad(int t, double tel, double lmin) const {
        const Vec2 a = pts_[tris_[t].v[0]], b = pts_[tris_[t].v[1]], c = pts_[tris_[t].v[2]];
        const double lab = (b - a).norm(), lbc = (c - b).norm(), lca = (a - c).norm();
        const double lmax = std::max({lab, lbc, lca});
        if (lmax > tel * (1.0 + 1e-12)) return true;
        const double lmin_edge = std::min({lab, lbc, lca});
        if (lmin_edge <= lmin) return false;  // termination guard near constraints
        const double area2 = std::fabs(orient2d(a, b, c));
        // min angle >= 20 deg  <=>  sin(min angle) >= sin 20; sin(C) = area2/(l1*l2)
        const double s = std::sin(20.0 * M_PI / 180.0);
        return area2 / (lab * lbc) < s || area2 / (lbc * lca) < s || area2 / (lca * lab) < s;
    }

    int find_encroached_segment(Vec2 c, double min_split_len) const {
        // returns an encoded handle (triangle, edge) of a constrained edge whose
        // diametral circle strictly contains c, or -1
        for (int t = 0; t < static_cast<int>(tris_.size()); ++t) {
            if (!tris_[t].alive) continue;
            for (int e = 0; e < 3; ++e) {
                const int u = tris_[t].nb[e];
                if (u >= 0 && u < t) continue;
                const int a = tris_[t].v[(e + 1) % 3];
                const int b = tris_[t].v[(e + 2) % 3];
                if (!is_constrained(a, b)) continue;
                const Vec2 pa = pts_[a], pb = pts_[b];
                const double len = (pb - pa).norm();
                if (len < min_split_len) continue;
                const Vec2 mid = (pa + pb) * 0.5;
                if ((c - mid).norm() < 0.5 * len * (1.0 - 1e-12)) return t * 4 + e;
            }
        }
        return -1;
    }

    void queue_touched(std::deque<int>& work) {
        for (int nt : touched_)
            if (nt < static_cast<int>(tris_.size()) && tris_[nt].alive && tris_[nt].inside)
                work.push_back(nt);
    }

    // splits edge e of triangle t at its midpoint; the handle is fresh so no
    // point location is needed
    bool split_known_edge(int t, int e, std::deque<int>& work) {
        const int a = tris_[t].v[(e + 1) % 3];
        const int b = tris_[t].v[(e + 2) % 3];
        const Vec2 mid = (pts_[a] + pts_[b]) * 0.5;
        for (int k = 0; k < 3; ++k) {
            const Vec2 d = pts_[tris_[t].v[k]] - mid;
            if (d.x * d.x + d.y * d.y < 1e-24) return false;
        }
        touched_.clear();
        const int id = static_cast<int>(pts_.size());
        pts_.push_back(mid);
        vert_tri_.push_back(-1);
        split_edge(t, e, id);
        legalize_pending();
        queue_touched(work);
        return true;
    }

    bool fallback_split(int t, double lmin, std::deque<int>& work) {
        // circumcenter unusable: split the longest edge instead
        int ebest = 0;
        double lbest = -1.0;
        for (int e = 0; e < 3; ++e) {
            const Vec2 a = pts_[tris_[t].v[(e + 1) % 3]];
            const Vec2 b = pts_[tris_[t].v[(e + 2) % 3]];
            const double l = (b - a).norm();
            if (l > lbest) {
                lbest = l;
                ebest = e;
            }
        }
        if (lbest < 2.0 * lmin) return false;  // too small to split; accept as-is
        return split_known_edge(t, ebest, work);
    }
};

} // namespace detail

// Conforming triangulation of the polygon interior: constrained Delaunay of
// the boundary chain followed by circumcenter refinement until every triangle
// has its longest edge below target_edge_length and a minimum angle of ~20deg.
inline Mesh triangulate(const DomainShape& shape, double target_edge_length) {
    if (!(target_edge_length > 0.0)) throw std::invalid_argument("target_edge_length must be positive");
    const std::size_t nv = shape.vertices.size();
    if (nv < 3) throw MeshError("polygon needs at least 3 vertices");

    // Split each polygon edge into pieces somewhat shorter than
    // target_edge_length; circumcenter refinement settles the interior near
    // 0.7 * target, so matching that keeps boundary and interior density even.
    std::vector<Vec2> chain;
    const double boundary_step = 0.75 * target_edge_length;
    for (std::size_t i = 0; i < nv; ++i) {
        const Vec2 a = shape.vertices[i];
        const Vec2 b = shape.vertices[(i + 1) % nv];
        const double len = (b - a).norm();
        const int nseg = std::max(1, static_cast<int>(std::ceil(len / boundary_step - 1e-9)));
        for (int s = 0; s < nseg; ++s) {
            const double w = static_cast<double>(s) / nseg;
            chain.push_back({a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)});
        }
    }

    detail::Triangulator tri(chain);
    const int m = static_cast<int>(chain.size());
    for (int i = 0; i < m; ++i) tri.insert_constraint(3 + i, 3 + (i + 1) % m);
    tri.restore_delaunay();
    tri.refine(target_edge_length);
    tri.restore_delaunay();
    tri.classify_inside();
    return tri.extract();
}

// ---------------------------------------------------------------------------
// boundary conditions

enum class BoundaryPolicyKind { AllDirichlet, HalfSplit, RandomArc };

struct BoundaryPolicy {
    BoundaryPolicyKind kind = BoundaryPolicyKind::RandomArc;
    double neumann_fraction_min = 0.2;  // RandomArc: fraction of the loop
    double neumann_fraction_max = 0.5;
};

// boundary edge indices ordered into the (single) closed loop, starting at
// the lexicographically smallest boundary node
inline std::vector<int> boundary_loop(const Mesh& mesh) {
    std::unordered_map<int, int> next;  // node -> boundary edge leaving it
    for (int e = 0; e < static_cast<int>(mesh.boundary_edges.size()); ++e) {
        if (!next.emplace(mesh.boundary_edges[e].a, e).second)
            throw MeshError("boundary is not a single loop (branching)");
    }
    int start = -1;
    for (const auto& [node, e] : next) {
        if (start < 0) start = node;
        const Vec2 p = mesh.coords[node], q = mesh.coords[start];
        if (p.x < q.x || (p.x == q.x && p.y < q.y)) start = node;
    }
    if (start < 0) throw MeshError("mesh has no boundary");
    std::vector<int> loop;
    int node = start;
    do {
        const auto it = next.find(node);
        if (it == next.end()) throw MeshError("open boundary chain");
        loop.push_back(it->second);
        node = mesh.boundary_edges[it->second].b;
    } while (node != start && loop.size() <= mesh.boundary_edges.size());
    if (loop.size() != mesh.boundary_edges.size())
        throw MeshError("boundary is not a single loop");
    return loop;
}

// Labels contiguous arcs of the boundary loop. Nodes touching any Dirichlet
// edge are Dirichlet, so arc junbreak nodes resolve to Dirichlet.
inline Mesh assign_boundary_kinds(const Mesh& mesh, const BoundaryPolicy& policy, std::uint64_t seed) {
    const std::vector<int> loop = boundary_loop(mesh);
    const int m = static_cast<int>(loop.size());
    std::vector<bool> neumann_edge(m, false);
    switch (policy.kind) {
        case BoundaryPolicyKind::AllDirichlet:
            break;
        case BoundaryPolicyKind::HalfSplit:
            for (int i = m / 2; i < m; ++i) neumann_edge[i] = true;
            break;
        case BoundaryPolicyKind::RandomArc: {
            Rng rng(Rng::mix(seed, 0xb0a2dca2c5ULL));
            const double frac = rng.uniform(policy.neumann_fraction_min, policy.neumann_fraction_max);
            const int len = std::clamp(static_cast<int>(std::lround(frac * m)), 0, m);
            const int start = rng.uniform_int(0, m - 1);
            for (int i = 0; i < len; ++i) neumann_edge[(start + i) % m] = true;
            break;
        }
    }
    Mesh out = mesh;
    for (auto& k : out.node_kind)
        if (k != NodeKind::Interior) k = NodeKind::Neumann;
    for (int i = 0; i < m; ++i) {
        if (neumann_edge[i]) continue;
        out.node_kind[mesh.boundary_edges[loop[i]].a] = NodeKind::Dirichlet;
        out.node_kind[mesh.boundary_edges[loop[i]].b] = NodeKind::Dirichlet;
    }
    const int dirichlet = static_cast<int>(
        std::count(out.node_kind.begin(), out.node_kind.end(), NodeKind::Dirichlet));
    if (dirichlet == 0) throw MeshError("boundary policy produced no Dirichlet node");
    return out;
}

// ---------------------------------------------------------------------------
// diameter

inline int diameter_of_adjacency(const std::vector<std::vector<int>>& adj) {
    const int n = static_cast<int>(adj.size());
    int diameter = 0;
    std::vector<int> dist(n);
    std::vector<int> queue(n);
    for (int s = 0; s < n; ++s) {
        std::fill(dist.begin(), dist.end(), -1);
        int head = 0, tail = 0;
        queue[tail++] = s;
        dist[s] = 0;
        while (head < tail) {
            const int u = queue[head++];
            for (int v : adj[u])
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    queue[tail++] = v;
                }
        }
        for (int v = 0; v < n; ++v) {
            if (dist[v] < 0) throw MeshError("graph_diameter: mesh is disconnected");
            diameter = std::max(diameter, dist[v]);
        }
    }
    return diameter;
}

inline int graph_diameter(const Mesh& mesh) { return diameter_of_adjacency(node_adjacency(mesh)); }

// ---------------------------------------------------------------------------
// node-count calibration

struct CalibratedMesh {
    double target_edge_length = 0.0;
    Mesh mesh;
};

// picks target_edge_length so the triangulation lands in [node_min, node_max]
inline CalibratedMesh calibrate_edge_length(const DomainShape& shape, int node_min, int node_max,
                                            int max_iters = 40) {
    const double area = polygon_area(shape.vertices);
    const double target = node_min + 0.3 * (node_max - node_min);
    double tel = std::sqrt(area / (0.82 * target));
    for (int i = 0; i < max_iters; ++i) {
        Mesh mesh = triangulate(shape, tel);
        const int n = mesh.num_nodes();
        if (n >= node_min && n <= node_max) return {tel, std::move(mesh)};
        const double ratio = std::sqrt(static_cast<double>(n) / target);
        tel *= std::clamp(ratio, 0.6, 1.8);
    }
    throw MeshError("calibrate_edge_length: could not reach requested node count");
}

} // namespace poissonnet
