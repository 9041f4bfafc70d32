#pragma once

// shared fixtures and independent oracles for the test suite

#include <array>
#include <deque>
#include <set>
#include <vector>

#include "poissonnet/fem.hpp"
#include "poissonnet/geometry.hpp"
#include "poissonnet/graph.hpp"
#include "poissonnet/training.hpp"

namespace test_helpers {

using namespace poissonnet;

inline DomainShape unit_square_shape() {
    return {{{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}}, 0};
}

// unit square with an all-Dirichlet boundary
inline Mesh unit_square_mesh(double tel) {
    Mesh mesh = triangulate(unit_square_shape(), tel);
    return assign_boundary_kinds(mesh, {BoundaryPolicyKind::AllDirichlet}, 0);
}

// square with a centre node: three Dirichlet corners, one Neumann corner,
// one interior node
inline Mesh five_node_mesh() {
    Mesh mesh;
    mesh.coords = {{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0.5, 0.5}};
    mesh.triangles = {{0, 1, 4}, {1, 2, 4}, {2, 3, 4}, {3, 0, 4}};
    mesh.boundary_edges = {{0, 1, {0, -1}}, {1, 2, {1, 0}}, {2, 3, {0, 1}}, {3, 0, {-1, 0}}};
    mesh.node_kind = {NodeKind::Dirichlet, NodeKind::Dirichlet, NodeKind::Dirichlet,
                      NodeKind::Neumann, NodeKind::Interior};
    return mesh;
}

inline FieldSpec linear_fields(double f0, double gx, double gy) {
    FieldSpec fs;
    fs.degree = 1;
    fs.f_coeffs = {f0, 0.0, 0.0};
    fs.g_coeffs = {0.0, gx, gy};
    return fs;
}

inline Sample five_node_sample() {
    Sample s;
    s.mesh = five_node_mesh();
    s.fields.degree = 1;
    s.fields.f_coeffs = {0.5, -0.3, 0.2};
    s.fields.g_coeffs = {0.1, 1.0, -0.7};
    s.system = assemble(s.mesh, s.fields);
    s.graph = build_graph(s.mesh, s.system, s.fields);
    return s;
}

// fast dataset spec for unit tests: small meshes, mixed boundaries
inline DatasetSpec small_spec(int num, std::uint64_t seed, bool force_neumann = false) {
    DatasetSpec spec;
    spec.num_samples = num;
    spec.node_min = 60;
    spec.node_max = 120;
    spec.seed = seed;
    spec.shape.min_vertices = 5;
    spec.shape.max_vertices = 8;
    if (force_neumann) spec.all_dirichlet_prob = 0.0;
    return spec;
}

// independent proper-intersection oracle (strict crossings only)
inline bool segments_properly_cross(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    auto side = [](Vec2 p, Vec2 q, Vec2 r) {
        const double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        return v > 0 ? 1 : v < 0 ? -1 : 0;
    };
    const int s1 = side(a, b, c), s2 = side(a, b, d), s3 = side(c, d, a), s4 = side(c, d, b);
    return s1 != 0 && s2 != 0 && s3 != 0 && s4 != 0 && s1 != s2 && s3 != s4;
}

inline bool polygon_has_crossing(const std::vector<Vec2>& poly) {
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
            if (segments_properly_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]))
                return true;
        }
    return false;
}

// undirected edge set enumerated from triangles
inline std::set<std::pair<int, int>> edge_set(const Mesh& mesh) {
    std::set<std::pair<int, int>> edges;
    for (const auto& t : mesh.triangles)
        for (int e = 0; e < 3; ++e) {
            int a = t[e], b = t[(e + 1) % 3];
            if (a > b) std::swap(a, b);
            edges.insert({a, b});
        }
    return edges;
}

// BFS distance from a node set, independent of the library BFS
inline std::vector<int> bfs_from_set(const std::vector<std::vector<int>>& adj,
                                     const std::vector<int>& sources) {
    std::vector<int> dist(adj.size(), -1);
    std::deque<int> queue;
    for (int s : sources) {
        dist[s] = 0;
        queue.push_back(s);
    }
    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        for (int v : adj[u])
            if (dist[v] < 0) {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
    }
    return dist;
}

} // namespace test_helpers
