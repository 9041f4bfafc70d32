#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "poissonnet/fem.hpp"
#include "poissonnet/geometry.hpp"
#include "poissonnet/linalg.hpp"

namespace poissonnet {

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Coupled system over the Neumann nodes: their stiffness rows are solved
// exactly given the rest of the state, which zeroes every Neumann residual
// term simultaneously (adjacent Neumann nodes couple through A, so a
// per-node assignment alone cannot).
struct NeumannSystem {
    std::vector<int> nodes;  // Neumann node ids, coordinate-sorted
    linalg::DenseLu factor;  // A restricted to Neumann rows/columns
    std::vector<int> off_ptr;
    std::vector<int> off_col;  // couplings to non-Neumann nodes
    std::vector<double> off_val;
    std::vector<double> rhs;  // b at Neumann nodes

    bool empty() const { return nodes.empty(); }
    int size() const { return static_cast<int>(nodes.size()); }

    // replaces the Neumann entries of u with the exact row solution
    void apply(std::span<double> u) const {
        if (empty()) return;
        const int m = size();
        std::vector<double> r(m);
        for (int i = 0; i < m; ++i) {
            double s = rhs[i];
            for (int k = off_ptr[i]; k < off_ptr[i + 1]; ++k) s -= off_val[k] * u[off_col[k]];
            r[i] = s;
        }
        linalg::lu_solve_inplace(factor, r);
        for (int i = 0; i < m; ++i) u[nodes[i]] = r[i];
    }
};

// The FEM problem as a typed graph: node kinds, incoming directed edges with
// geometric features, the matrix row and forcing of every node, and the
// Dirichlet data. Dirichlet nodes send messages but never receive any.
struct GraphProblem {
    int n = 0;
    std::vector<NodeKind> kind;
    std::vector<Vec2> coords;

    // incoming edges grouped by destination; within a destination the edges
    // are sorted by (dx, dy) so aggregation order is permutation-invariant
    std::vector<int> in_ptr;     // size n + 1
    std::vector<int> in_src;     // source node per edge
    std::vector<double> in_feat; // (dx, dy, dist) per edge, dst minus src

    // row i of A: diagonal first, then neighbours sorted by (dx, dy)
    std::vector<int> row_ptr;
    std::vector<int> row_col;
    std::vector<double> row_val;
    std::vector<double> forcing;  // b

    std::vector<int> dirichlet_nodes;  // ascending node index
    std::vector<double> dirichlet_g;
    std::vector<int> interior_nodes;  // ascending node index
    std::vector<int> neumann_nodes;   // coordinate-sorted (= neumann.nodes)
    std::vector<int> canon_order;     // all nodes, coordinate-sorted

    NeumannSystem neumann;

    int num_edges() const { return in_ptr.empty() ? 0 : in_ptr[n]; }

    double row_residual(std::span<const double> u, int i) const {
        double r = -forcing[i];
        for (int k = row_ptr[i]; k < row_ptr[i + 1]; ++k) r += row_val[k] * u[row_col[k]];
        return r;
    }
};

namespace detail {

inline std::vector<int> coordinate_order(const std::vector<Vec2>& coords, const std::vector<int>& ids) {
    std::vector<int> order = ids;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (coords[a].x != coords[b].x) return coords[a].x < coords[b].x;
        return coords[a].y < coords[b].y;
    });
    return order;
}

} // namespace detail

inline GraphProblem build_graph(const Mesh& mesh, const LinearSystem& sys, const FieldSpec& spec) {
    if (!spec.valid()) throw GraphError("build_graph: invalid field spec");
    const int n = mesh.num_nodes();
    if (sys.n != n) throw GraphError("build_graph: mesh and system sizes disagree");
    if (sys.dirichlet_nodes.empty()) throw GraphError("build_graph: no Dirichlet node");

    const auto adj = node_adjacency(mesh);
    // the off-diagonal sparsity of A must be exactly the mesh edge set
    for (int i = 0; i < n; ++i) {
        std::vector<int> pattern;
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k)
            if (sys.col_idx[k] != i) pattern.push_back(sys.col_idx[k]);
        if (pattern != adj[i]) throw GraphError("build_graph: system sparsity disagrees with mesh edges");
    }

    GraphProblem g;
    g.n = n;
    g.kind = mesh.node_kind;
    g.coords = mesh.coords;
    g.forcing = sys.b;
    g.dirichlet_nodes = sys.dirichlet_nodes;
    g.dirichlet_g = sys.dirichlet_values;

    auto sys_entry = [&](int i, int j) {
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k)
            if (sys.col_idx[k] == j) return sys.values[k];
        throw GraphError("build_graph: missing system entry");
    };

    // per-node rows, diagonal first, neighbours in canonical feature order
    g.row_ptr.assign(n + 1, 0);
    for (int i = 0; i < n; ++i) g.row_ptr[i + 1] = g.row_ptr[i] + 1 + static_cast<int>(adj[i].size());
    g.row_col.resize(g.row_ptr[n]);
    g.row_val.resize(g.row_ptr[n]);
    for (int i = 0; i < n; ++i) {
        auto order = detail::coordinate_order(mesh.coords, adj[i]);
        int k = g.row_ptr[i];
        g.row_col[k] = i;
        g.row_val[k] = sys_entry(i, i);
        ++k;
        for (int j : order) {
            g.row_col[k] = j;
            g.row_val[k] = sys_entry(i, j);
            ++k;
        }
    }

    // incoming edges: every neighbour sends to every non-Dirichlet node
    g.in_ptr.assign(n + 1, 0);
    for (int i = 0; i < n; ++i)
        g.in_ptr[i + 1] = g.in_ptr[i] +
                          (mesh.node_kind[i] == NodeKind::Dirichlet ? 0 : static_cast<int>(adj[i].size()));
    g.in_src.resize(g.in_ptr[n]);
    g.in_feat.resize(3 * static_cast<std::size_t>(g.in_ptr[n]));
    for (int i = 0; i < n; ++i) {
        if (mesh.node_kind[i] == NodeKind::Dirichlet) continue;
        auto order = detail::coordinate_order(mesh.coords, adj[i]);
        int k = g.in_ptr[i];
        for (int j : order) {
            const Vec2 d = mesh.coords[i] - mesh.coords[j];
            const double dist = d.norm();
            if (!(dist > 0.0)) throw GraphError("build_graph: coincident nodes");
            g.in_src[k] = j;
            g.in_feat[3 * k + 0] = d.x;
            g.in_feat[3 * k + 1] = d.y;
            g.in_feat[3 * k + 2] = dist;
            ++k;
        }
    }

    for (int i = 0; i < n; ++i) {
        if (mesh.node_kind[i] == NodeKind::Interior) g.interior_nodes.push_back(i);
        else if (mesh.node_kind[i] == NodeKind::Neumann) g.neumann_nodes.push_back(i);
    }
    g.neumann_nodes = detail::coordinate_order(mesh.coords, g.neumann_nodes);

    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    g.canon_order = detail::coordinate_order(mesh.coords, all);

    // factorize the Neumann-restricted block
    if (!g.neumann_nodes.empty()) {
        const int m = static_cast<int>(g.neumann_nodes.size());
        std::vector<int> pos(n, -1);
        for (int r = 0; r < m; ++r) pos[g.neumann_nodes[r]] = r;
        std::vector<double> block(static_cast<std::size_t>(m) * m, 0.0);
        NeumannSystem& ns = g.neumann;
        ns.nodes = g.neumann_nodes;
        ns.off_ptr.assign(m + 1, 0);
        for (int r = 0; r < m; ++r) {
            const int i = g.neumann_nodes[r];
            double diag = 0.0;
            for (int k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k) {
                const int j = g.row_col[k];
                if (j == i) diag = g.row_val[k];
                if (pos[j] >= 0)
                    block[static_cast<std::size_t>(r) * m + pos[j]] = g.row_val[k];
                else {
                    ns.off_col.push_back(j);
                    ns.off_val.push_back(g.row_val[k]);
                }
            }
            ns.off_ptr[r + 1] = static_cast<int>(ns.off_col.size());
            ns.rhs.push_back(g.forcing[i]);
            if (std::fabs(diag) <= 1e-14) throw GraphError("build_graph: degenerate Neumann row");
        }
        try {
            ns.factor = linalg::lu_factorize(std::move(block), m);
        } catch (const linalg::SingularMatrixError&) {
            throw GraphError("build_graph: singular Neumann block");
        }
    }
    return g;
}

// zero everywhere except the Dirichlet values
inline std::vector<double> initial_state(const GraphProblem& g) {
    std::vector<double> u(g.n, 0.0);
    for (std::size_t k = 0; k < g.dirichlet_nodes.size(); ++k)
        u[g.dirichlet_nodes[k]] = g.dirichlet_g[k];
    return u;
}

} // namespace poissonnet
