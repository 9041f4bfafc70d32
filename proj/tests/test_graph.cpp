#include <catch2/catch.hpp>

#include <map>

#include "helpers.hpp"
#include "poissonnet/graph.hpp"
#include "poissonnet/rng.hpp"

using namespace poissonnet;
using namespace test_helpers;

namespace {

std::map<std::pair<int, int>, int> directed_edges(const GraphProblem& g) {
    std::map<std::pair<int, int>, int> edges;
    for (int dst = 0; dst < g.n; ++dst)
        for (int k = g.in_ptr[dst]; k < g.in_ptr[dst + 1]; ++k) edges[{g.in_src[k], dst}]++;
    return edges;
}

} // namespace

TEST_CASE("edge directionality per node kind") {
    // nodes: 0,1,2 Dirichlet; 3 Neumann; 4 Interior
    const Sample s = five_node_sample();
    const auto edges = directed_edges(s.graph);
    // Dirichlet never receives
    for (const auto& [e, count] : edges) {
        CHECK(count == 1);
        CHECK(s.mesh.node_kind[e.second] != NodeKind::Dirichlet);
    }
    // Dirichlet -> Interior: single direction
    CHECK(edges.count({0, 4}) == 1);
    CHECK(edges.count({4, 0}) == 0);
    // Interior <-> Neumann: both directions
    CHECK(edges.count({4, 3}) == 1);
    CHECK(edges.count({3, 4}) == 1);
    // Dirichlet <-> Neumann: only towards the Neumann node
    CHECK(edges.count({0, 3}) == 1);
    CHECK(edges.count({3, 0}) == 0);
    // adjacent Dirichlet nodes share no edge at all
    CHECK(edges.count({0, 1}) == 0);
    CHECK(edges.count({1, 0}) == 0);

    // in-degrees: zero at Dirichlet nodes, full neighbour count elsewhere
    const auto adj = node_adjacency(s.mesh);
    for (int i = 0; i < s.graph.n; ++i) {
        const int indeg = s.graph.in_ptr[i + 1] - s.graph.in_ptr[i];
        if (s.mesh.node_kind[i] == NodeKind::Dirichlet)
            CHECK(indeg == 0);
        else
            CHECK(indeg == static_cast<int>(adj[i].size()));
    }
}

TEST_CASE("edge features are offsets with positive length and are antisymmetric") {
    const Sample s = sample_dataset(small_spec(1, 21, true))[0];
    const GraphProblem& g = s.graph;
    std::map<std::pair<int, int>, std::array<double, 3>> feat;
    for (int dst = 0; dst < g.n; ++dst)
        for (int k = g.in_ptr[dst]; k < g.in_ptr[dst + 1]; ++k) {
            const int src = g.in_src[k];
            const double dx = g.in_feat[3 * (std::size_t)k];
            const double dy = g.in_feat[3 * (std::size_t)k + 1];
            const double dist = g.in_feat[3 * (std::size_t)k + 2];
            CHECK(dx == g.coords[dst].x - g.coords[src].x);
            CHECK(dy == g.coords[dst].y - g.coords[src].y);
            CHECK(dist == Approx(std::hypot(dx, dy)).margin(1e-15));
            CHECK(dist > 0.0);
            feat[{src, dst}] = {dx, dy, dist};
        }
    for (const auto& [e, f] : feat) {
        const auto rev = feat.find({e.second, e.first});
        if (rev == feat.end()) continue;
        CHECK(f[0] == -rev->second[0]);
        CHECK(f[1] == -rev->second[1]);
        CHECK(f[2] == rev->second[2]);
    }
}

TEST_CASE("row coefficients reproduce the assembled matrix") {
    const Sample s = sample_dataset(small_spec(1, 33))[0];
    const GraphProblem& g = s.graph;
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> u(g.n);
        for (double& v : u) v = rng.uniform(-1, 1);
        const std::vector<double> via_system = s.system.apply(u);
        for (int i = 0; i < g.n; ++i) {
            double via_rows = 0.0;
            for (int k = g.row_ptr[i]; k < g.row_ptr[i + 1]; ++k)
                via_rows += g.row_val[k] * u[g.row_col[k]];
            CHECK(via_rows == Approx(via_system[i]).margin(1e-12));
        }
    }
}

TEST_CASE("initial state is the Dirichlet datum extended by zero") {
    const Sample s = five_node_sample();
    const std::vector<double> u0 = initial_state(s.graph);
    for (int i = 0; i < s.graph.n; ++i) {
        if (s.mesh.node_kind[i] == NodeKind::Dirichlet)
            CHECK(u0[i] == evaluate_g(s.fields, s.mesh.coords[i]));
        else
            CHECK(u0[i] == 0.0);
    }

    // all-Dirichlet graph: initial state is g everywhere
    Mesh all_d = assign_boundary_kinds(triangulate(sample_domain(2, {}), 0.3),
                                       {BoundaryPolicyKind::AllDirichlet}, 0);
    FieldSpec fs = linear_fields(0.0, 1.0, 2.0);
    const LinearSystem sys = assemble(all_d, fs);
    const GraphProblem g = build_graph(all_d, sys, fs);
    const std::vector<double> u = initial_state(g);
    for (int i = 0; i < g.n; ++i) {
        if (all_d.node_kind[i] == NodeKind::Dirichlet)
            CHECK(u[i] == evaluate_g(fs, all_d.coords[i]));
        else
            CHECK(u[i] == 0.0);
    }

    // g identically zero: zero state
    FieldSpec zero = linear_fields(1.0, 0.0, 0.0);
    const LinearSystem sys0 = assemble(all_d, zero);
    const std::vector<double> u0z = initial_state(build_graph(all_d, sys0, zero));
    for (double v : u0z) CHECK(v == 0.0);
}

TEST_CASE("graph construction rejects inconsistent inputs") {
    Sample s = five_node_sample();
    // tampered sparsity: drop one off-diagonal entry
    LinearSystem bad = s.system;
    bad.col_idx.erase(bad.col_idx.begin() + bad.row_ptr[4] + 1);
    bad.values.erase(bad.values.begin() + bad.row_ptr[4] + 1);
    for (int i = 5; i <= bad.n; ++i) bad.row_ptr[i]--;
    CHECK_THROWS_AS(build_graph(s.mesh, bad, s.fields), GraphError);

    // no Dirichlet nodes is rejected
    Mesh m = s.mesh;
    m.node_kind = {NodeKind::Neumann, NodeKind::Neumann, NodeKind::Neumann, NodeKind::Neumann,
                   NodeKind::Interior};
    const LinearSystem sys = assemble(m, s.fields);
    CHECK_THROWS_AS(build_graph(m, sys, s.fields), GraphError);
}

TEST_CASE("Neumann subsystem solves its rows exactly") {
    const Sample s = sample_dataset(small_spec(1, 55, true))[0];
    const GraphProblem& g = s.graph;
    REQUIRE_FALSE(g.neumann_nodes.empty());
    Rng rng(9);
    std::vector<double> u(g.n);
    for (double& v : u) v = rng.uniform(-1, 1);
    g.neumann.apply(u);
    for (int i : g.neumann_nodes) CHECK(std::fabs(g.row_residual(u, i)) < 1e-12);
}
