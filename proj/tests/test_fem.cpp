#include <catch2/catch.hpp>

#include <cmath>

#include "helpers.hpp"
#include "poissonnet/baseline.hpp"
#include "poissonnet/fem.hpp"
#include "poissonnet/rng.hpp"

using namespace poissonnet;
using namespace test_helpers;

TEST_CASE("local stiffness of the reference triangle") {
    const auto k = local_stiffness({{{0, 0}, {1, 0}, {0, 1}}});
    const double expected[3][3] = {{1.0, -0.5, -0.5}, {-0.5, 0.5, 0.0}, {-0.5, 0.0, 0.5}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(k[i][j] == Approx(expected[i][j]).margin(1e-14));
}

TEST_CASE("local stiffness rows sum to zero and the matrix is symmetric") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::array<Vec2, 3> p{{{rng.uniform(), rng.uniform()},
                                     {rng.uniform() + 1.2, rng.uniform()},
                                     {rng.uniform(), rng.uniform() + 1.1}}};
        const auto k = local_stiffness(p);
        for (int i = 0; i < 3; ++i) {
            CHECK(std::fabs(k[i][0] + k[i][1] + k[i][2]) < 1e-12);
            for (int j = 0; j < 3; ++j) CHECK(k[i][j] == Approx(k[j][i]).margin(1e-13));
        }
    }
}

TEST_CASE("local stiffness is invariant under uniform scaling") {
    const std::array<Vec2, 3> p{{{0.2, 0.1}, {0.9, 0.3}, {0.4, 0.8}}};
    const auto k0 = local_stiffness(p);
    for (double s : {0.5, 2.0, 3.7}) {
        const std::array<Vec2, 3> q{{p[0] * s, p[1] * s, p[2] * s}};
        const auto k1 = local_stiffness(q);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(k1[i][j] == Approx(k0[i][j]).margin(1e-12));
    }
}

TEST_CASE("degenerate triangles are rejected") {
    CHECK_THROWS_AS(local_stiffness({{{0, 0}, {1, 1}, {2, 2}}}), AssemblyError);
    CHECK_THROWS_AS(local_load({{{0, 0}, {1, 1}, {2, 2}}}, {1, 1, 1}), AssemblyError);
}

TEST_CASE("lumped load vector") {
    const std::array<Vec2, 3> ref{{{0, 0}, {1, 0}, {0, 1}}};
    const auto zero = local_load(ref, {0, 0, 0});
    CHECK(zero == std::array<double, 3>{0, 0, 0});
    const auto ones = local_load(ref, {1, 1, 1});
    for (double v : ones) CHECK(v == Approx(1.0 / 6.0).margin(1e-15));
    const std::array<Vec2, 3> p{{{0.1, 0.2}, {1.3, 0.4}, {0.6, 1.7}}};
    const double c = -2.7;
    const auto load = local_load(p, {c, c, c});
    const double area = triangle_area(p);
    for (double v : load) CHECK(v == Approx(c * area / 3.0).margin(1e-14));
}

TEST_CASE("polynomial evaluation") {
    CHECK(evaluate_polynomial(std::vector<double>{1.0}, 0, {0.3, 0.7}) == 1.0);
    CHECK(evaluate_polynomial(std::vector<double>{0.0, 1.0, 2.0}, 1, {1.0, 1.0}) == Approx(3.0));
    // random degree-2 coefficients vs a direct monomial sum with std::pow
    Rng rng(3);
    std::vector<double> coeffs(monomial_count(2));
    for (double& c : coeffs) c = rng.uniform(-1, 1);
    for (int trial = 0; trial < 10; ++trial) {
        const Vec2 p{rng.uniform(), rng.uniform()};
        double expected = 0.0;
        int idx = 0;
        for (int s = 0; s <= 2; ++s)
            for (int px = s; px >= 0; --px)
                expected += coeffs[idx++] * std::pow(p.x, px) * std::pow(p.y, s - px);
        CHECK(evaluate_polynomial(coeffs, 2, p) == Approx(expected).margin(1e-14));
    }
    CHECK_THROWS(evaluate_polynomial(std::vector<double>{1.0, 2.0}, 1, {0, 0}));
}

TEST_CASE("P1 reproduces linear fields exactly") {
    const Mesh mesh = unit_square_mesh(0.14);
    const LinearSystem sys = assemble(mesh, linear_fields(0.0, 1.0, 0.0));  // f = 0, g = x
    const std::vector<double> u = baseline::solve_direct(sys);
    for (int i = 0; i < sys.n; ++i)
        CHECK(std::fabs(u[i] - mesh.coords[i].x) < 1e-10);
}

TEST_CASE("manufactured solution converges at second order") {
    // u = x^2 + y^2, f = -lap u = -4, Dirichlet everywhere
    FieldSpec fs;
    fs.degree = 2;
    fs.f_coeffs = {-4.0, 0, 0, 0, 0, 0};
    fs.g_coeffs = {0.0, 0, 0, 1.0, 0.0, 1.0};
    std::vector<double> hs, errs;
    for (double tel : {0.2, 0.1, 0.05}) {
        const Mesh mesh = unit_square_mesh(tel);
        const LinearSystem sys = assemble(mesh, fs);
        const std::vector<double> u = baseline::solve_direct(sys);
        // mass-weighted nodal L2 error
        double err2 = 0.0;
        for (const auto& t : mesh.triangles) {
            const double area =
                triangle_area({mesh.coords[t[0]], mesh.coords[t[1]], mesh.coords[t[2]]});
            for (int v : t) {
                const Vec2 p = mesh.coords[v];
                const double d = u[v] - (p.x * p.x + p.y * p.y);
                err2 += area / 3.0 * d * d;
            }
        }
        hs.push_back(std::log(tel));
        errs.push_back(0.5 * std::log(err2));
    }
    // least-squares slope of log(err) vs log(h)
    double mh = 0, me = 0;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        mh += hs[i];
        me += errs[i];
    }
    mh /= hs.size();
    me /= errs.size();
    double num = 0, den = 0;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        num += (hs[i] - mh) * (errs[i] - me);
        den += (hs[i] - mh) * (hs[i] - mh);
    }
    const double slope = num / den;
    CHECK(slope == Approx(2.0).margin(0.3));
}

TEST_CASE("Dirichlet rows are unit rows with the boundary datum") {
    const Sample s = five_node_sample();
    for (std::size_t k = 0; k < s.system.dirichlet_nodes.size(); ++k) {
        const int i = s.system.dirichlet_nodes[k];
        for (int p = s.system.row_ptr[i]; p < s.system.row_ptr[i + 1]; ++p)
            CHECK(s.system.values[p] == (s.system.col_idx[p] == i ? 1.0 : 0.0));
        CHECK(s.system.b[i] == s.system.dirichlet_values[k]);
        CHECK(s.system.b[i] == evaluate_g(s.fields, s.mesh.coords[i]));
    }
}

TEST_CASE("non-Dirichlet principal submatrix is symmetric") {
    const DatasetSpec spec = small_spec(1, 77, true);
    const Sample s = sample_dataset(spec)[0];
    auto entry = [&](int i, int j) {
        for (int k = s.system.row_ptr[i]; k < s.system.row_ptr[i + 1]; ++k)
            if (s.system.col_idx[k] == j) return s.system.values[k];
        return 0.0;
    };
    for (int i = 0; i < s.system.n; ++i) {
        if (s.mesh.node_kind[i] == NodeKind::Dirichlet) continue;
        for (int k = s.system.row_ptr[i]; k < s.system.row_ptr[i + 1]; ++k) {
            const int j = s.system.col_idx[k];
            if (s.mesh.node_kind[j] == NodeKind::Dirichlet) continue;
            CHECK(std::fabs(s.system.values[k] - entry(j, i)) < 1e-12);
        }
    }
}

TEST_CASE("constants lie in the kernel of the pure stiffness matrix") {
    Mesh mesh = triangulate(sample_domain(8, {}), 0.12);
    for (auto& k : mesh.node_kind)
        if (k == NodeKind::Dirichlet) k = NodeKind::Neumann;  // no row replacement
    const LinearSystem sys = assemble(mesh, linear_fields(0.0, 0.0, 0.0));
    REQUIRE(sys.dirichlet_nodes.empty());
    const std::vector<double> ones(sys.n, 1.0);
    const std::vector<double> a1 = sys.apply(ones);
    for (double v : a1) CHECK(std::fabs(v) < 1e-10);
}

TEST_CASE("off-diagonal sparsity equals the mesh edge set") {
    const Mesh mesh = unit_square_mesh(0.2);
    const LinearSystem sys = assemble(mesh, linear_fields(1.0, 0.0, 1.0));
    const auto edges = edge_set(mesh);
    std::set<std::pair<int, int>> pattern;
    for (int i = 0; i < sys.n; ++i)
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k) {
            const int j = sys.col_idx[k];
            if (i != j) pattern.insert({std::min(i, j), std::max(i, j)});
        }
    CHECK(pattern == edges);
}

TEST_CASE("residual norm") {
    // identity system, B = 0, U = e1
    LinearSystem sys;
    sys.n = 3;
    sys.row_ptr = {0, 1, 2, 3};
    sys.col_idx = {0, 1, 2};
    sys.values = {1.0, 1.0, 1.0};
    sys.b = {0.0, 0.0, 0.0};
    CHECK(residual_norm(sys, std::vector<double>{1.0, 0.0, 0.0}) == 1.0);
    CHECK_THROWS(residual_norm(sys, std::vector<double>{1.0, 0.0}));

    // random 5x5 sparse system vs a dense oracle
    Rng rng(5);
    LinearSystem r;
    r.n = 5;
    r.row_ptr = {0};
    std::vector<std::vector<double>> dense(5, std::vector<double>(5, 0.0));
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
            if (i != j && rng.uniform() < 0.5) continue;
            r.col_idx.push_back(j);
            const double v = rng.uniform(-2, 2);
            r.values.push_back(v);
            dense[i][j] = v;
        }
        r.row_ptr.push_back(static_cast<int>(r.col_idx.size()));
        r.b.push_back(rng.uniform(-1, 1));
    }
    std::vector<double> u(5);
    for (double& v : u) v = rng.uniform(-1, 1);
    double oracle = 0.0;
    for (int i = 0; i < 5; ++i) {
        double s = -r.b[i];
        for (int j = 0; j < 5; ++j) s += dense[i][j] * u[j];
        oracle += s * s;
    }
    CHECK(residual_norm(r, u) == Approx(oracle).margin(1e-14));

    // the exact solution has (squared) residual at rounding level
    const Sample s = five_node_sample();
    const std::vector<double> sol = baseline::solve_direct(s.system);
    CHECK(residual_norm(s.system, sol) <= 1e-20);
}
