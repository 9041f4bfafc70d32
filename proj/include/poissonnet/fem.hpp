#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "poissonnet/geometry.hpp"

namespace poissonnet {

struct AssemblyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// polynomial fields

inline int monomial_count(int degree) { return (degree + 1) * (degree + 2) / 2; }

// Coefficients are ordered by total degree, then by descending x-power:
// 1; x, y; x^2, xy, y^2; ...
struct FieldSpec {
    std::vector<double> f_coeffs;  // volumetric forcing
    std::vector<double> g_coeffs;  // Dirichlet datum
    int degree = 0;

    bool valid() const {
        const std::size_t m = static_cast<std::size_t>(monomial_count(degree));
        return degree >= 0 && f_coeffs.size() == m && g_coeffs.size() == m;
    }
};

inline double evaluate_polynomial(std::span<const double> coeffs, int degree, Vec2 p) {
    if (static_cast<int>(coeffs.size()) != monomial_count(degree))
        throw std::invalid_argument("evaluate_polynomial: coefficient count mismatch");
    double value = 0.0;
    std::size_t idx = 0;
    for (int s = 0; s <= degree; ++s) {
        for (int px = s; px >= 0; --px) {
            const int py = s - px;
            double mono = 1.0;
            for (int i = 0; i < px; ++i) mono *= p.x;
            for (int i = 0; i < py; ++i) mono *= p.y;
            value += coeffs[idx++] * mono;
        }
    }
    return value;
}

inline double evaluate_f(const FieldSpec& spec, Vec2 p) {
    return evaluate_polynomial(spec.f_coeffs, spec.degree, p);
}
inline double evaluate_g(const FieldSpec& spec, Vec2 p) {
    return evaluate_polynomial(spec.g_coeffs, spec.degree, p);
}

// ---------------------------------------------------------------------------
// linear system

// CSR with sorted column indices; Dirichlet rows are unit rows with b_i = g_i.
struct LinearSystem {
    int n = 0;
    std::vector<int> row_ptr;
    std::vector<int> col_idx;
    std::vector<double> values;
    std::vector<double> b;
    std::vector<int> dirichlet_nodes;      // ascending
    std::vector<double> dirichlet_values;  // parallel to dirichlet_nodes

    std::vector<double> apply(std::span<const double> u) const {
        if (static_cast<int>(u.size()) != n)
            throw std::invalid_argument("LinearSystem::apply: size mismatch");
        std::vector<double> out(n, 0.0);
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int k = row_ptr[i]; k < row_ptr[i + 1]; ++k) s += values[k] * u[col_idx[k]];
            out[i] = s;
        }
        return out;
    }
};

inline double triangle_area(const std::array<Vec2, 3>& p) {
    return 0.5 * ((p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[1].y - p[0].y) * (p[2].x - p[0].x));
}

// K[i][j] = area * grad(phi_i) . grad(phi_j) for linear basis functions
inline std::array<std::array<double, 3>, 3> local_stiffness(const std::array<Vec2, 3>& p) {
    const double area = triangle_area(p);
    if (std::fabs(area) <= 1e-14) throw AssemblyError("local_stiffness: degenerate triangle");
    std::array<Vec2, 3> grad;
    for (int i = 0; i < 3; ++i) {
        const Vec2 a = p[(i + 1) % 3], b = p[(i + 2) % 3];
        grad[i] = {(a.y - b.y) / (2.0 * area), (b.x - a.x) / (2.0 * area)};
    }
    std::array<std::array<double, 3>, 3> k{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) k[i][j] = area * dot(grad[i], grad[j]);
    return k;
}

// vertex-lumped load: entry i = area/3 * f(vertex i)
inline std::array<double, 3> local_load(const std::array<Vec2, 3>& p,
                                        const std::array<double, 3>& f_at_vertices) {
    const double area = triangle_area(p);
    if (std::fabs(area) <= 1e-14) throw AssemblyError("local_load: degenerate triangle");
    return {area / 3.0 * f_at_vertices[0], area / 3.0 * f_at_vertices[1],
            area / 3.0 * f_at_vertices[2]};
}

// P1 assembly of -laplace(u) = f with Dirichlet rows replaced by unit rows
// (homogeneous Neumann is the natural condition and adds nothing)
inline LinearSystem assemble(const Mesh& mesh, const FieldSpec& spec) {
    if (!spec.valid()) throw AssemblyError("assemble: invalid field spec");
    const int n = mesh.num_nodes();
    const auto adj = node_adjacency(mesh);

    LinearSystem sys;
    sys.n = n;
    sys.row_ptr.assign(n + 1, 0);
    for (int i = 0; i < n; ++i) sys.row_ptr[i + 1] = sys.row_ptr[i] + 1 + static_cast<int>(adj[i].size());
    sys.col_idx.resize(sys.row_ptr[n]);
    sys.values.assign(sys.row_ptr[n], 0.0);
    sys.b.assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
        int k = sys.row_ptr[i];
        bool placed = false;
        for (int j : adj[i]) {  // adj sorted; insert the diagonal in order
            if (!placed && i < j) {
                sys.col_idx[k++] = i;
                placed = true;
            }
            sys.col_idx[k++] = j;
        }
        if (!placed) sys.col_idx[k++] = i;
    }

    auto entry = [&](int i, int j) -> double& {
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k)
            if (sys.col_idx[k] == j) return sys.values[k];
        throw AssemblyError("assemble: missing CSR entry");
    };

    for (const auto& tri : mesh.triangles) {
        const std::array<Vec2, 3> p{mesh.coords[tri[0]], mesh.coords[tri[1]], mesh.coords[tri[2]]};
        const auto k_loc = local_stiffness(p);
        const auto b_loc = local_load(p, {evaluate_f(spec, p[0]), evaluate_f(spec, p[1]),
                                          evaluate_f(spec, p[2])});
        for (int i = 0; i < 3; ++i) {
            sys.b[tri[i]] += b_loc[i];
            for (int j = 0; j < 3; ++j) entry(tri[i], tri[j]) += k_loc[i][j];
        }
    }

    for (int i = 0; i < n; ++i) {
        if (mesh.node_kind[i] != NodeKind::Dirichlet) continue;
        const double g = evaluate_g(spec, mesh.coords[i]);
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k)
            sys.values[k] = sys.col_idx[k] == i ? 1.0 : 0.0;
        sys.b[i] = g;
        sys.dirichlet_nodes.push_back(i);
        sys.dirichlet_values.push_back(g);
    }
    return sys;
}

// squared residual ||A U - B||^2
inline double residual_norm(const LinearSystem& sys, std::span<const double> u) {
    if (static_cast<int>(u.size()) != sys.n)
        throw std::invalid_argument("residual_norm: size mismatch");
    double total = 0.0;
    for (int i = 0; i < sys.n; ++i) {
        double r = -sys.b[i];
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k) r += sys.values[k] * u[sys.col_idx[k]];
        total += r * r;
    }
    return total;
}

inline double residual_l2(const LinearSystem& sys, std::span<const double> u) {
    return std::sqrt(residual_norm(sys, u));
}

} // namespace poissonnet
