#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace poissonnet::linalg {

struct SingularMatrixError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense LU factorization with partial pivoting, packed in a single
// row-major array (unit lower diagonal implicit). perm[i] is the original
// row stored in position i, i.e. row i of P*A is row perm[i] of A.
struct DenseLu {
    int n = 0;
    std::vector<double> lu;  // n*n row-major
    std::vector<int> perm;
};

inline DenseLu lu_factorize(std::vector<double> a, int n, double pivot_tol = 1e-14) {
    if (static_cast<std::size_t>(n) * n != a.size())
        throw std::invalid_argument("lu_factorize: matrix size mismatch");
    DenseLu f;
    f.n = n;
    f.perm.resize(n);
    for (int i = 0; i < n; ++i) f.perm[i] = i;
    for (int k = 0; k < n; ++k) {
        int p = k;
        double best = std::fabs(a[static_cast<std::size_t>(k) * n + k]);
        for (int i = k + 1; i < n; ++i) {
            const double v = std::fabs(a[static_cast<std::size_t>(i) * n + k]);
            if (v > best) { best = v; p = i; }
        }
        if (best < pivot_tol)
            throw SingularMatrixError("lu_factorize: pivot below tolerance");
        if (p != k) {
            for (int j = 0; j < n; ++j)
                std::swap(a[static_cast<std::size_t>(k) * n + j], a[static_cast<std::size_t>(p) * n + j]);
            std::swap(f.perm[k], f.perm[p]);
        }
        const double piv = a[static_cast<std::size_t>(k) * n + k];
        for (int i = k + 1; i < n; ++i) {
            double* ri = &a[static_cast<std::size_t>(i) * n];
            const double* rk = &a[static_cast<std::size_t>(k) * n];
            const double m = ri[k] / piv;
            ri[k] = m;
            for (int j = k + 1; j < n; ++j) ri[j] -= m * rk[j];
        }
    }
    f.lu = std::move(a);
    return f;
}

// solves A x = b; b is overwritten with x
inline void lu_solve_inplace(const DenseLu& f, std::span<double> b) {
    const int n = f.n;
    if (static_cast<int>(b.size()) != n)
        throw std::invalid_argument("lu_solve_inplace: size mismatch");
    std::vector<double> y(n);
    for (int i = 0; i < n; ++i) y[i] = b[f.perm[i]];
    for (int i = 0; i < n; ++i) {
        const double* ri = &f.lu[static_cast<std::size_t>(i) * n];
        double s = y[i];
        for (int j = 0; j < i; ++j) s -= ri[j] * y[j];
        y[i] = s;
    }
    for (int i = n - 1; i >= 0; --i) {
        const double* ri = &f.lu[static_cast<std::size_t>(i) * n];
        double s = y[i];
        for (int j = i + 1; j < n; ++j) s -= ri[j] * y[j];
        y[i] = s / ri[i];
    }
    for (int i = 0; i < n; ++i) b[i] = y[i];
}

// solves A^T x = b; b is overwritten with x.
// PA = LU gives A^T = U^T L^T P, so solve U^T y = b, L^T z = y, x = P^{-1} z.
inline void lu_solve_transposed_inplace(const DenseLu& f, std::span<double> b) {
    const int n = f.n;
    if (static_cast<int>(b.size()) != n)
        throw std::invalid_argument("lu_solve_transposed_inplace: size mismatch");
    std::vector<double> y(b.begin(), b.end());
    for (int i = 0; i < n; ++i) {
        double s = y[i];
        for (int j = 0; j < i; ++j) s -= f.lu[static_cast<std::size_t>(j) * n + i] * y[j];
        y[i] = s / f.lu[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = y[i];
        for (int j = i + 1; j < n; ++j) s -= f.lu[static_cast<std::size_t>(j) * n + i] * y[j];
        y[i] = s;
    }
    for (int i = 0; i < n; ++i) b[f.perm[i]] = y[i];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm2_diff(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

} // namespace poissonnet::linalg
