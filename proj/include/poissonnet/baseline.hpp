#pragma once

#include <chrono>
#include <cstddef>
#include <span>
#include <vector>

#include "poissonnet/fem.hpp"
#include "poissonnet/linalg.hpp"
#include "poissonnet/model.hpp"

namespace poissonnet::baseline {

// dense LU with partial pivoting; n <= 600 makes densification cheap
struct LUFactorization {
    int n = 0;
    linalg::DenseLu lu;
};

inline LUFactorization lu_factor(const LinearSystem& sys) {
    std::vector<double> dense(static_cast<std::size_t>(sys.n) * sys.n, 0.0);
    for (int i = 0; i < sys.n; ++i)
        for (int k = sys.row_ptr[i]; k < sys.row_ptr[i + 1]; ++k)
            dense[static_cast<std::size_t>(i) * sys.n + sys.col_idx[k]] = sys.values[k];
    return {sys.n, linalg::lu_factorize(std::move(dense), sys.n)};
}

inline std::vector<double> lu_solve(const LUFactorization& fact, std::span<const double> b) {
    std::vector<double> x(b.begin(), b.end());
    linalg::lu_solve_inplace(fact.lu, x);
    return x;
}

inline std::vector<double> solve_direct(const LinearSystem& sys) {
    return lu_solve(lu_factor(sys), sys.b);
}

struct CompareResult {
    double gnn_seconds = 0.0;
    double lu_seconds = 0.0;
    double error_l2 = 0.0;      // || U_k - U_lu ||_2
    double rel_error = 0.0;     // error_l2 / || U_lu ||_2
    std::vector<double> residual_curve;  // l2 residual per iteration, k + 1 points
};

// wall-clocks the rollout against the direct solve on the same problem; the
// ratio is reported, never asserted
inline CompareResult timed_compare(const GraphProblem& graph, const LinearSystem& sys,
                                   const ModelParams& params, int k) {
    using clock = std::chrono::steady_clock;
    CompareResult out;

    const auto t0 = clock::now();
    const RolloutTrace trace = rollout(graph, params, k);
    const auto t1 = clock::now();
    const std::vector<double> u_lu = solve_direct(sys);
    const auto t2 = clock::now();

    out.gnn_seconds = std::chrono::duration<double>(t1 - t0).count();
    out.lu_seconds = std::chrono::duration<double>(t2 - t1).count();
    out.error_l2 = linalg::norm2_diff(trace.decoded.back(), u_lu);
    const double ref = linalg::norm2(u_lu);
    out.rel_error = ref > 0.0 ? out.error_l2 / ref : out.error_l2;
    out.residual_curve.reserve(trace.residual_losses.size());
    for (double r : trace.residual_losses) out.residual_curve.push_back(std::sqrt(r));
    return out;
}

} // namespace poissonnet::baseline
