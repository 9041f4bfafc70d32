#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "poissonnet/fem.hpp"
#include "poissonnet/geometry.hpp"
#include "poissonnet/graph.hpp"
#include "poissonnet/model.hpp"
#include "poissonnet/rng.hpp"

// The reference (direct) solver is injected into evaluate() by the caller and
// is deliberately not included here: training itself never sees solutions.

namespace poissonnet {

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergenceError : TrainingError {
    using TrainingError::TrainingError;
};

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
    int k = 20;
    int epochs = 100;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double lr_final = -1.0;        // < 0: constant rate; otherwise cosine decay target
    double lr_hold_fraction = 0.0; // fraction of epochs at the peak rate before decaying
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double recon_weight = 1.0;
    double grad_clip_norm = 0.0;   // 0 = off; otherwise clip the batch gradient
    double average_tail = 0.0;     // 0 = off; else average params over the last fraction of epochs
    std::uint64_t seed = 0;
    int train_count = 200;
    int test_count = 50;
    double divergence_threshold = 1e6;
    int threads = 0;  // 0 = hardware concurrency
};

struct DatasetSpec {
    int num_samples = 0;
    int node_min = 300;
    int node_max = 600;
    int degree = 2;
    double coeff_range = 1.0;
    double all_dirichlet_prob = 0.3;  // otherwise one contiguous Neumann arc
    double neumann_frac_min = 0.2;
    double neumann_frac_max = 0.5;
    std::uint64_t seed = 0;
    ShapeConfig shape;
};

struct Sample {
    DomainShape domain;
    double target_edge_length = 0.0;
    Mesh mesh;
    FieldSpec fields;
    LinearSystem system;
    GraphProblem graph;
};

// ---------------------------------------------------------------------------
// dataset generation

inline Sample make_sample(std::uint64_t sample_seed, const DatasetSpec& spec) {
    Sample s;
    s.domain = sample_domain(sample_seed, spec.shape);
    CalibratedMesh cal = calibrate_edge_length(s.domain, spec.node_min, spec.node_max);
    s.target_edge_length = cal.target_edge_length;

    Rng rng(Rng::mix(sample_seed, 0xda7a5e7));
    BoundaryPolicy policy;
    policy.kind = rng.uniform() < spec.all_dirichlet_prob ? BoundaryPolicyKind::AllDirichlet
                                                          : BoundaryPolicyKind::RandomArc;
    policy.neumann_fraction_min = spec.neumann_frac_min;
    policy.neumann_fraction_max = spec.neumann_frac_max;
    s.mesh = assign_boundary_kinds(cal.mesh, policy, rng.next_u64());

    const int m = monomial_count(spec.degree);
    s.fields.degree = spec.degree;
    s.fields.f_coeffs.resize(m);
    s.fields.g_coeffs.resize(m);
    for (double& c : s.fields.f_coeffs) c = rng.uniform(-spec.coeff_range, spec.coeff_range);
    for (double& c : s.fields.g_coeffs) c = rng.uniform(-spec.coeff_range, spec.coeff_range);

    s.system = assemble(s.mesh, s.fields);
    s.graph = build_graph(s.mesh, s.system, s.fields);
    return s;
}

inline std::vector<Sample> sample_dataset(const DatasetSpec& spec) {
    std::vector<Sample> out;
    out.reserve(spec.num_samples);
    for (int i = 0; i < spec.num_samples; ++i) {
        std::uint64_t seed_i = Rng::mix(spec.seed, static_cast<std::uint64_t>(i) + 1);
        int attempts = 0;
        for (;;) {
            try {
                out.push_back(make_sample(seed_i, spec));
                break;
            } catch (const MeshError&) {
                if (++attempts >= 8) throw;
                seed_i = Rng::mix(seed_i, 0xfa11bacc + attempts);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss

// cumulative per-node-normalized loss over iterations 1..k
inline double total_loss(const RolloutTrace& trace, const TrainConfig& cfg) {
    double loss = 0.0;
    for (int t = 1; t <= trace.k; ++t)
        loss += (trace.residual_losses[t] + cfg.recon_weight * trace.recon_losses[t]) /
                static_cast<double>(trace.n);
    return loss;
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamState {
    std::vector<double> m, v;
    long t = 0;
};

inline void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
                      const TrainConfig& cfg, double lr_override = -1.0) {
    if (params.size() != grad.size()) throw TrainingError("adam_step: shape mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw TrainingError("adam_step: state mismatch");
    const double lr = lr_override > 0.0 ? lr_override : cfg.learning_rate;
    state.t += 1;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

// ---------------------------------------------------------------------------
// training loop

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    double mean_residual_l2 = 0.0;  // final-iteration residual, averaged over samples
    double lr = 0.0;
};

struct TrainResult {
    ModelParams params;  // best-loss epoch
    std::vector<EpochStats> history;
    int best_epoch = -1;
    bool diverged = false;
};

namespace detail_train {

struct SampleOutcome {
    std::vector<double> grad;
    double loss = 0.0;
    double final_residual_sq = 0.0;
};

inline SampleOutcome run_sample(ad::Tape& tape, const Sample& sample, const ModelWiring& wiring,
                                const ModelParams& params, const TrainConfig& cfg) {
    tape.reset();
    const ParamIds pid = register_params(tape, params, true);
    RolloutTapeResult rr =
        rollout_on_tape(tape, pid, sample.graph, wiring, cfg.k, cfg.recon_weight, false);
    SampleOutcome out;
    out.loss = tape.value(rr.loss)[0];
    out.final_residual_sq = rr.trace.residual_losses.back();
    tape.backward(rr.loss);
    out.grad = collect_gradients(tape, pid);
    return out;
}

} // namespace detail_train

inline TrainResult train_from(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                              ModelParams initial) {
    if (dataset.empty()) throw TrainingError("train: empty dataset");
    TrainResult result;
    result.params = std::move(initial);

    std::vector<ModelWiring> wirings;
    wirings.reserve(dataset.size());
    for (const Sample& s : dataset)
        wirings.push_back(make_wiring(s.graph, initial.cfg.edge_features));

    std::vector<double> flat = flatten_params(result.params);
    AdamState adam;
    ModelParams current = result.params;
    double best_loss = std::numeric_limits<double>::infinity();
    ModelParams best = result.params;
    std::vector<double> tail_sum(flat.size(), 0.0);
    long tail_count = 0;
    const int tail_start = cfg.average_tail > 0.0
                               ? cfg.epochs - std::max(1, static_cast<int>(cfg.average_tail * cfg.epochs))
                               : cfg.epochs;

    const int n_threads = cfg.threads > 0
                              ? cfg.threads
                              : std::max(1u, std::min(8u, std::thread::hardware_concurrency()));
    const int batch = std::max(1, cfg.batch_size);

    Rng shuffle_rng(Rng::mix(cfg.seed, 0x5aff1eULL));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic shuffle
        std::vector<int> order(dataset.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);

        double lr = cfg.learning_rate;
        if (cfg.lr_final >= 0.0) {
            const int hold = static_cast<int>(cfg.lr_hold_fraction * cfg.epochs);
            if (epoch >= hold) {
                const double span = std::max(1, cfg.epochs - 1 - hold);
                const double phase = static_cast<double>(epoch - hold) / span;
                lr = cfg.lr_final +
                     0.5 * (cfg.learning_rate - cfg.lr_final) * (1.0 + std::cos(M_PI * phase));
            }
        }

        double epoch_loss = 0.0;
        double epoch_res_sq = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
            const std::size_t b1 = std::min(order.size(), b0 + batch);
            const int count = static_cast<int>(b1 - b0);
            std::vector<detail_train::SampleOutcome> outcomes(count);

            auto worker = [&](int w) {
                ad::Tape tape;
                for (int j = w; j < count; j += n_threads) {
                    const int idx = order[b0 + j];
                    outcomes[j] =
                        detail_train::run_sample(tape, dataset[idx], wirings[idx], current, cfg);
                }
            };
            if (n_threads == 1 || count == 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < std::min(n_threads, count); ++w) pool.emplace_back(worker, w);
                for (auto& th : pool) th.join();
            }

            // reduce in sample order so results do not depend on scheduling
            std::vector<double> grad(flat.size(), 0.0);
            for (int j = 0; j < count; ++j) {
                const auto& o = outcomes[j];
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += o.grad[i];
                epoch_loss += o.loss;
                epoch_res_sq += std::sqrt(o.final_residual_sq);
            }
            const double inv = 1.0 / count;
            for (double& gv : grad) gv *= inv;
            if (cfg.grad_clip_norm > 0.0) {
                const double norm = linalg::norm2(grad);
                if (norm > cfg.grad_clip_norm) {
                    const double s = cfg.grad_clip_norm / norm;
                    for (double& gv : grad) gv *= s;
                }
            }

            adam_step(flat, grad, adam, cfg, lr);
            unflatten_params(current, flat);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.mean_loss = epoch_loss / static_cast<double>(dataset.size());
        stats.mean_residual_l2 = epoch_res_sq / static_cast<double>(dataset.size());
        stats.lr = lr;
        result.history.push_back(stats);

        if (!std::isfinite(stats.mean_loss) || stats.mean_loss > cfg.divergence_threshold) {
            result.params = best;
            result.diverged = true;
            return result;
        }
        if (stats.mean_loss < best_loss) {
            best_loss = stats.mean_loss;
            best = current;
            result.best_epoch = epoch;
        }
        if (epoch >= tail_start) {
            for (std::size_t i = 0; i < flat.size(); ++i) tail_sum[i] += flat[i];
            ++tail_count;
        }
    }
    if (tail_count > 0) {
        for (double& v : tail_sum) v /= static_cast<double>(tail_count);
        unflatten_params(current, tail_sum);
        result.params = current;
        result.best_epoch = cfg.epochs - 1;
    } else {
        result.params = cfg.epochs > 0 && result.best_epoch >= 0 ? best : current;
    }
    return result;
}

inline TrainResult train(const std::vector<Sample>& dataset, const TrainConfig& cfg,
                         const ModelConfig& mcfg) {
    return train_from(dataset, cfg, init_params(mcfg, cfg.seed));
}

// ---------------------------------------------------------------------------
// evaluation against an injected reference solver

using ReferenceSolver = std::function<std::vector<double>(const LinearSystem&)>;

struct SampleMetrics {
    int index = 0;
    int n = 0;
    double residual_l2 = 0.0;  // sqrt of || A U_k - B ||^2
    double error_l2 = 0.0;
    double rel_error = 0.0;
    double gnn_seconds = 0.0;
    double lu_seconds = 0.0;
    std::vector<double> residual_curve;  // l2 per iteration
};

inline std::vector<SampleMetrics> evaluate(const ModelParams& params,
                                           const std::vector<Sample>& dataset,
                                           const ReferenceSolver& reference, int k) {
    using clock = std::chrono::steady_clock;
    std::vector<SampleMetrics> out;
    out.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Sample& s = dataset[i];
        SampleMetrics m;
        m.index = static_cast<int>(i);
        m.n = s.graph.n;

        const auto t0 = clock::now();
        const RolloutTrace trace = rollout(s.graph, params, k);
        const auto t1 = clock::now();
        const std::vector<double> u_ref = reference(s.system);
        const auto t2 = clock::now();

        m.gnn_seconds = std::chrono::duration<double>(t1 - t0).count();
        m.lu_seconds = std::chrono::duration<double>(t2 - t1).count();
        m.residual_l2 = std::sqrt(trace.residual_losses.back());
        m.error_l2 = linalg::norm2_diff(trace.decoded.back(), u_ref);
        const double ref_norm = linalg::norm2(u_ref);
        m.rel_error = ref_norm > 0.0 ? m.error_l2 / ref_norm : m.error_l2;
        m.residual_curve.reserve(trace.residual_losses.size());
        for (double r : trace.residual_losses) m.residual_curve.push_back(std::sqrt(r));
        out.push_back(std::move(m));
    }
    return out;
}

inline double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

inline double mean(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

} // namespace poissonnet
