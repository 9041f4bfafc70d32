#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "poissonnet/autodiff.hpp"
#include "poissonnet/graph.hpp"
#include "poissonnet/rng.hpp"

namespace poissonnet {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Latent dimension and MLP widths. The defaults land the parameter count at
// 4527, close to the 4500 the architecture is sized for.
//
// Messages see (dx, dy, dist) and, by default, the stiffness coupling a_ij of
// the receiving row: the graph formulation hands the model the weighted
// adjacency, and the edge vector alone does not determine a_ij (it depends on
// the angles opposite the edge).
struct ModelConfig {
    int d = 18;
    int encoder_hidden = 16;
    int decoder_hidden = 16;
    int edge_features = 4;  // dx, dy, dist [, a_ij]

    bool operator==(const ModelConfig&) const = default;
};

struct Param {
    std::vector<int> shape;
    std::vector<double> data;
    std::size_t size() const { return data.size(); }
};

// Encoder, two directional edge-message nets, GRU cell, decoder.
struct ModelParams {
    ModelConfig cfg;
    Param enc_w1, enc_b1, enc_w2, enc_b2;          // 2 -> hidden -> d
    Param msg_out_w, msg_out_b;                    // (d + edge_features) -> d
    Param msg_in_w, msg_in_b;                      // same, spatially negated offsets
    Param gru_wz, gru_uz, gru_bz;                  // update gate
    Param gru_wr, gru_ur, gru_br;                  // reset gate
    Param gru_wc, gru_uc, gru_bc;                  // candidate
    Param dec_w1, dec_b1, dec_w2, dec_b2;          // d -> hidden -> 1

    template <class F> void for_each(F&& f) {
        f("enc_w1", enc_w1); f("enc_b1", enc_b1); f("enc_w2", enc_w2); f("enc_b2", enc_b2);
        f("msg_out_w", msg_out_w); f("msg_out_b", msg_out_b);
        f("msg_in_w", msg_in_w); f("msg_in_b", msg_in_b);
        f("gru_wz", gru_wz); f("gru_uz", gru_uz); f("gru_bz", gru_bz);
        f("gru_wr", gru_wr); f("gru_ur", gru_ur); f("gru_br", gru_br);
        f("gru_wc", gru_wc); f("gru_uc", gru_uc); f("gru_bc", gru_bc);
        f("dec_w1", dec_w1); f("dec_b1", dec_b1); f("dec_w2", dec_w2); f("dec_b2", dec_b2);
    }
    template <class F> void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each([&](const char* name, Param& p) {
            f(name, static_cast<const Param&>(p));
        });
    }
};

inline std::size_t param_count(const ModelConfig& cfg) {
    const int d = cfg.d, eh = cfg.encoder_hidden, dh = cfg.decoder_hidden;
    const std::size_t enc = static_cast<std::size_t>(eh) * 2 + eh + static_cast<std::size_t>(d) * eh + d;
    const std::size_t msg = 2 * (static_cast<std::size_t>(d) * (d + cfg.edge_features) + d);
    const std::size_t gru = 3 * (static_cast<std::size_t>(d) * (2 * d + 1) + static_cast<std::size_t>(d) * d + d);
    const std::size_t dec = static_cast<std::size_t>(dh) * d + dh + dh + 1;
    return enc + msg + gru + dec;
}

inline std::size_t param_count(const ModelParams& params) {
    std::size_t total = 0;
    params.for_each([&](const char*, const Param& p) { total += p.size(); });
    return total;
}

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    const int d = cfg.d, eh = cfg.encoder_hidden, dh = cfg.decoder_hidden;
    ModelParams p;
    p.cfg = cfg;
    Rng rng(Rng::mix(seed, 0x90de1));
    auto mat = [&](int out, int in) {
        Param m;
        m.shape = {out, in};
        m.data.resize(static_cast<std::size_t>(out) * in);
        const double bound = std::sqrt(1.0 / in);
        for (double& v : m.data) v = rng.uniform(-bound, bound);
        return m;
    };
    auto vec = [&](int out, int fan_in) {
        Param m;
        m.shape = {out};
        m.data.resize(out);
        const double bound = std::sqrt(1.0 / fan_in);
        for (double& v : m.data) v = rng.uniform(-bound, bound);
        return m;
    };
    p.enc_w1 = mat(eh, 2);          p.enc_b1 = vec(eh, 2);
    p.enc_w2 = mat(d, eh);          p.enc_b2 = vec(d, eh);
    const int fe = cfg.edge_features;
    p.msg_out_w = mat(d, d + fe);   p.msg_out_b = vec(d, d + fe);
    p.msg_in_w = mat(d, d + fe);    p.msg_in_b = vec(d, d + fe);
    p.gru_wz = mat(d, 2 * d + 1);   p.gru_uz = mat(d, d);   p.gru_bz = vec(d, 2 * d + 1);
    p.gru_wr = mat(d, 2 * d + 1);   p.gru_ur = mat(d, d);   p.gru_br = vec(d, 2 * d + 1);
    p.gru_wc = mat(d, 2 * d + 1);   p.gru_uc = mat(d, d);   p.gru_bc = vec(d, 2 * d + 1);
    p.dec_w1 = mat(dh, d);          p.dec_b1 = vec(dh, d);
    p.dec_w2 = mat(1, dh);          p.dec_b2 = vec(1, dh);
    return p;
}

inline std::vector<double> flatten_params(const ModelParams& params) {
    std::vector<double> flat;
    flat.reserve(param_count(params));
    params.for_each([&](const char*, const Param& p) {
        flat.insert(flat.end(), p.data.begin(), p.data.end());
    });
    return flat;
}

inline void unflatten_params(ModelParams& params, std::span<const double> flat) {
    std::size_t off = 0;
    params.for_each([&](const char*, Param& p) {
        if (off + p.size() > flat.size()) throw ModelError("unflatten_params: size mismatch");
        std::copy(flat.begin() + off, flat.begin() + off + p.size(), p.data.begin());
        off += p.size();
    });
    if (off != flat.size()) throw ModelError("unflatten_params: size mismatch");
}

// ---------------------------------------------------------------------------
// per-graph wiring of the interior message passing

struct ModelWiring {
    int edge_features = 4;
    std::vector<int> src;       // interior-destination edges, source node
    std::vector<int> dst_pos;   // destination position within interior_nodes
    std::vector<double> feat_out;  // (dx, dy, dist [, a_ij]), dst minus src
    std::vector<double> feat_in;   // spatially negated, same dist and coupling
    std::vector<int> count;     // in-degree per interior node
    std::vector<double> b_interior;
    std::vector<double> b_neumann;
};

inline ModelWiring make_wiring(const GraphProblem& g, int edge_features = 4) {
    if (edge_features != 3 && edge_features != 4)
        throw ModelError("make_wiring: unsupported edge feature count");
    ModelWiring w;
    w.edge_features = edge_features;
    const int m = static_cast<int>(g.interior_nodes.size());
    w.count.resize(m);
    for (int t = 0; t < m; ++t) {
        const int i = g.interior_nodes[t];
        const int deg = g.in_ptr[i + 1] - g.in_ptr[i];
        if (deg == 0) throw ModelError("interior node with no incoming edges");
        w.count[t] = deg;
        for (int k = g.in_ptr[i]; k < g.in_ptr[i + 1]; ++k) {
            const int src = g.in_src[k];
            w.src.push_back(src);
            w.dst_pos.push_back(t);
            const double dx = g.in_feat[3 * static_cast<std::size_t>(k)];
            const double dy = g.in_feat[3 * static_cast<std::size_t>(k) + 1];
            const double dist = g.in_feat[3 * static_cast<std::size_t>(k) + 2];
            w.feat_out.insert(w.feat_out.end(), {dx, dy, dist});
            w.feat_in.insert(w.feat_in.end(), {-dx, -dy, dist});
            if (edge_features == 4) {
                double a_ij = 0.0;
                for (int r = g.row_ptr[i]; r < g.row_ptr[i + 1]; ++r)
                    if (g.row_col[r] == src) {
                        a_ij = g.row_val[r];
                        break;
                    }
                w.feat_out.push_back(a_ij);
                w.feat_in.push_back(a_ij);
            }
        }
        w.b_interior.push_back(g.forcing[i]);
    }
    for (int i : g.neumann_nodes) w.b_neumann.push_back(g.forcing[i]);
    return w;
}

// tape-side parameter handles, registered in for_each order
struct ParamIds {
    std::vector<ad::TensorId> ids;
};

inline ParamIds register_params(ad::Tape& tape, const ModelParams& params, bool requires_grad) {
    ParamIds out;
    params.for_each([&](const char*, const Param& p) {
        out.ids.push_back(tape.leaf(p.shape, p.data, requires_grad));
    });
    return out;
}

// gradient in flatten_params order; call after tape.backward
inline std::vector<double> collect_gradients(const ad::Tape& tape, const ParamIds& pid) {
    std::vector<double> flat;
    for (ad::TensorId id : pid.ids) {
        const auto g = tape.grad(id);
        flat.insert(flat.end(), g.begin(), g.end());
    }
    return flat;
}

namespace detail_model {

// indices into ParamIds::ids, mirroring ModelParams::for_each order
enum PIdx {
    kEncW1, kEncB1, kEncW2, kEncB2,
    kMsgOutW, kMsgOutB, kMsgInW, kMsgInB,
    kGruWz, kGruUz, kGruBz, kGruWr, kGruUr, kGruBr, kGruWc, kGruUc, kGruBc,
    kDecW1, kDecB1, kDecW2, kDecB2,
};

inline ad::TensorId encoder_apply(ad::Tape& tape, const ParamIds& p, ad::TensorId x) {
    const auto h = tape.tanh_(tape.linear(x, p.ids[kEncW1], p.ids[kEncB1]));
    return tape.linear(h, p.ids[kEncW2], p.ids[kEncB2]);
}

inline ad::TensorId decoder_apply(ad::Tape& tape, const ParamIds& p, ad::TensorId h) {
    const auto y = tape.tanh_(tape.linear(h, p.ids[kDecW1], p.ids[kDecB1]));
    return tape.linear(y, p.ids[kDecW2], p.ids[kDecB2]);
}

inline ad::SparseRowsView rows_view(const GraphProblem& g) {
    return {g.row_ptr.data(), g.row_col.data(), g.row_val.data(), g.forcing.data(),
            g.canon_order.data(), g.n};
}

inline ad::LinearReplaceView neumann_view(const GraphProblem& g) {
    const NeumannSystem& ns = g.neumann;
    return {&ns.factor, ns.nodes.data(), ns.size(), ns.off_ptr.data(), ns.off_col.data(),
            ns.off_val.data(), ns.rhs.data()};
}

} // namespace detail_model

// ---------------------------------------------------------------------------
// architecture steps (tape level)

// per-node encoding of (u_i, b_i) into the latent space
inline ad::TensorId encode_step(ad::Tape& tape, const ParamIds& p, const GraphProblem& g,
                                ad::TensorId u) {
    const auto b = tape.leaf({g.n}, std::span<const double>(g.forcing), false);
    const auto x = tape.concat_cols({u, b});
    return detail_model::encoder_apply(tape, p, x);
}

// two directional message passings + GRU update on the Interior nodes only
inline ad::TensorId interior_step(ad::Tape& tape, const ParamIds& p, const GraphProblem& g,
                                  const ModelWiring& w, ad::TensorId h) {
    using namespace detail_model;
    const int m = static_cast<int>(g.interior_nodes.size());
    if (m == 0) return h;
    const int e = static_cast<int>(w.src.size());
    const ad::EdgeMeanView out_view{w.src.data(), w.dst_pos.data(), w.feat_out.data(),
                                    w.edge_features, e, w.count.data(), m};
    const ad::EdgeMeanView in_view{w.src.data(), w.dst_pos.data(), w.feat_in.data(),
                                   w.edge_features, e, w.count.data(), m};
    const auto hi = tape.gather_rows(h, g.interior_nodes);
    const auto m_out = tape.edge_message_mean(h, p.ids[kMsgOutW], p.ids[kMsgOutB], out_view);
    const auto m_in = tape.edge_message_mean(h, p.ids[kMsgInW], p.ids[kMsgInB], in_view);
    const auto b_col = tape.leaf({m, 1}, std::span<const double>(w.b_interior), false);
    const auto x = tape.concat_cols({m_out, m_in, b_col});
    const auto z = tape.sigmoid(tape.add(tape.linear(x, p.ids[kGruWz], p.ids[kGruBz]),
                                         tape.linear(hi, p.ids[kGruUz], -1)));
    const auto r = tape.sigmoid(tape.add(tape.linear(x, p.ids[kGruWr], p.ids[kGruBr]),
                                         tape.linear(hi, p.ids[kGruUr], -1)));
    const auto c = tape.tanh_(tape.add(tape.linear(x, p.ids[kGruWc], p.ids[kGruBc]),
                                       tape.linear(tape.mul(r, hi), p.ids[kGruUc], -1)));
    // h' = h + z * (c - h): exactly h when the update gate is closed
    const auto h_new = tape.add(hi, tape.mul(z, tape.sub(c, hi)));
    return tape.scatter_rows(h, g.interior_nodes, h_new);
}

// Dirichlet latents are held across iterations; nothing touches them, so the
// step is the identity. Kept explicit so the contract has a name.
inline ad::TensorId dirichlet_step(ad::Tape&, const GraphProblem&, ad::TensorId h) { return h; }

struct DecodeResult {
    ad::TensorId u;       // decoded state with boundary conditions applied
    ad::TensorId h;       // latents with Neumann rows re-encoded
    ad::TensorId y_rec;   // raw decoder output of h (reconstruction target)
};

// decode latents to physical space, overwrite Dirichlet values, solve the
// Neumann rows exactly, then refresh the Neumann latents from the new values
inline DecodeResult decode_step(ad::Tape& tape, const ParamIds& p, const GraphProblem& g,
                                const ModelWiring& w, ad::TensorId h) {
    using namespace detail_model;
    const auto y_raw = tape.reshape(decoder_apply(tape, p, h), {g.n});
    const auto u_d = tape.scatter_const(y_raw, g.dirichlet_nodes, g.dirichlet_g);
    const auto u = tape.linear_solve_replace(u_d, neumann_view(g));
    ad::TensorId h2 = h;
    if (!g.neumann_nodes.empty()) {
        const auto u_n = tape.gather_rows(u, g.neumann_nodes);
        const auto b_n = tape.leaf({static_cast<int>(g.neumann_nodes.size()), 1},
                                   std::span<const double>(w.b_neumann), false);
        const auto x_n = tape.concat_cols({u_n, b_n});
        const auto h_n = encoder_apply(tape, p, x_n);
        h2 = tape.scatter_rows(h, g.neumann_nodes, h_n);
    }
    const auto y_rec = tape.reshape(decoder_apply(tape, p, h2), {g.n});
    return {u, h2, y_rec};
}

// ---------------------------------------------------------------------------
// rollout

struct RolloutTrace {
    int n = 0, d = 0, k = 0;
    std::vector<std::vector<double>> latents;   // k+1 states of n*d
    std::vector<std::vector<double>> decoded;   // k+1 states of n
    std::vector<double> residual_losses;        // ||A U_t - B||^2, k+1 entries
    std::vector<double> recon_losses;           // k+1 entries
};

// squared residual accumulated in canonical node order (matches the tape)
inline double residual_sq_canonical(const GraphProblem& g, std::span<const double> u) {
    double total = 0.0;
    for (int t = 0; t < g.n; ++t) {
        const double r = g.row_residual(u, g.canon_order[t]);
        total += r * r;
    }
    return total;
}

struct RolloutTapeResult {
    ad::TensorId loss = -1;  // sum over t of (res_t + w * rec_t) / n, t = 1..k
    RolloutTrace trace;
};

inline RolloutTapeResult rollout_on_tape(ad::Tape& tape, const ParamIds& p, const GraphProblem& g,
                                         const ModelWiring& w, int k, double recon_weight,
                                         bool record_trace = true) {
    using namespace detail_model;
    if (k < 1) throw ModelError("rollout: k must be >= 1");
    RolloutTapeResult out;
    RolloutTrace& trace = out.trace;
    trace.n = g.n;
    trace.k = k;

    const std::vector<double> u0 = initial_state(g);
    const auto u0_id = tape.leaf({g.n}, std::span<const double>(u0), false);
    ad::TensorId h = encode_step(tape, p, g, u0_id);
    trace.d = tape.tensor(h).cols();

    const auto rows = rows_view(g);
    const double inv_n = 1.0 / static_cast<double>(g.n);

    // scalar losses are always recorded; full states only when asked for
    auto record = [&](ad::TensorId h_id, ad::TensorId u_id, double res, double rec) {
        trace.residual_losses.push_back(res);
        trace.recon_losses.push_back(rec);
        if (!record_trace) return;
        const auto hv = tape.value(h_id);
        const auto uv = tape.value(u_id);
        trace.latents.emplace_back(hv.begin(), hv.end());
        trace.decoded.emplace_back(uv.begin(), uv.end());
    };

    // iteration 0: the provided initial state
    {
        const auto y0 = tape.reshape(decoder_apply(tape, p, h), {g.n});
        const auto diff0 = tape.gather_rows(tape.sub(y0, u0_id), g.canon_order);
        const auto rec0 = tape.sum(tape.square(diff0));
        record(h, u0_id, residual_sq_canonical(g, u0), tape.value(rec0)[0]);
    }

    ad::TensorId loss = -1;
    for (int t = 1; t <= k; ++t) {
        h = interior_step(tape, p, g, w, h);
        h = dirichlet_step(tape, g, h);
        const DecodeResult dec = decode_step(tape, p, g, w, h);
        h = dec.h;
        const auto res_vec = tape.residual_terms(dec.u, rows);
        const auto res_t = tape.sum(tape.square(res_vec));
        const auto diff = tape.gather_rows(tape.sub(dec.y_rec, dec.u), g.canon_order);
        const auto rec_t = tape.sum(tape.square(diff));
        const auto cost =
            tape.add(tape.scale(res_t, inv_n), tape.scale(rec_t, recon_weight * inv_n));
        loss = t == 1 ? cost : tape.add(loss, cost);
        record(h, dec.u, tape.value(res_t)[0], tape.value(rec_t)[0]);
    }
    out.loss = loss;
    return out;
}

// inference rollout; the trace holds all intermediate states and losses
inline RolloutTrace rollout(const GraphProblem& g, const ModelParams& params, int k,
                            double recon_weight = 1.0) {
    ad::Tape tape;
    const ParamIds pid = register_params(tape, params, false);
    const ModelWiring w = make_wiring(g, params.cfg.edge_features);
    return rollout_on_tape(tape, pid, g, w, k, recon_weight).trace;
}

// ---------------------------------------------------------------------------
// value-level wrappers

inline std::vector<double> encode(const GraphProblem& g, const ModelParams& params,
                                  std::span<const double> u0) {
    if (static_cast<int>(u0.size()) != g.n) throw ModelError("encode: size mismatch");
    ad::Tape tape;
    const ParamIds pid = register_params(tape, params, false);
    const auto u = tape.leaf({g.n}, u0, false);
    const auto h = encode_step(tape, pid, g, u);
    const auto v = tape.value(h);
    return {v.begin(), v.end()};
}

inline std::vector<double> interior_step(const GraphProblem& g, const ModelParams& params,
                                         std::span<const double> latents) {
    ad::Tape tape;
    const ParamIds pid = register_params(tape, params, false);
    const ModelWiring w = make_wiring(g, params.cfg.edge_features);
    const auto h = tape.leaf({g.n, params.cfg.d}, latents, false);
    const auto h2 = interior_step(tape, pid, g, w, h);
    const auto v = tape.value(h2);
    return {v.begin(), v.end()};
}

// exact per-row solve of the Neumann stiffness rows given the other values
inline std::vector<double> neumann_step(const GraphProblem& g, std::span<const double> decoded) {
    std::vector<double> u(decoded.begin(), decoded.end());
    g.neumann.apply(u);
    return u;
}

inline std::vector<double> decode(const GraphProblem& g, const ModelParams& params,
                                  std::span<const double> latents) {
    ad::Tape tape;
    const ParamIds pid = register_params(tape, params, false);
    const ModelWiring w = make_wiring(g, params.cfg.edge_features);
    const auto h = tape.leaf({g.n, params.cfg.d}, latents, false);
    const DecodeResult dec = decode_step(tape, pid, g, w, h);
    const auto v = tape.value(dec.u);
    return {v.begin(), v.end()};
}

// Probe configuration for information-propagation checks: all biases zero and
// geometry-blind messages, so the latent of a node that has received no
// boundary information stays exactly zero.
inline ModelParams make_propagation_probe(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p = init_params(cfg, seed);
    p.for_each([](const char* name, Param& prm) {
        if (prm.shape.size() == 1) prm.data.assign(prm.data.size(), 0.0);
        const std::string n = name;
        if (n == "msg_out_w" || n == "msg_in_w") {
            const int in = prm.shape[1];
            const int d = prm.shape[0];
            for (int o = 0; o < d; ++o)
                for (int k = d; k < in; ++k) prm.data[static_cast<std::size_t>(o) * in + k] = 0.0;
        }
    });
    return p;
}

} // namespace poissonnet
