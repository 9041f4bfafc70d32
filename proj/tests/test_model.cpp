#include <catch2/catch.hpp>

#include <cmath>

#include "helpers.hpp"
#include "poissonnet/model.hpp"
#include "poissonnet/rng.hpp"

using namespace poissonnet;
using namespace test_helpers;

namespace {

std::size_t gru_param_count(const ModelConfig& cfg) {
    const std::size_t d = cfg.d;
    return 3 * (d * (2 * d + 1) + d * d + d);
}

// permutes a sample's mesh and system by copying stored values (assembly
// order would otherwise perturb the last bits)
Sample permute_sample(const Sample& s, const std::vector<int>& perm) {
    const int n = s.graph.n;
    std::vector<int> inv(n);
    for (int i = 0; i < n; ++i) inv[perm[i]] = i;  // perm[i] = new index of old node i
    Sample out;
    out.fields = s.fields;
    out.mesh.coords.resize(n);
    out.mesh.node_kind.resize(n);
    for (int i = 0; i < n; ++i) {
        out.mesh.coords[perm[i]] = s.mesh.coords[i];
        out.mesh.node_kind[perm[i]] = s.mesh.node_kind[i];
    }
    for (const auto& t : s.mesh.triangles)
        out.mesh.triangles.push_back({perm[t[0]], perm[t[1]], perm[t[2]]});
    for (const auto& be : s.mesh.boundary_edges)
        out.mesh.boundary_edges.push_back({perm[be.a], perm[be.b], be.normal});
    // permute the CSR by copying values row by row, keeping columns sorted
    out.system.n = n;
    out.system.row_ptr.assign(n + 1, 0);
    auto entry = [&](int i, int j) {
        for (int k = s.system.row_ptr[i]; k < s.system.row_ptr[i + 1]; ++k)
            if (s.system.col_idx[k] == j) return s.system.values[k];
        FAIL("missing entry");
        return 0.0;
    };
    for (int newi = 0; newi < n; ++newi) {
        const int old = inv[newi];
        std::vector<int> cols;
        for (int k = s.system.row_ptr[old]; k < s.system.row_ptr[old + 1]; ++k)
            cols.push_back(perm[s.system.col_idx[k]]);
        std::sort(cols.begin(), cols.end());
        for (int c : cols) {
            out.system.col_idx.push_back(c);
            out.system.values.push_back(entry(old, inv[c]));
        }
        out.system.row_ptr[newi + 1] = static_cast<int>(out.system.col_idx.size());
        out.system.b.push_back(s.system.b[old]);
    }
    std::vector<std::pair<int, double>> dir;
    for (std::size_t k = 0; k < s.system.dirichlet_nodes.size(); ++k)
        dir.push_back({perm[s.system.dirichlet_nodes[k]], s.system.dirichlet_values[k]});
    std::sort(dir.begin(), dir.end());
    for (auto& [i, g] : dir) {
        out.system.dirichlet_nodes.push_back(i);
        out.system.dirichlet_values.push_back(g);
    }
    out.graph = build_graph(out.mesh, out.system, out.fields);
    return out;
}

} // namespace

TEST_CASE("parameter counts") {
    // d = 1 toy configuration, counted by hand
    const ModelConfig toy{1, 4, 4};
    const std::size_t enc = 4 * 2 + 4 + 1 * 4 + 1;      // 17
    const std::size_t msg = 2 * (1 * (1 + 4) + 1);      // 12: latent + 4 edge features
    const std::size_t gru = 3 * (1 * 3 + 1 * 1 + 1);    // 15
    const std::size_t dec = 4 * 1 + 4 + 1 * 4 + 1;      // 13
    CHECK(param_count(toy) == enc + msg + gru + dec);
    CHECK(param_count(init_params(toy, 0)) == param_count(toy));

    // default configuration sits inside the parameter budget
    CHECK(param_count(ModelConfig{}) >= 4000);
    CHECK(param_count(ModelConfig{}) <= 5000);

    // doubling the latent dimension roughly quadruples the GRU share
    ModelConfig d8{8, 16, 16}, d16{16, 16, 16};
    const double ratio = static_cast<double>(gru_param_count(d16)) / gru_param_count(d8);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
}

TEST_CASE("encoding") {
    const Sample s = five_node_sample();
    const std::vector<double> u0 = initial_state(s.graph);

    // zero weights give a zero latent state
    ModelConfig mc{3, 4, 4};
    ModelParams zero = init_params(mc, 0);
    zero.for_each([](const char*, Param& p) { p.data.assign(p.data.size(), 0.0); });
    for (double v : encode(s.graph, zero, u0)) CHECK(v == 0.0);

    // hand-computed single-node encoding
    GraphProblem one;
    one.n = 1;
    one.kind = {NodeKind::Dirichlet};
    one.coords = {{0.5, 0.5}};
    one.in_ptr = {0, 0};
    one.row_ptr = {0, 1};
    one.row_col = {0};
    one.row_val = {1.0};
    one.forcing = {0.8};
    one.dirichlet_nodes = {0};
    one.dirichlet_g = {0.8};
    one.canon_order = {0};
    const ModelParams params = init_params(mc, 5);
    const std::vector<double> latent = encode(one, params, std::vector<double>{0.8});
    // scalar re-computation of tanh(W1 x + b1), then W2 . + b2
    std::array<double, 4> hidden{};
    for (int h = 0; h < 4; ++h)
        hidden[h] = std::tanh(params.enc_w1.data[h * 2] * 0.8 + params.enc_w1.data[h * 2 + 1] * 0.8 +
                              params.enc_b1.data[h]);
    for (int o = 0; o < 3; ++o) {
        double v = params.enc_b2.data[o];
        for (int h = 0; h < 4; ++h) v += params.enc_w2.data[o * 4 + h] * hidden[h];
        CHECK(latent[o] == Approx(v).margin(1e-15));
    }

    // per-node map: permuting nodes permutes latents bitwise
    const ModelParams p2 = init_params(mc, 9);
    const std::vector<int> perm{4, 0, 3, 1, 2};
    const Sample sp = permute_sample(s, perm);
    const auto h1 = encode(s.graph, p2, u0);
    const auto h2 = encode(sp.graph, p2, initial_state(sp.graph));
    for (int i = 0; i < s.graph.n; ++i)
        for (int c = 0; c < mc.d; ++c) REQUIRE(h2[perm[i] * mc.d + c] == h1[i * mc.d + c]);
}

TEST_CASE("a closed update gate leaves interior latents bitwise unchanged") {
    const Sample s = five_node_sample();
    const ModelConfig mc{3, 4, 4};
    ModelParams params = init_params(mc, 11);
    params.gru_wz.data.assign(params.gru_wz.data.size(), 0.0);
    params.gru_uz.data.assign(params.gru_uz.data.size(), 0.0);
    params.gru_bz.data.assign(params.gru_bz.data.size(), -800.0);  // sigmoid underflows to 0
    const std::vector<double> h0 = encode(s.graph, params, initial_state(s.graph));
    const std::vector<double> h1 = interior_step(s.graph, params, h0);
    REQUIRE(h0.size() == h1.size());
    for (std::size_t i = 0; i < h0.size(); ++i) REQUIRE(h0[i] == h1[i]);
}

TEST_CASE("mean aggregation of identical messages equals the single message") {
    // three edges from the same source with identical synthetic features
    const int d = 3;
    Rng rng(4);
    std::vector<double> h(2 * d), w((d + 3) * d), b(d);
    for (double& v : h) v = rng.uniform(-1, 1);
    for (double& v : w) v = rng.uniform(-1, 1);
    for (double& v : b) v = rng.uniform(-1, 1);
    const std::vector<int> src{0, 0, 0}, dst{0, 0, 0};
    const std::vector<double> feat{0.1, -0.2, 0.5, 0.1, -0.2, 0.5, 0.1, -0.2, 0.5};
    const std::vector<int> count3{3}, count1{1};
    ad::Tape tape;
    const auto hid = tape.leaf({2, d}, h, false);
    const auto wid = tape.leaf({d, d + 3}, w, false);
    const auto bid = tape.leaf({d}, b, false);
    const ad::EdgeMeanView three{src.data(), dst.data(), feat.data(), 3, 3, count3.data(), 1};
    const ad::EdgeMeanView one{src.data(), dst.data(), feat.data(), 3, 1, count1.data(), 1};
    const auto m3 = tape.value(tape.edge_message_mean(hid, wid, bid, three));
    const auto m1 = tape.value(tape.edge_message_mean(hid, wid, bid, one));
    // (x + x + x) / 3 re-rounds, so equality holds to an ulp, not bitwise
    for (int c = 0; c < d; ++c) REQUIRE(m3[c] == Approx(m1[c]).margin(1e-15));
}

TEST_CASE("interior step matches an independent scalar re-implementation") {
    const Sample s = five_node_sample();
    const ModelConfig mc{3, 4, 4};
    const ModelParams params = init_params(mc, 21);
    const int d = mc.d;
    const std::vector<double> h = encode(s.graph, params, initial_state(s.graph));
    const std::vector<double> out = interior_step(s.graph, params, h);

    const GraphProblem& g = s.graph;
    const int fe = params.cfg.edge_features;
    const int in_w = d + fe;
    for (int i : g.interior_nodes) {
        // messages: mean over incoming edges of tanh(W [h_src | feat] + b)
        std::vector<double> m_out(d, 0.0), m_in(d, 0.0);
        const int deg = g.in_ptr[i + 1] - g.in_ptr[i];
        for (int k = g.in_ptr[i]; k < g.in_ptr[i + 1]; ++k) {
            const int src = g.in_src[k];
            double coupling = 0.0;
            for (int r = g.row_ptr[i]; r < g.row_ptr[i + 1]; ++r)
                if (g.row_col[r] == src) coupling = g.row_val[r];
            const double f[4] = {g.in_feat[3 * (std::size_t)k], g.in_feat[3 * (std::size_t)k + 1],
                                 g.in_feat[3 * (std::size_t)k + 2], coupling};
            for (int o = 0; o < d; ++o) {
                double so = params.msg_out_b.data[o];
                double si = params.msg_in_b.data[o];
                for (int c = 0; c < d; ++c) {
                    so += params.msg_out_w.data[o * in_w + c] * h[src * d + c];
                    si += params.msg_in_w.data[o * in_w + c] * h[src * d + c];
                }
                so += params.msg_out_w.data[o * in_w + d] * f[0] +
                      params.msg_out_w.data[o * in_w + d + 1] * f[1] +
                      params.msg_out_w.data[o * in_w + d + 2] * f[2];
                si += params.msg_in_w.data[o * in_w + d] * (-f[0]) +
                      params.msg_in_w.data[o * in_w + d + 1] * (-f[1]) +
                      params.msg_in_w.data[o * in_w + d + 2] * f[2];
                if (fe == 4) {
                    so += params.msg_out_w.data[o * in_w + d + 3] * f[3];
                    si += params.msg_in_w.data[o * in_w + d + 3] * f[3];
                }
                m_out[o] += std::tanh(so) / deg;
                m_in[o] += std::tanh(si) / deg;
            }
        }
        // GRU with input [m_out | m_in | b_i]
        std::vector<double> x(2 * d + 1);
        for (int c = 0; c < d; ++c) {
            x[c] = m_out[c];
            x[d + c] = m_in[c];
        }
        x[2 * d] = g.forcing[i];
        auto gate = [&](const Param& w, const Param& u, const Param& bias, int o, bool candidate,
                        const std::vector<double>& r) {
            double v = bias.data[o];
            for (int c = 0; c < 2 * d + 1; ++c) v += w.data[o * (2 * d + 1) + c] * x[c];
            for (int c = 0; c < d; ++c)
                v += u.data[o * d + c] * (candidate ? r[c] * h[i * d + c] : h[i * d + c]);
            return v;
        };
        std::vector<double> r(d);
        for (int o = 0; o < d; ++o)
            r[o] = 1.0 / (1.0 + std::exp(-gate(params.gru_wr, params.gru_ur, params.gru_br, o,
                                               false, r)));
        for (int o = 0; o < d; ++o) {
            const double z = 1.0 / (1.0 + std::exp(-gate(params.gru_wz, params.gru_uz,
                                                         params.gru_bz, o, false, r)));
            const double c =
                std::tanh(gate(params.gru_wc, params.gru_uc, params.gru_bc, o, true, r));
            const double expected = h[i * d + o] + z * (c - h[i * d + o]);
            CHECK(out[i * d + o] == Approx(expected).margin(1e-12));
        }
    }
    // non-interior rows untouched
    for (int i = 0; i < g.n; ++i) {
        if (g.kind[i] == NodeKind::Interior) continue;
        for (int c = 0; c < d; ++c) REQUIRE(out[i * d + c] == h[i * d + c]);
    }
}

TEST_CASE("Dirichlet latents and values are held through a k=20 rollout") {
    const Sample s = five_node_sample();
    const ModelParams params = init_params({3, 4, 4}, 2);
    const RolloutTrace tr = rollout(s.graph, params, 20);
    REQUIRE(tr.latents.size() == 21);
    for (int i : s.graph.dirichlet_nodes)
        for (int t = 1; t <= 20; ++t)
            for (int c = 0; c < tr.d; ++c)
                REQUIRE(tr.latents[t][i * tr.d + c] == tr.latents[0][i * tr.d + c]);
    for (std::size_t k = 0; k < s.graph.dirichlet_nodes.size(); ++k)
        for (int t = 0; t <= 20; ++t)
            REQUIRE(tr.decoded[t][s.graph.dirichlet_nodes[k]] == s.graph.dirichlet_g[k]);
}

TEST_CASE("Neumann step solves each stiffness row given the neighbours") {
    // single Neumann row (a_ii = 1, one neighbour with -1, b = 0) mirrors the
    // neighbour value
    GraphProblem g;
    g.n = 2;
    g.kind = {NodeKind::Dirichlet, NodeKind::Neumann};
    g.coords = {{0, 0}, {1, 0}};
    g.row_ptr = {0, 1, 3};
    g.row_col = {0, 1, 0};
    g.row_val = {1.0, 1.0, -1.0};
    g.forcing = {0.6, 0.0};
    g.dirichlet_nodes = {0};
    g.dirichlet_g = {0.6};
    g.neumann_nodes = {1};
    g.canon_order = {0, 1};
    g.neumann.nodes = {1};
    g.neumann.factor = linalg::lu_factorize({1.0}, 1);
    g.neumann.off_ptr = {0, 1};
    g.neumann.off_col = {0};
    g.neumann.off_val = {-1.0};
    g.neumann.rhs = {0.0};
    const std::vector<double> u = neumann_step(g, std::vector<double>{0.6, 42.0});
    CHECK(u[1] == 0.6);

    // mixed sample: every Neumann row satisfied exactly after each iteration
    const Sample s = sample_dataset(small_spec(1, 101, true))[0];
    const ModelParams params = init_params({3, 4, 4}, 8);
    const RolloutTrace tr = rollout(s.graph, params, 6);
    for (int t = 1; t <= 6; ++t) {
        double neumann_sq = 0.0;
        for (int i : s.graph.neumann_nodes) {
            const double r = s.graph.row_residual(tr.decoded[t], i);
            neumann_sq += r * r;
        }
        CHECK(neumann_sq < 1e-24);
        // per-row oracle: u_i = (b_i - sum_j a_ij u_j) / a_ii on the final state
        for (int i : s.graph.neumann_nodes) {
            double off = 0.0, diag = 0.0;
            for (int k = s.graph.row_ptr[i]; k < s.graph.row_ptr[i + 1]; ++k) {
                if (s.graph.row_col[k] == i)
                    diag = s.graph.row_val[k];
                else
                    off += s.graph.row_val[k] * tr.decoded[t][s.graph.row_col[k]];
            }
            CHECK(tr.decoded[t][i] == Approx((s.graph.forcing[i] - off) / diag).margin(1e-12));
        }
    }
}

TEST_CASE("decoding enforces the boundary by construction") {
    const Sample s = five_node_sample();
    const ModelConfig mc{3, 4, 4};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ModelParams params = init_params(mc, seed);
        const std::vector<double> h = encode(s.graph, params, initial_state(s.graph));
        const std::vector<double> u = decode(s.graph, params, h);
        for (std::size_t k = 0; k < s.graph.dirichlet_nodes.size(); ++k)
            REQUIRE(u[s.graph.dirichlet_nodes[k]] == s.graph.dirichlet_g[k]);
    }
    // zero decoder: interior decodes to zero, Dirichlet to g
    ModelParams zero_dec = init_params(mc, 1);
    zero_dec.dec_w1.data.assign(zero_dec.dec_w1.data.size(), 0.0);
    zero_dec.dec_b1.data.assign(zero_dec.dec_b1.data.size(), 0.0);
    zero_dec.dec_w2.data.assign(zero_dec.dec_w2.data.size(), 0.0);
    zero_dec.dec_b2.data.assign(zero_dec.dec_b2.data.size(), 0.0);
    const std::vector<double> h = encode(s.graph, zero_dec, initial_state(s.graph));
    const std::vector<double> u = decode(s.graph, zero_dec, h);
    for (int i : s.graph.interior_nodes) CHECK(u[i] == 0.0);
    for (std::size_t k = 0; k < s.graph.dirichlet_nodes.size(); ++k)
        CHECK(u[s.graph.dirichlet_nodes[k]] == s.graph.dirichlet_g[k]);
}

TEST_CASE("rollout traces are complete, deterministic and permutation-equivariant") {
    const Sample s = sample_dataset(small_spec(1, 61, true))[0];
    const ModelConfig mc{4, 5, 5};
    const ModelParams params = init_params(mc, 3);
    const int k = 4;
    const RolloutTrace a = rollout(s.graph, params, k);
    CHECK(a.k == k);
    CHECK(a.decoded.size() == static_cast<std::size_t>(k + 1));
    CHECK(a.latents.size() == static_cast<std::size_t>(k + 1));
    CHECK(a.residual_losses.size() == static_cast<std::size_t>(k + 1));
    for (int t = 0; t <= k; ++t)
        CHECK(a.residual_losses[t] == residual_sq_canonical(s.graph, a.decoded[t]));

    const RolloutTrace b = rollout(s.graph, params, k);
    for (int t = 0; t <= k; ++t)
        for (int i = 0; i < a.n; ++i) REQUIRE(a.decoded[t][i] == b.decoded[t][i]);

    // relabel the nodes with a deterministic shuffle
    std::vector<int> perm(s.graph.n);
    for (int i = 0; i < s.graph.n; ++i) perm[i] = i;
    Rng rng(10);
    for (int i = s.graph.n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(0, i - 1)]);
    const Sample sp = permute_sample(s, perm);
    const RolloutTrace c = rollout(sp.graph, params, k);
    for (int t = 0; t <= k; ++t) {
        REQUIRE(c.residual_losses[t] == a.residual_losses[t]);
        REQUIRE(c.recon_losses[t] == a.recon_losses[t]);
        for (int i = 0; i < a.n; ++i) REQUIRE(c.decoded[t][perm[i]] == a.decoded[t][i]);
    }
}

TEST_CASE("information propagates no faster than graph distance from the boundary") {
    DatasetSpec spec = small_spec(2, 300);
    spec.all_dirichlet_prob = 1.0;  // the Neumann projection is deliberately nonlocal
    const auto samples = sample_dataset(spec);
    const ModelConfig mc{4, 5, 5};
    const ModelParams probe = make_propagation_probe(mc, 19);
    for (const Sample& s : samples) {
        // zero forcing keeps non-boundary inputs silent
        FieldSpec fs = s.fields;
        fs.f_coeffs.assign(fs.f_coeffs.size(), 0.0);
        const LinearSystem sys = assemble(s.mesh, fs);
        const GraphProblem g = build_graph(s.mesh, sys, fs);

        const int k = 8;
        const RolloutTrace tr = rollout(g, probe, k);
        const auto adj = node_adjacency(s.mesh);
        const auto dist = bfs_from_set(adj, g.dirichlet_nodes);
        int departures = 0;
        for (int i = 0; i < g.n; ++i) {
            if (g.kind[i] == NodeKind::Dirichlet) continue;
            int first = k + 1;
            for (int t = 0; t <= k; ++t)
                if (std::fabs(tr.decoded[t][i]) > 1e-12) {
                    first = t;
                    break;
                }
            if (first <= k) {
                ++departures;
                REQUIRE(first >= dist[i]);
            }
        }
        CHECK(departures > 0);  // the signal does spread
    }
}
