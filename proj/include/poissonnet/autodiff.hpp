#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "poissonnet/linalg.hpp"

namespace poissonnet::ad {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using TensorId = int;

// dense rank-1 / rank-2 tensor of doubles
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    std::size_t size() const { return data.size(); }
};

inline std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t s = 1;
    for (int d : shape) s *= static_cast<std::size_t>(d);
    return s;
}

// ---------------------------------------------------------------------------
// views used by the graph-specific operations (raw pointers into data owned
// by the caller; must outlive the tape)

struct SparseRowsView {
    const int* row_ptr = nullptr;
    const int* row_col = nullptr;
    const double* row_val = nullptr;
    const double* rhs = nullptr;  // subtracted per row
    const int* order = nullptr;   // output ordering, size n
    int n = 0;
};

struct LinearReplaceView {
    const linalg::DenseLu* factor = nullptr;
    const int* idx = nullptr;  // replaced entries, size m
    int m = 0;
    const int* off_ptr = nullptr;
    const int* off_col = nullptr;
    const double* off_val = nullptr;
    const double* rhs = nullptr;  // size m
};

struct EdgeMeanView {
    const int* src = nullptr;      // per edge: source row into h
    const int* dst_pos = nullptr;  // per edge: output row
    const double* feat = nullptr;  // feat_dim per edge
    int feat_dim = 0;
    int num_edges = 0;
    const int* count = nullptr;  // per output row, >= 1
    int num_out = 0;
};

// ---------------------------------------------------------------------------
// tape

// Define-by-run tape: forward values are computed eagerly, each operation
// records a backward closure. Rebuilt every pass; graph sizes vary per sample.
class Tape {
public:
    TensorId leaf(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
        if (shape_size(shape) != data.size()) throw ShapeError("leaf: shape/data mismatch");
        return push(std::move(shape), std::move(data), requires_grad);
    }

    TensorId leaf(std::vector<int> shape, std::span<const double> data, bool requires_grad) {
        return leaf(std::move(shape), std::vector<double>(data.begin(), data.end()), requires_grad);
    }

    TensorId zeros(std::vector<int> shape, bool requires_grad = false) {
        std::vector<double> d(shape_size(shape), 0.0);
        return push(std::move(shape), std::move(d), requires_grad);
    }

    const Tensor& tensor(TensorId id) const { return slots_[id]; }
    std::span<const double> value(TensorId id) const { return slots_[id].data; }
    std::span<const double> grad(TensorId id) const { return slots_[id].grad; }

    void reset() {
        slots_.clear();
        nodes_.clear();
    }

    // ---- elementwise ----

    TensorId add(TensorId a, TensorId b) { return zip(a, b, "add", [](double x, double y) { return x + y; },
        [](Tape& t, TensorId a2, TensorId b2, TensorId out) {
            t.accumulate(a2, t.slots_[out].grad, 1.0);
            t.accumulate(b2, t.slots_[out].grad, 1.0);
        }); }

    TensorId sub(TensorId a, TensorId b) { return zip(a, b, "sub", [](double x, double y) { return x - y; },
        [](Tape& t, TensorId a2, TensorId b2, TensorId out) {
            t.accumulate(a2, t.slots_[out].grad, 1.0);
            t.accumulate(b2, t.slots_[out].grad, -1.0);
        }); }

    TensorId mul(TensorId a, TensorId b) {
        check_same_shape(a, b, "mul");
        const Tensor& ta = slots_[a];
        const Tensor& tb = slots_[b];
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.data[i] * tb.data[i];
        const TensorId id = push(ta.shape, std::move(out), ta.requires_grad || tb.requires_grad);
        if (slots_[id].requires_grad)
            record([a, b, id](Tape& t) {
                const auto& g = t.slots_[id].grad;
                if (t.slots_[a].requires_grad) {
                    auto& ga = t.slots_[a].grad;
                    const auto& vb = t.slots_[b].data;
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                }
                if (t.slots_[b].requires_grad) {
                    auto& gb = t.slots_[b].grad;
                    const auto& va = t.slots_[a].data;
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                }
            });
        return id;
    }

    TensorId scale(TensorId a, double c) {
        const Tensor& ta = slots_[a];
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta.data[i];
        const TensorId id = push(ta.shape, std::move(out), ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, c, id](Tape& t) { t.accumulate(a, t.slots_[id].grad, c); });
        return id;
    }

    TensorId square(TensorId a) {
        const Tensor& ta = slots_[a];
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.data[i] * ta.data[i];
        const TensorId id = push(ta.shape, std::move(out), ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id](Tape& t) {
                auto& ga = t.slots_[a].grad;
                const auto& va = t.slots_[a].data;
                const auto& g = t.slots_[id].grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * va[i] * g[i];
            });
        return id;
    }

    TensorId sigmoid(TensorId a) {
        const Tensor& ta = slots_[a];
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = ta.data[i];
            out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        }
        const TensorId id = push(ta.shape, std::move(out), ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id](Tape& t) {
                auto& ga = t.slots_[a].grad;
                const auto& y = t.slots_[id].data;
                const auto& g = t.slots_[id].grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] * (1.0 - y[i]) * g[i];
            });
        return id;
    }

    TensorId tanh_(TensorId a) {
        const Tensor& ta = slots_[a];
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(ta.data[i]);
        const TensorId id = push(ta.shape, std::move(out), ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id](Tape& t) {
                auto& ga = t.slots_[a].grad;
                const auto& y = t.slots_[id].data;
                const auto& g = t.slots_[id].grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += (1.0 - y[i] * y[i]) * g[i];
            });
        return id;
    }

    TensorId sum(TensorId a) {
        const Tensor& ta = slots_[a];
        double s = 0.0;
        for (double v : ta.data) s += v;
        const TensorId id = push({1}, {s}, ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id](Tape& t) {
                auto& ga = t.slots_[a].grad;
                const double g = t.slots_[id].grad[0];
                for (double& v : ga) v += g;
            });
        return id;
    }

    // ---- linear algebra ----

    TensorId matvec(TensorId m, TensorId v) {
        const Tensor& tm = slots_[m];
        const Tensor& tv = slots_[v];
        if (tm.shape.size() != 2 || tv.shape.size() != 1 || tm.cols() != tv.rows())
            throw ShapeError("matvec: shape mismatch");
        const int r = tm.rows(), c = tm.cols();
        std::vector<double> out(r, 0.0);
        for (int i = 0; i < r; ++i) {
            const double* row = &tm.data[static_cast<std::size_t>(i) * c];
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += row[j] * tv.data[j];
            out[i] = s;
        }
        const TensorId id = push({r}, std::move(out), tm.requires_grad || tv.requires_grad);
        if (slots_[id].requires_grad)
            record([m, v, id, r, c](Tape& t) {
                const auto& g = t.slots_[id].grad;
                if (t.slots_[m].requires_grad) {
                    auto& gm = t.slots_[m].grad;
                    const auto& vv = t.slots_[v].data;
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) gm[static_cast<std::size_t>(i) * c + j] += g[i] * vv[j];
                }
                if (t.slots_[v].requires_grad) {
                    auto& gv = t.slots_[v].grad;
                    const auto& vm = t.slots_[m].data;
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) gv[j] += vm[static_cast<std::size_t>(i) * c + j] * g[i];
                }
            });
        return id;
    }

    TensorId matmul(TensorId a, TensorId b) {
        const Tensor& ta = slots_[a];
        const Tensor& tb = slots_[b];
        if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.cols() != tb.rows())
            throw ShapeError("matmul: shape mismatch");
        const int r = ta.rows(), k = ta.cols(), c = tb.cols();
        std::vector<double> out(static_cast<std::size_t>(r) * c, 0.0);
        for (int i = 0; i < r; ++i)
            for (int p = 0; p < k; ++p) {
                const double av = ta.data[static_cast<std::size_t>(i) * k + p];
                const double* brow = &tb.data[static_cast<std::size_t>(p) * c];
                double* orow = &out[static_cast<std::size_t>(i) * c];
                for (int j = 0; j < c; ++j) orow[j] += av * brow[j];
            }
        const TensorId id = push({r, c}, std::move(out), ta.requires_grad || tb.requires_grad);
        if (slots_[id].requires_grad)
            record([a, b, id, r, k, c](Tape& t) {
                const auto& g = t.slots_[id].grad;
                if (t.slots_[a].requires_grad) {
                    auto& ga = t.slots_[a].grad;
                    const auto& vb = t.slots_[b].data;
                    for (int i = 0; i < r; ++i)
                        for (int p = 0; p < k; ++p) {
                            double s = 0.0;
                            for (int j = 0; j < c; ++j)
                                s += g[static_cast<std::size_t>(i) * c + j] * vb[static_cast<std::size_t>(p) * c + j];
                            ga[static_cast<std::size_t>(i) * k + p] += s;
                        }
                }
                if (t.slots_[b].requires_grad) {
                    auto& gb = t.slots_[b].grad;
                    const auto& va = t.slots_[a].data;
                    for (int p = 0; p < k; ++p)
                        for (int j = 0; j < c; ++j) {
                            double s = 0.0;
                            for (int i = 0; i < r; ++i)
                                s += va[static_cast<std::size_t>(i) * k + p] * g[static_cast<std::size_t>(i) * c + j];
                            gb[static_cast<std::size_t>(p) * c + j] += s;
                        }
                }
            });
        return id;
    }

    // y[i][o] = sum_k x[i][k] * w[o][k] + b[o]; pass b = -1 for no bias
    TensorId linear(TensorId x, TensorId w, TensorId b) {
        const Tensor& tx = slots_[x];
        const Tensor& tw = slots_[w];
        if (tx.shape.size() != 2 || tw.shape.size() != 2 || tx.cols() != tw.cols())
            throw ShapeError("linear: shape mismatch");
        const int n = tx.rows(), in = tx.cols(), out_dim = tw.rows();
        if (b >= 0 && static_cast<int>(slots_[b].size()) != out_dim)
            throw ShapeError("linear: bias mismatch");
        std::vector<double> out(static_cast<std::size_t>(n) * out_dim);
        for (int i = 0; i < n; ++i) {
            const double* xrow = &tx.data[static_cast<std::size_t>(i) * in];
            double* orow = &out[static_cast<std::size_t>(i) * out_dim];
            for (int o = 0; o < out_dim; ++o) {
                const double* wrow = &tw.data[static_cast<std::size_t>(o) * in];
                double s = b >= 0 ? slots_[b].data[o] : 0.0;
                for (int k = 0; k < in; ++k) s += xrow[k] * wrow[k];
                orow[o] = s;
            }
        }
        const bool rg = tx.requires_grad || tw.requires_grad || (b >= 0 && slots_[b].requires_grad);
        const TensorId id = push({n, out_dim}, std::move(out), rg);
        if (rg)
            record([x, w, b, id, n, in, out_dim](Tape& t) {
                const auto& g = t.slots_[id].grad;
                const bool need_x = t.slots_[x].requires_grad;
                const bool need_w = t.slots_[w].requires_grad;
                const bool need_b = b >= 0 && t.slots_[b].requires_grad;
                for (int i = 0; i < n; ++i) {
                    const double* grow = &g[static_cast<std::size_t>(i) * out_dim];
                    const double* xrow = &t.slots_[x].data[static_cast<std::size_t>(i) * in];
                    double* gxrow = need_x ? &t.slots_[x].grad[static_cast<std::size_t>(i) * in] : nullptr;
                    for (int o = 0; o < out_dim; ++o) {
                        const double go = grow[o];
                        if (go == 0.0) continue;
                        const double* wrow = &t.slots_[w].data[static_cast<std::size_t>(o) * in];
                        if (need_x)
                            for (int k = 0; k < in; ++k) gxrow[k] += go * wrow[k];
                        if (need_w) {
                            double* gwrow = &t.slots_[w].grad[static_cast<std::size_t>(o) * in];
                            for (int k = 0; k < in; ++k) gwrow[k] += go * xrow[k];
                        }
                        if (need_b) t.slots_[b].grad[o] += go;
                    }
                }
            });
        return id;
    }

    // ---- shape plumbing ----

    TensorId reshape(TensorId a, std::vector<int> shape) {
        const Tensor& ta = slots_[a];
        if (shape_size(shape) != ta.size()) throw ShapeError("reshape: size mismatch");
        const TensorId id = push(std::move(shape), ta.data, ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id](Tape& t) { t.accumulate(a, t.slots_[id].grad, 1.0); });
        return id;
    }

    // concatenate along columns; rank-1 inputs are treated as single columns
    TensorId concat_cols(const std::vector<TensorId>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: empty");
        const int n = slots_[parts[0]].rows();
        int total = 0;
        bool rg = false;
        for (TensorId p : parts) {
            if (slots_[p].rows() != n) throw ShapeError("concat_cols: row mismatch");
            total += slots_[p].cols();
            rg = rg || slots_[p].requires_grad;
        }
        std::vector<double> out(static_cast<std::size_t>(n) * total);
        int col0 = 0;
        for (TensorId p : parts) {
            const int c = slots_[p].cols();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j)
                    out[static_cast<std::size_t>(i) * total + col0 + j] =
                        slots_[p].data[static_cast<std::size_t>(i) * c + j];
            col0 += c;
        }
        const TensorId id = push({n, total}, std::move(out), rg);
        if (rg) {
            std::vector<TensorId> ps = parts;
            record([ps, id, n, total](Tape& t) {
                const auto& g = t.slots_[id].grad;
                int col0 = 0;
                for (TensorId p : ps) {
                    const int c = t.slots_[p].cols();
                    if (t.slots_[p].requires_grad) {
                        auto& gp = t.slots_[p].grad;
                        for (int i = 0; i < n; ++i)
                            for (int j = 0; j < c; ++j)
                                gp[static_cast<std::size_t>(i) * c + j] +=
                                    g[static_cast<std::size_t>(i) * total + col0 + j];
                    }
                    col0 += c;
                }
            });
        }
        return id;
    }

    TensorId slice_cols(TensorId a, int c0, int c1) {
        const Tensor& ta = slots_[a];
        if (ta.shape.size() != 2 || c0 < 0 || c1 > ta.cols() || c0 >= c1)
            throw ShapeError("slice_cols: bad range");
        const int n = ta.rows(), c = ta.cols(), w = c1 - c0;
        std::vector<double> out(static_cast<std::size_t>(n) * w);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<std::size_t>(i) * w + j] = ta.data[static_cast<std::size_t>(i) * c + c0 + j];
        const TensorId id = push({n, w}, std::move(out), ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id, n, c, c0, w](Tape& t) {
                auto& ga = t.slots_[a].grad;
                const auto& g = t.slots_[id].grad;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        ga[static_cast<std::size_t>(i) * c + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
            });
        return id;
    }

    TensorId slice_rows(TensorId a, int r0, int r1) {
        const Tensor& ta = slots_[a];
        if (r0 < 0 || r1 > ta.rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
        const int c = ta.cols(), h = r1 - r0;
        std::vector<double> out(ta.data.begin() + static_cast<std::size_t>(r0) * c,
                                ta.data.begin() + static_cast<std::size_t>(r1) * c);
        std::vector<int> shape = ta.shape;
        shape[0] = h;
        const TensorId id = push(std::move(shape), std::move(out), ta.requires_grad);
        if (slots_[id].requires_grad)
            record([a, id, r0, c, h](Tape& t) {
                auto& ga = t.slots_[a].grad;
                const auto& g = t.slots_[id].grad;
                for (std::size_t i = 0; i < static_cast<std::size_t>(h) * c; ++i)
                    ga[static_cast<std::size_t>(r0) * c + i] += g[i];
            });
        return id;
    }

    // ---- gather / scatter ----

    TensorId gather_rows(TensorId m, const std::vector<int>& idx) {
        const Tensor& tm = slots_[m];
        const int c = tm.cols();
        std::vector<double> out(idx.size() * static_cast<std::size_t>(c));
        for (std::size_t t = 0; t < idx.size(); ++t)
            for (int j = 0; j < c; ++j)
                out[t * c + j] = tm.data[static_cast<std::size_t>(idx[t]) * c + j];
        std::vector<int> shape = tm.shape.size() == 2 ? std::vector<int>{static_cast<int>(idx.size()), c}
                                                      : std::vector<int>{static_cast<int>(idx.size())};
        const TensorId id = push(std::move(shape), std::move(out), tm.requires_grad);
        if (slots_[id].requires_grad)
            record([m, id, idx, c](Tape& t) {
                auto& gm = t.slots_[m].grad;
                const auto& g = t.slots_[id].grad;
                for (std::size_t k = 0; k < idx.size(); ++k)
                    for (int j = 0; j < c; ++j)
                        gm[static_cast<std::size_t>(idx[k]) * c + j] += g[k * c + j];
            });
        return id;
    }

    // out = base with rows idx replaced by rows of `rows`; idx must be unique
    TensorId scatter_rows(TensorId base, const std::vector<int>& idx, TensorId rows) {
        const Tensor& tb = slots_[base];
        const Tensor& tr = slots_[rows];
        const int c = tb.cols();
        if (tr.cols() != c || tr.rows() != static_cast<int>(idx.size()))
            throw ShapeError("scatter_rows: shape mismatch");
        std::vector<double> out = tb.data;
        for (std::size_t t = 0; t < idx.size(); ++t)
            for (int j = 0; j < c; ++j)
                out[static_cast<std::size_t>(idx[t]) * c + j] = tr.data[t * c + j];
        const TensorId id = push(tb.shape, std::move(out), tb.requires_grad || tr.requires_grad);
        if (slots_[id].requires_grad)
            record([base, rows, id, idx, c](Tape& t) {
                const auto& g = t.slots_[id].grad;
                if (t.slots_[base].requires_grad) {
                    auto& gb = t.slots_[base].grad;
                    std::vector<bool> replaced(t.slots_[base].rows(), false);
                    for (int i : idx) replaced[i] = true;
                    for (int i = 0; i < t.slots_[base].rows(); ++i) {
                        if (replaced[i]) continue;
                        for (int j = 0; j < c; ++j)
                            gb[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(i) * c + j];
                    }
                }
                if (t.slots_[rows].requires_grad) {
                    auto& gr = t.slots_[rows].grad;
                    for (std::size_t k = 0; k < idx.size(); ++k)
                        for (int j = 0; j < c; ++j)
                            gr[k * c + j] += g[static_cast<std::size_t>(idx[k]) * c + j];
                }
            });
        return id;
    }

    // out = base (rank-1) with out[idx[k]] = vals[k]
    TensorId scatter_const(TensorId base, const std::vector<int>& idx, const std::vector<double>& vals) {
        const Tensor& tb = slots_[base];
        if (tb.shape.size() != 1 || idx.size() != vals.size())
            throw ShapeError("scatter_const: shape mismatch");
        std::vector<double> out = tb.data;
        for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = vals[k];
        const TensorId id = push(tb.shape, std::move(out), tb.requires_grad);
        if (slots_[id].requires_grad)
            record([base, id, idx](Tape& t) {
                auto& gb = t.slots_[base].grad;
                const auto& g = t.slots_[id].grad;
                std::vector<bool> replaced(gb.size(), false);
                for (int i : idx) replaced[i] = true;
                for (std::size_t i = 0; i < gb.size(); ++i)
                    if (!replaced[i]) gb[i] += g[i];
            });
        return id;
    }

    // ---- graph-specific fused operations ----

    // per edge: tanh(w . [h[src] | feat] + b), averaged over the edges of each
    // destination. One hand-written op keeps the per-edge intermediates off
    // the tape.
    TensorId edge_message_mean(TensorId h, TensorId w, TensorId b, const EdgeMeanView& ev) {
        const Tensor& th = slots_[h];
        const Tensor& tw = slots_[w];
        const int d = th.cols();
        const int in = tw.cols();
        const int out_dim = tw.rows();
        const int fd = ev.feat_dim;
        if (in != d + fd) throw ShapeError("edge_message_mean: weight width must be latent + features");
        if (static_cast<int>(slots_[b].size()) != out_dim) throw ShapeError("edge_message_mean: bias mismatch");
        // per-edge messages survive as an auxiliary slot for the backward pass
        std::vector<double> msgs(static_cast<std::size_t>(ev.num_edges) * out_dim);
        std::vector<double> out(static_cast<std::size_t>(ev.num_out) * out_dim, 0.0);
        for (int e = 0; e < ev.num_edges; ++e) {
            const double* hrow = &th.data[static_cast<std::size_t>(ev.src[e]) * d];
            const double* f = &ev.feat[static_cast<std::size_t>(fd) * e];
            double* mrow = &msgs[static_cast<std::size_t>(e) * out_dim];
            for (int o = 0; o < out_dim; ++o) {
                const double* wrow = &tw.data[static_cast<std::size_t>(o) * in];
                double s = slots_[b].data[o];
                for (int k = 0; k < d; ++k) s += wrow[k] * hrow[k];
                for (int k = 0; k < fd; ++k) s += wrow[d + k] * f[k];
                mrow[o] = std::tanh(s);
            }
            double* orow = &out[static_cast<std::size_t>(ev.dst_pos[e]) * out_dim];
            for (int o = 0; o < out_dim; ++o) orow[o] += mrow[o];
        }
        for (int i = 0; i < ev.num_out; ++i) {
            const double inv = 1.0 / static_cast<double>(ev.count[i]);
            double* orow = &out[static_cast<std::size_t>(i) * out_dim];
            for (int o = 0; o < out_dim; ++o) orow[o] *= inv;
        }
        const bool rg = th.requires_grad || tw.requires_grad || slots_[b].requires_grad;
        const TensorId id = push({ev.num_out, out_dim}, std::move(out), rg);
        const TensorId aux = push({ev.num_edges, out_dim}, std::move(msgs), false);
        if (rg)
            record([h, w, b, id, aux, ev, d, fd, in, out_dim](Tape& t) {
                const auto& g = t.slots_[id].grad;
                const auto& y = t.slots_[aux].data;
                const bool need_h = t.slots_[h].requires_grad;
                const bool need_w = t.slots_[w].requires_grad;
                const bool need_b = t.slots_[b].requires_grad;
                std::vector<double> gpre(out_dim);
                for (int e = 0; e < ev.num_edges; ++e) {
                    const double inv = 1.0 / static_cast<double>(ev.count[ev.dst_pos[e]]);
                    const double* grow = &g[static_cast<std::size_t>(ev.dst_pos[e]) * out_dim];
                    const double* yrow = &y[static_cast<std::size_t>(e) * out_dim];
                    for (int o = 0; o < out_dim; ++o)
                        gpre[o] = grow[o] * inv * (1.0 - yrow[o] * yrow[o]);
                    const double* hrow = &t.slots_[h].data[static_cast<std::size_t>(ev.src[e]) * d];
                    const double* f = &ev.feat[static_cast<std::size_t>(fd) * e];
                    double* ghrow = need_h ? &t.slots_[h].grad[static_cast<std::size_t>(ev.src[e]) * d] : nullptr;
                    for (int o = 0; o < out_dim; ++o) {
                        const double go = gpre[o];
                        if (go == 0.0) continue;
                        const double* wrow = &t.slots_[w].data[static_cast<std::size_t>(o) * in];
                        if (need_h)
                            for (int k = 0; k < d; ++k) ghrow[k] += go * wrow[k];
                        if (need_w) {
                            double* gwrow = &t.slots_[w].grad[static_cast<std::size_t>(o) * in];
                            for (int k = 0; k < d; ++k) gwrow[k] += go * hrow[k];
                            for (int k = 0; k < fd; ++k) gwrow[d + k] += go * f[k];
                        }
                        if (need_b) t.slots_[b].grad[o] += go;
                    }
                }
            });
        return id;
    }

    // out[t] = sum_k val[k] * u[col[k]] - rhs[order[t]] over row order[t]
    TensorId residual_terms(TensorId u, const SparseRowsView& rows) {
        const Tensor& tu = slots_[u];
        if (static_cast<int>(tu.size()) != rows.n) throw ShapeError("residual_terms: size mismatch");
        std::vector<double> out(rows.n);
        for (int t = 0; t < rows.n; ++t) {
            const int i = rows.order[t];
            double r = -rows.rhs[i];
            for (int k = rows.row_ptr[i]; k < rows.row_ptr[i + 1]; ++k)
                r += rows.row_val[k] * tu.data[rows.row_col[k]];
            out[t] = r;
        }
        const TensorId id = push({rows.n}, std::move(out), tu.requires_grad);
        if (slots_[id].requires_grad)
            record([u, id, rows](Tape& t) {
                auto& gu = t.slots_[u].grad;
                const auto& g = t.slots_[id].grad;
                for (int r = 0; r < rows.n; ++r) {
                    const double gr = g[r];
                    if (gr == 0.0) continue;
                    const int i = rows.order[r];
                    for (int k = rows.row_ptr[i]; k < rows.row_ptr[i + 1]; ++k)
                        gu[rows.row_col[k]] += rows.row_val[k] * gr;
                }
            });
        return id;
    }

    // out = u except out[idx] = A^{-1} (rhs - Off * u); the gradient through
    // the solve is -Off^T A^{-T} applied to the incoming gradient at idx
    TensorId linear_solve_replace(TensorId u, const LinearReplaceView& s) {
        const Tensor& tu = slots_[u];
        if (tu.shape.size() != 1) throw ShapeError("linear_solve_replace: rank-1 input expected");
        std::vector<double> out = tu.data;
        if (s.m > 0) {
            std::vector<double> r(s.m);
            for (int i = 0; i < s.m; ++i) {
                double v = s.rhs[i];
                for (int k = s.off_ptr[i]; k < s.off_ptr[i + 1]; ++k) v -= s.off_val[k] * tu.data[s.off_col[k]];
                r[i] = v;
            }
            linalg::lu_solve_inplace(*s.factor, r);
            for (int i = 0; i < s.m; ++i) out[s.idx[i]] = r[i];
        }
        const TensorId id = push(tu.shape, std::move(out), tu.requires_grad);
        if (slots_[id].requires_grad)
            record([u, id, s](Tape& t) {
                auto& gu = t.slots_[u].grad;
                const auto& g = t.slots_[id].grad;
                std::vector<bool> replaced(gu.size(), false);
                for (int i = 0; i < s.m; ++i) replaced[s.idx[i]] = true;
                for (std::size_t i = 0; i < gu.size(); ++i)
                    if (!replaced[i]) gu[i] += g[i];
                if (s.m > 0) {
                    std::vector<double> w(s.m);
                    for (int i = 0; i < s.m; ++i) w[i] = g[s.idx[i]];
                    linalg::lu_solve_transposed_inplace(*s.factor, w);
                    for (int i = 0; i < s.m; ++i) {
                        const double wi = w[i];
                        if (wi == 0.0) continue;
                        for (int k = s.off_ptr[i]; k < s.off_ptr[i + 1]; ++k)
                            gu[s.off_col[k]] -= s.off_val[k] * wi;
                    }
                }
            });
        return id;
    }

    // ---- backward ----

    void backward(TensorId loss) {
        if (slots_[loss].size() != 1) throw ShapeError("backward: loss must be scalar");
        for (auto& s : slots_) {
            if (s.requires_grad)
                s.grad.assign(s.size(), 0.0);
            else
                s.grad.clear();
        }
        if (!slots_[loss].requires_grad) return;
        slots_[loss].grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
    }

private:
    std::vector<Tensor> slots_;
    std::vector<std::function<void(Tape&)>> nodes_;

    TensorId push(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::move(data);
        t.requires_grad = requires_grad;
        slots_.push_back(std::move(t));
        return static_cast<TensorId>(slots_.size() - 1);
    }

    void record(std::function<void(Tape&)> fn) { nodes_.push_back(std::move(fn)); }

    void check_same_shape(TensorId a, TensorId b, const char* what) const {
        if (slots_[a].shape != slots_[b].shape) throw ShapeError(std::string(what) + ": shape mismatch");
    }

    void accumulate(TensorId a, const std::vector<double>& g, double factor) {
        if (!slots_[a].requires_grad) return;
        auto& ga = slots_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    }

    template <class Fwd, class Back>
    TensorId zip(TensorId a, TensorId b, const char* what, Fwd fwd, Back back) {
        check_same_shape(a, b, what);
        const Tensor& ta = slots_[a];
        const Tensor& tb = slots_[b];
        std::vector<double> out(ta.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ta.data[i], tb.data[i]);
        const TensorId id = push(ta.shape, std::move(out), ta.requires_grad || tb.requires_grad);
        if (slots_[id].requires_grad)
            record([a, b, id, back](Tape& t) { back(t, a, b, id); });
        return id;
    }
};

// Central finite differences of fn around params, compared entrywise against
// the supplied analytic gradient. Returns the worst relative error
// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
inline double finite_diff_check(const std::function<double(std::span<const double>)>& fn,
                                std::span<double> params, std::span<const double> analytic,
                                double step) {
    if (params.size() != analytic.size())
        throw std::invalid_argument("finite_diff_check: gradient size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + step;
        const double fp = fn(params);
        params[i] = saved - step;
        const double fm = fn(params);
        params[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = std::fabs(analytic[i] - numeric) /
                           (std::fabs(analytic[i]) + std::fabs(numeric) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace poissonnet::ad
