#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "poissonnet/model.hpp"
#include "poissonnet/training.hpp"

namespace poissonnet::io {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kSchemaVersion = 1;

using json = nlohmann::json;

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string default_out_dir() {
    const char* env = std::getenv("POISSONNET_OUT");
    return env && *env ? env : ".";
}

// ---------------------------------------------------------------------------
// dataset files

inline json sample_to_json(const Sample& s) {
    json j;
    j["target_edge_length"] = s.target_edge_length;
    json coords = json::array();
    for (const Vec2& p : s.mesh.coords) {
        coords.push_back(p.x);
        coords.push_back(p.y);
    }
    j["coords"] = std::move(coords);
    json tris = json::array();
    for (const auto& t : s.mesh.triangles)
        for (int v : t) tris.push_back(v);
    j["triangles"] = std::move(tris);
    json be = json::array(), bn = json::array();
    for (const auto& e : s.mesh.boundary_edges) {
        be.push_back(e.a);
        be.push_back(e.b);
        bn.push_back(e.normal.x);
        bn.push_back(e.normal.y);
    }
    j["boundary_edges"] = std::move(be);
    j["boundary_normals"] = std::move(bn);
    json kinds = json::array();
    for (NodeKind k : s.mesh.node_kind) kinds.push_back(static_cast<int>(k));
    j["node_kind"] = std::move(kinds);
    j["degree"] = s.fields.degree;
    j["f_coeffs"] = s.fields.f_coeffs;
    j["g_coeffs"] = s.fields.g_coeffs;
    j["row_ptr"] = s.system.row_ptr;
    j["col_idx"] = s.system.col_idx;
    j["values"] = s.system.values;
    j["b"] = s.system.b;
    j["dirichlet_nodes"] = s.system.dirichlet_nodes;
    j["dirichlet_values"] = s.system.dirichlet_values;
    json dverts = json::array();
    for (const Vec2& p : s.domain.vertices) {
        dverts.push_back(p.x);
        dverts.push_back(p.y);
    }
    j["domain_vertices"] = std::move(dverts);
    j["domain_seed"] = s.domain.seed;
    return j;
}

inline Sample sample_from_json(const json& j) {
    Sample s;
    const auto& coords = j.at("coords");
    for (std::size_t i = 0; i + 1 < coords.size(); i += 2)
        s.mesh.coords.push_back({coords[i].get<double>(), coords[i + 1].get<double>()});
    const auto& tris = j.at("triangles");
    for (std::size_t i = 0; i + 2 < tris.size(); i += 3)
        s.mesh.triangles.push_back({tris[i].get<int>(), tris[i + 1].get<int>(), tris[i + 2].get<int>()});
    const auto& be = j.at("boundary_edges");
    const auto& bn = j.at("boundary_normals");
    for (std::size_t i = 0; 2 * i + 1 < be.size(); ++i) {
        BoundaryEdge e;
        e.a = be[2 * i].get<int>();
        e.b = be[2 * i + 1].get<int>();
        e.normal = {bn[2 * i].get<double>(), bn[2 * i + 1].get<double>()};
        s.mesh.boundary_edges.push_back(e);
    }
    for (const auto& k : j.at("node_kind"))
        s.mesh.node_kind.push_back(static_cast<NodeKind>(k.get<int>()));
    s.fields.degree = j.at("degree").get<int>();
    s.fields.f_coeffs = j.at("f_coeffs").get<std::vector<double>>();
    s.fields.g_coeffs = j.at("g_coeffs").get<std::vector<double>>();
    s.system.n = s.mesh.num_nodes();
    s.system.row_ptr = j.at("row_ptr").get<std::vector<int>>();
    s.system.col_idx = j.at("col_idx").get<std::vector<int>>();
    s.system.values = j.at("values").get<std::vector<double>>();
    s.system.b = j.at("b").get<std::vector<double>>();
    s.system.dirichlet_nodes = j.at("dirichlet_nodes").get<std::vector<int>>();
    s.system.dirichlet_values = j.at("dirichlet_values").get<std::vector<double>>();
    const auto& dv = j.at("domain_vertices");
    for (std::size_t i = 0; i + 1 < dv.size(); i += 2)
        s.domain.vertices.push_back({dv[i].get<double>(), dv[i + 1].get<double>()});
    s.domain.seed = j.at("domain_seed").get<std::uint64_t>();
    s.target_edge_length = j.at("target_edge_length").get<double>();
    s.graph = build_graph(s.mesh, s.system, s.fields);
    return s;
}

inline json dataset_spec_to_json(const DatasetSpec& spec) {
    return json{{"num_samples", spec.num_samples},
                {"node_min", spec.node_min},
                {"node_max", spec.node_max},
                {"degree", spec.degree},
                {"coeff_range", spec.coeff_range},
                {"all_dirichlet_prob", spec.all_dirichlet_prob},
                {"neumann_frac_min", spec.neumann_frac_min},
                {"neumann_frac_max", spec.neumann_frac_max},
                {"seed", spec.seed}};
}

inline void write_dataset(const std::string& path, const std::vector<Sample>& samples,
                          const DatasetSpec& spec) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "poissonnet-dataset";
    j["spec"] = dataset_spec_to_json(spec);
    json arr = json::array();
    for (const Sample& s : samples) arr.push_back(sample_to_json(s));
    j["samples"] = std::move(arr);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(1, '\t') << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<Sample> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed dataset " + path + ": " + e.what());
    }
    if (j.value("kind", "") != "poissonnet-dataset")
        throw IoError("not a dataset file: " + path);
    if (j.value("schema_version", -1) != kSchemaVersion)
        throw IoError("unsupported dataset schema in " + path);
    std::vector<Sample> out;
    for (const auto& sj : j.at("samples")) out.push_back(sample_from_json(sj));
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
    ModelParams params;
    TrainConfig train;
    int epoch = 0;
    double best_loss = 0.0;
};

inline json train_config_to_json(const TrainConfig& c) {
    return json{{"k", c.k},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"lr_final", c.lr_final},
                {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"recon_weight", c.recon_weight},
                {"seed", c.seed},
                {"train_count", c.train_count},
                {"test_count", c.test_count},
                {"divergence_threshold", c.divergence_threshold}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.k = j.value("k", c.k);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_final = j.value("lr_final", c.lr_final);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.recon_weight = j.value("recon_weight", c.recon_weight);
    c.seed = j.value("seed", c.seed);
    c.train_count = j.value("train_count", c.train_count);
    c.test_count = j.value("test_count", c.test_count);
    c.divergence_threshold = j.value("divergence_threshold", c.divergence_threshold);
    return c;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = "poissonnet-checkpoint";
    j["model"] = {{"d", ck.params.cfg.d},
                  {"encoder_hidden", ck.params.cfg.encoder_hidden},
                  {"decoder_hidden", ck.params.cfg.decoder_hidden},
                  {"edge_features", ck.params.cfg.edge_features}};
    json params = json::object();
    ck.params.for_each([&](const char* name, const Param& p) {
        params[name] = {{"shape", p.shape}, {"data", p.data}};
    });
    j["params"] = std::move(params);
    j["train_config"] = train_config_to_json(ck.train);
    j["epoch"] = ck.epoch;
    j["best_loss"] = ck.best_loss;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(1, '\t') << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint " + path + ": " + e.what());
    }
    if (j.value("kind", "") != "poissonnet-checkpoint")
        throw IoError("not a checkpoint file: " + path);
    if (j.value("schema_version", -1) != kSchemaVersion)
        throw IoError("unsupported checkpoint schema in " + path);
    Checkpoint ck;
    ModelConfig cfg;
    cfg.d = j.at("model").at("d").get<int>();
    cfg.encoder_hidden = j.at("model").at("encoder_hidden").get<int>();
    cfg.decoder_hidden = j.at("model").at("decoder_hidden").get<int>();
    cfg.edge_features = j.at("model").at("edge_features").get<int>();
    ck.params = init_params(cfg, 0);  // shapes only; data overwritten below
    const auto& pj = j.at("params");
    ck.params.for_each([&](const char* name, Param& p) {
        if (!pj.contains(name)) throw IoError(std::string("checkpoint missing parameter ") + name);
        const auto& entry = pj.at(name);
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != p.shape) throw IoError(std::string("checkpoint shape mismatch for ") + name);
        const auto data = entry.at("data").get<std::vector<double>>();
        if (data.size() != p.data.size())
            throw IoError(std::string("checkpoint size mismatch for ") + name);
        p.data = data;
    });
    ck.train = train_config_from_json(j.at("train_config"));
    ck.epoch = j.value("epoch", 0);
    ck.best_loss = j.value("best_loss", 0.0);
    return ck;
}

// ---------------------------------------------------------------------------
// delimited text outputs

// per-sample metrics plus mean/median aggregate rows; timing columns are '-'
// when timing is off so reruns are byte-identical
inline void write_metrics(const std::string& path, const std::vector<SampleMetrics>& metrics,
                          bool timing) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "# poissonnet-metrics v" << kSchemaVersion << "\n";
    out << "sample\tn\tresidual_l2\terror_l2\trel_error\tgnn_seconds\tlu_seconds\tlu_over_gnn\n";
    auto time_cols = [&](double g, double l) {
        if (!timing) return std::string("-\t-\t-");
        return format_double(g) + "\t" + format_double(l) + "\t" +
               format_double(g > 0.0 ? l / g : 0.0);
    };
    std::vector<double> res, err, rel;
    for (const auto& m : metrics) {
        out << m.index << '\t' << m.n << '\t' << format_double(m.residual_l2) << '\t'
            << format_double(m.error_l2) << '\t' << format_double(m.rel_error) << '\t'
            << time_cols(m.gnn_seconds, m.lu_seconds) << "\n";
        res.push_back(m.residual_l2);
        err.push_back(m.error_l2);
        rel.push_back(m.rel_error);
    }
    out << "mean\t-\t" << format_double(mean(res)) << '\t' << format_double(mean(err)) << '\t'
        << format_double(mean(rel)) << "\t-\t-\t-\n";
    out << "median\t-\t" << format_double(median(res)) << '\t' << format_double(median(err))
        << '\t' << format_double(median(rel)) << "\t-\t-\t-\n";
    if (!out) throw IoError("write failed: " + path);
}

inline void write_history(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "# poissonnet-history v" << kSchemaVersion << "\n";
    out << "epoch\tmean_loss\tmean_residual_l2\tlr\n";
    for (const auto& h : history)
        out << h.epoch << '\t' << format_double(h.mean_loss) << '\t'
            << format_double(h.mean_residual_l2) << '\t' << format_double(h.lr) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

// per-node field evolution (x, y, u_0..u_k, u_lu) and the residual curve
inline void write_fields(const std::string& prefix, const Sample& sample,
                         const RolloutTrace& trace, const std::vector<double>& u_lu) {
    const std::string fpath = prefix + "_fields.tsv";
    std::ofstream out(fpath);
    if (!out) throw IoError("cannot open for writing: " + fpath);
    out << "x\ty";
    for (int t = 0; t <= trace.k; ++t) out << "\tu" << t;
    out << "\tu_lu\n";
    for (int i = 0; i < trace.n; ++i) {
        out << format_double(sample.mesh.coords[i].x) << '\t'
            << format_double(sample.mesh.coords[i].y);
        for (int t = 0; t <= trace.k; ++t) out << '\t' << format_double(trace.decoded[t][i]);
        out << '\t' << format_double(u_lu[i]) << "\n";
    }
    if (!out) throw IoError("write failed: " + fpath);

    const std::string rpath = prefix + "_residuals.tsv";
    std::ofstream rout(rpath);
    if (!rout) throw IoError("cannot open for writing: " + rpath);
    rout << "iteration\tresidual_l2\n";
    for (int t = 0; t <= trace.k; ++t)
        rout << t << '\t' << format_double(std::sqrt(trace.residual_losses[t])) << "\n";
    if (!rout) throw IoError("write failed: " + rpath);
}

} // namespace poissonnet::io
