// Command-line front end: dataset generation, training, solving and
// evaluation of the graph-network Poisson solver.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poissonnet/baseline.hpp"
#include "poissonnet/io.hpp"
#include "poissonnet/model.hpp"
#include "poissonnet/training.hpp"

namespace {

using namespace poissonnet;

constexpr int kExitBadFlags = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

int cmd_generate(int num, int num_test, std::uint64_t seed, int nodes_min, int nodes_max,
                 int degree, double coeff_range, std::string out) {
    if (out.empty()) out = io::default_out_dir() + "/dataset";
    DatasetSpec spec;
    spec.num_samples = num;
    spec.node_min = nodes_min;
    spec.node_max = nodes_max;
    spec.degree = degree;
    spec.coeff_range = coeff_range;
    spec.seed = seed;
    const std::vector<Sample> train_set = sample_dataset(spec);

    DatasetSpec test_spec = spec;
    test_spec.num_samples = num_test;
    test_spec.seed = Rng::mix(seed, 0x7e57u);
    const std::vector<Sample> test_set = sample_dataset(test_spec);

    io::write_dataset(out + "_train.json", train_set, spec);
    io::write_dataset(out + "_test.json", test_set, test_spec);

    std::map<int, int> histogram;  // node count binned by 50
    double diameter_sum = 0.0;
    for (const Sample& s : train_set) {
        histogram[s.mesh.num_nodes() / 50 * 50]++;
        diameter_sum += graph_diameter(s.mesh);
    }
    std::printf("wrote %zu train + %zu test samples to %s_{train,test}.json\n", train_set.size(),
                test_set.size(), out.c_str());
    for (const auto& [bin, count] : histogram)
        std::printf("  nodes %4d-%4d: %d\n", bin, bin + 49, count);
    if (!train_set.empty())
        std::printf("mean graph diameter: %.2f\n", diameter_sum / static_cast<double>(train_set.size()));
    return 0;
}

int cmd_train(const std::string& data, std::string out, std::string history_path,
              const std::string& resume, const TrainConfig& cfg) {
    if (out.empty()) out = io::default_out_dir() + "/checkpoint.json";
    if (history_path.empty()) history_path = out + ".history.tsv";
    const std::vector<Sample> dataset = io::read_dataset(data);

    ModelParams initial = resume.empty() ? init_params(ModelConfig{}, cfg.seed)
                                         : io::read_checkpoint(resume).params;
    TrainResult result = cfg.epochs > 0 && !dataset.empty()
                             ? train_from(dataset, cfg, std::move(initial))
                             : TrainResult{std::move(initial), {}, -1, false};

    io::Checkpoint ck;
    ck.params = result.params;
    ck.train = cfg;
    ck.epoch = result.best_epoch;
    ck.best_loss = result.history.empty()
                       ? 0.0
                       : result.history[std::max(0, result.best_epoch)].mean_loss;
    io::write_checkpoint(out, ck);
    io::write_history(history_path, result.history);
    if (result.diverged) {
        std::fprintf(stderr, "training diverged; best checkpoint restored to %s\n", out.c_str());
        return kExitNumeric;
    }
    std::printf("checkpoint: %s (best epoch %d)\nhistory: %s\n", out.c_str(), result.best_epoch,
                history_path.c_str());
    return 0;
}

int cmd_solve(const std::string& checkpoint, const std::string& data, int sample_index, int k,
              std::string out) {
    if (out.empty()) out = io::default_out_dir() + "/solution";
    const io::Checkpoint ck = io::read_checkpoint(checkpoint);
    const std::vector<Sample> dataset = io::read_dataset(data);
    if (sample_index < 0 || sample_index >= static_cast<int>(dataset.size()))
        throw io::IoError("sample index out of range: " + std::to_string(sample_index));
    const Sample& sample = dataset[sample_index];
    const int steps = k > 0 ? k : ck.train.k;
    const RolloutTrace trace = rollout(sample.graph, ck.params, steps);
    const std::vector<double> u_lu = baseline::solve_direct(sample.system);
    io::write_fields(out, sample, trace, u_lu);
    std::printf("fields: %s_fields.tsv\nresiduals: %s_residuals.tsv\n", out.c_str(), out.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, int k, std::string out,
             bool no_timing) {
    if (out.empty()) out = io::default_out_dir() + "/metrics.tsv";
    const io::Checkpoint ck = io::read_checkpoint(checkpoint);
    const std::vector<Sample> dataset = io::read_dataset(data);
    const int steps = k > 0 ? k : ck.train.k;
    const auto metrics = evaluate(ck.params, dataset,
                                  [](const LinearSystem& sys) { return baseline::solve_direct(sys); },
                                  steps);
    io::write_metrics(out, metrics, !no_timing);
    std::printf("metrics: %s (%zu samples)\n", out.c_str(), metrics.size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"unsupervised graph-network solver for mixed-boundary Poisson problems"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "sample random problems and write train/test files");
    int num = 10, num_test = 0, nodes_min = 300, nodes_max = 600, degree = 2;
    std::uint64_t seed = 0;
    double coeff_range = 1.0;
    std::string out;
    gen->add_option("--num", num, "training samples");
    gen->add_option("--num-test", num_test, "held-out samples");
    gen->add_option("--seed", seed, "rng seed");
    gen->add_option("--nodes-min", nodes_min, "minimum mesh nodes");
    gen->add_option("--nodes-max", nodes_max, "maximum mesh nodes");
    gen->add_option("--degree", degree, "polynomial degree of f and g");
    gen->add_option("--coeff-range", coeff_range, "uniform coefficient range");
    gen->add_option("--out", out, "output prefix (default $POISSONNET_OUT/dataset)");

    // train
    auto* tr = app.add_subcommand("train", "minimize the cumulative residual loss");
    std::string data, ckpt_out, history, resume;
    TrainConfig cfg;
    tr->add_option("--data", data, "training dataset file")->required();
    tr->add_option("--out", ckpt_out, "checkpoint path (default $POISSONNET_OUT/checkpoint.json)");
    tr->add_option("--history", history, "history path (default <out>.history.tsv)");
    tr->add_option("--checkpoint", resume, "resume from checkpoint");
    tr->add_option("--k", cfg.k, "rollout iterations");
    tr->add_option("--epochs", cfg.epochs, "training epochs");
    tr->add_option("--batch", cfg.batch_size, "batch size");
    tr->add_option("--lr", cfg.learning_rate, "Adam learning rate");
    tr->add_option("--lr-final", cfg.lr_final, "cosine-decay target rate (<0: constant)");
    tr->add_option("--lr-hold", cfg.lr_hold_fraction, "fraction of epochs at the peak rate");
    tr->add_option("--recon-weight", cfg.recon_weight, "reconstruction loss weight");
    tr->add_option("--grad-clip", cfg.grad_clip_norm, "gradient norm clip (0 = off)");
    tr->add_option("--avg-tail", cfg.average_tail, "average parameters over the last fraction of epochs");
    tr->add_option("--seed", cfg.seed, "rng seed");
    tr->add_option("--threads", cfg.threads, "worker threads (0 = auto)");

    // solve
    auto* so = app.add_subcommand("solve", "export the per-iteration fields of one sample");
    std::string so_ckpt, so_data, so_out;
    int so_sample = 0, so_k = 0;
    so->add_option("--checkpoint", so_ckpt, "checkpoint path")->required();
    so->add_option("--data", so_data, "dataset file")->required();
    so->add_option("--sample", so_sample, "sample index");
    so->add_option("--k", so_k, "rollout iterations (default: checkpoint)");
    so->add_option("--out", so_out, "output prefix (default $POISSONNET_OUT/solution)");

    // eval
    auto* ev = app.add_subcommand("eval", "metrics against the direct LU reference");
    std::string ev_ckpt, ev_data, ev_out;
    int ev_k = 0;
    bool no_timing = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset file")->required();
    ev->add_option("--k", ev_k, "rollout iterations (default: checkpoint)");
    ev->add_option("--out", ev_out, "metrics path (default $POISSONNET_OUT/metrics.tsv)");
    ev->add_flag("--no-timing", no_timing, "omit wall-clock columns (reproducible output)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitBadFlags;
    }

    try {
        if (gen->parsed())
            return cmd_generate(num, num_test, seed, nodes_min, nodes_max, degree, coeff_range, out);
        if (tr->parsed()) return cmd_train(data, ckpt_out, history, resume, cfg);
        if (so->parsed()) return cmd_solve(so_ckpt, so_data, so_sample, so_k, so_out);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_k, ev_out, no_timing);
    } catch (const io::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return kExitBadFlags;
}
