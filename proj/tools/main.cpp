#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tinyprune/cli.hpp"
#include "tinyprune/error.hpp"

using namespace tinyprune;

namespace {

// shared --seed/--out/--threads overrides on top of the config file
struct Overrides {
    std::string config_path;
    long long seed = -1;
    std::string out;
    int threads = 1;
};

ExperimentConfig load_with_overrides(const Overrides& ov) {
    ExperimentConfig cfg = load_experiment_config(ov.config_path);
    if (ov.seed >= 0) cfg.seed = static_cast<std::uint64_t>(ov.seed);
    if (!ov.out.empty()) cfg.out_dir = ov.out;
    return cfg;
}

void add_overrides(CLI::App* cmd, Overrides& ov, bool with_threads = false) {
    cmd->add_option("config", ov.config_path, "experiment config file")->required();
    cmd->add_option("--seed", ov.seed, "override the config seed");
    cmd->add_option("--out", ov.out, "override the output directory");
    if (with_threads) cmd->add_option("--threads", ov.threads, "parallel runs (sweep only)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tinyprune: budgeted differentiable structured pruning for MCU-sized CNNs"};
    app.require_subcommand(1);

    // analyze
    AnalyzeArgs aargs;
    bool add_inplace = false;
    int elem_bytes = 1;
    auto* analyze = app.add_subcommand("analyze", "static resource report for a model spec");
    analyze->add_option("model", aargs.model_path, "model-spec file")->required();
    analyze->add_option("--pi", aargs.pi_path, "width-multiplier file: lines '<node> <pi>'");
    analyze->add_option("--elem-bytes", elem_bytes, "activation element size (1=int8, 4=float)");
    analyze->add_flag("--add-inplace", add_inplace, "let Add accumulate into a summand");
    analyze->add_option("--csv", aargs.csv_path, "write the per-layer table to this file");

    Overrides train_ov, prune_ov, sweep_ov;
    auto* train = app.add_subcommand("train", "train a model without pruning");
    add_overrides(train, train_ov);
    auto* prune = app.add_subcommand("prune", "interleaved training + budgeted pruning");
    add_overrides(prune, prune_ov);
    auto* sweep = app.add_subcommand("sweep", "grid sweep over prune.r and prune.eta_pi");
    add_overrides(sweep, sweep_ov, true);

    ExportArgs eargs;
    auto* exp = app.add_subcommand("export", "materialize a checkpoint into a pruned model");
    exp->add_option("checkpoint", eargs.checkpoint_path, "checkpoint file")->required();
    exp->add_option("--out", eargs.out_dir, "output directory")->required();
    exp->add_flag("--quantize", eargs.quantize, "also write int8 affine-quantized weights");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "turn run telemetry into tidy CSV tables");
    report->add_option("run_dir", report_dir, "run directory with telemetry.csv")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (analyze->parsed()) {
            aargs.planner.elem_bytes = elem_bytes;
            aargs.planner.add_inplace = add_inplace;
            return cmd_analyze(aargs);
        }
        if (train->parsed()) return cmd_train(load_with_overrides(train_ov));
        if (prune->parsed()) return cmd_prune(load_with_overrides(prune_ov));
        if (sweep->parsed()) return cmd_sweep(load_with_overrides(sweep_ov), sweep_ov.threads);
        if (exp->parsed()) return cmd_export(eargs);
        if (report->parsed()) return cmd_report(report_dir);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
