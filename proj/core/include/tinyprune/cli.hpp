#pragma once

#include <string>
#include <vector>

#include "tinyprune/config.hpp"

namespace tinyprune {

// Command entry points shared by the CLI binary and the test suites. Each
// returns a process exit code: 0 success (for prune: budgets met), 1 budgets
// not met / run-level failure, 2 invalid input. Artifacts are deterministic
// given (config, seed); wall-clock timestamps go only to <out>/run.log.

struct AnalyzeArgs {
    std::string model_path;
    std::string pi_path;       // optional: lines "<node_name> <pi>"
    PlannerOptions planner;
    std::string csv_path;      // optional: write the per-layer table here
    bool quiet = false;
};

struct AnalyzeResult {
    long long size_bytes = 0;
    long long macs = 0;
    long long pmu_precise = 0;
    long long pmu_imprecise = 0;
    std::vector<int> order;
    std::vector<int> bottleneck;
};

int cmd_analyze(const AnalyzeArgs& args, AnalyzeResult* out = nullptr);

struct RunArtifacts {
    std::string run_dir;
    bool budgets_met = false;
    double final_val_acc = 0.0;
    long long total_train_macs = 0;
    long long freeze_step = -1;
    long long final_pmu_precise = 0;
    ResourceUsage final_usage;
};

int cmd_train(const ExperimentConfig& cfg, RunArtifacts* out = nullptr);
int cmd_prune(const ExperimentConfig& cfg, RunArtifacts* out = nullptr);

struct ExportArgs {
    std::string checkpoint_path;
    std::string out_dir;
    bool quantize = false;
};

int cmd_export(const ExportArgs& args);

int cmd_report(const std::string& run_dir);

int cmd_sweep(const ExperimentConfig& cfg, int threads = 1);

// Telemetry schema emitted for prune/train runs; cmd_report validates it.
extern const char* kTelemetryHeaderPrefix;  // "# tinyprune telemetry v1"

}  // namespace tinyprune
