#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinyprune/data.hpp"
#include "tinyprune/memplan.hpp"
#include "tinyprune/pruner.hpp"
#include "tinyprune/resources.hpp"

namespace tinyprune {

// Experiment configuration: line-oriented `key = value` text, `#` comments.
// Unknown keys are rejected. Budgets accept unit suffixes (KB = 1000,
// KiB = 1024, M = 10^6). The full key reference lives in README.md.
struct ExperimentConfig {
    std::string model_path;
    std::string dataset;  // synthetic | cifar10 | idx
    std::string data_dir;
    std::string idx_images, idx_labels;
    int val_size = 5000;
    int test_size = 0;
    SynthSpec synth;
    ResourceBudget budget;
    PruneConfig prune;
    TrainHyper train;
    PlannerOptions planner;
    std::uint64_t seed = 1;
    std::string out_dir = "run";
    std::vector<double> sweep_r;
    std::vector<double> sweep_eta;
};

// Integer with an optional unit suffix: "131072", "131 KB", "128KiB", "2M".
long long parse_bytes(const std::string& text);

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& base_dir);
ExperimentConfig load_experiment_config(const std::string& path);

// Resolves the dataset directory: the TINYPRUNE_DATA_ROOT environment
// variable overrides config.data_dir when set.
std::string resolve_data_dir(const ExperimentConfig& cfg);

Dataset load_dataset(const ExperimentConfig& cfg);

}  // namespace tinyprune
