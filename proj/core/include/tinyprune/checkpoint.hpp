#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tinyprune/nn.hpp"

namespace tinyprune {

// Everything needed to reproduce or export a run. Round-trips bit-exactly.
struct Checkpoint {
    std::uint64_t spec_hash = 0;  // FNV-1a of the model-spec text
    int epoch = 0;
    long long step = 0;
    bool frozen = false;            // width multipliers no longer updated
    bool materialized = false;      // training switched to the pruned network
    std::vector<double> v;          // unconstrained width variables (per group)
    MaskSet masks;
    ModelParams params;
    ModelParams momenta;
    std::vector<float> norm_mean, norm_std;      // per-channel input normalization
    std::map<std::string, std::string> rng_states;
    std::string model_spec;         // the spec text the params belong to
};

std::uint64_t fnv1a(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tinyprune
