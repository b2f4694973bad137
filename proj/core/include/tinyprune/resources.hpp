#pragma once

#include <string>
#include <vector>

#include "tinyprune/graph.hpp"
#include "tinyprune/memplan.hpp"
#include "tinyprune/rng.hpp"

namespace tinyprune {

struct ResourceBudget {
    long long pmu_bytes = 0;
    long long size_bytes = 0;
    long long macs = 0;
};

struct ResourceUsage {
    long long pmu_bytes = 0;
    long long size_bytes = 0;
    long long macs = 0;
    std::vector<int> bottleneck;
};

enum class Objective { PMU, Size, MACs };

const char* objective_name(Objective o);

// Random scalarization coefficients, lambda_i = 1 / Uniform(0,1), drawn in the
// order PMU, Size, MACs. Only used to pick the objective inside the max; they
// never scale gradients.
struct Scalarization {
    double pmu = 1.0;
    double size = 1.0;
    double macs = 1.0;
};

Scalarization sample_scalarization(Rng& rng);

// Model size in bytes at 1 byte per parameter:
//   Conv2D:     kh*kw*Cin_eff*Cout_eff + Cout_eff (+ 2*Cout_eff when bn)
//   Depthwise:  kh*kw*C_eff            (+ 2*C_eff when bn)
//   FC:         In_eff*Out_eff + Out_eff
// Effective counts use floor(pi*C_base) clamped to >= 1.
long long model_size(const ComputationGraph& g, const ShapeTable& shapes,
                     const MaskGroupTable& groups, const std::vector<double>& pi);

// Multiply-accumulate count; parameter-free ops contribute 0.
long long mac_count(const ComputationGraph& g, const ShapeTable& shapes,
                    const MaskGroupTable& groups, const std::vector<double>& pi);

// Gradients of the real-relaxed formulas (floor and min-1 clamp removed)
// w.r.t. each group's width multiplier; one entry per group, 0 for
// non-prunable groups.
std::vector<double> model_size_grad(const ComputationGraph& g, const ShapeTable& shapes,
                                    const MaskGroupTable& groups, const std::vector<double>& pi);
std::vector<double> mac_count_grad(const ComputationGraph& g, const ShapeTable& shapes,
                                   const MaskGroupTable& groups, const std::vector<double>& pi);

// Real-relaxed usage values matching the gradients above (used by tests).
double model_size_real(const ComputationGraph& g, const ShapeTable& shapes,
                       const MaskGroupTable& groups, const std::vector<double>& pi);
double mac_count_real(const ComputationGraph& g, const ShapeTable& shapes,
                      const MaskGroupTable& groups, const std::vector<double>& pi);

struct ResourceLoss {
    double value = 0.0;     // max(0, max_i lambda_i * usage_i / b_i - 1)
    Objective active = Objective::PMU;  // argmax; ties break PMU > Size > MACs
};

// Eq.-style budget-scaled loss. The scalarization can select an objective that
// is already satisfied (lambda_i > 1); clipping engages only once the max
// itself drops to <= 1. `include_pmu=false` drops the PMU term from the max
// (the no-PMU-objective ablation).
ResourceLoss resource_loss(const ResourceUsage& usage, const ResourceBudget& budget,
                           const Scalarization& scal, bool include_pmu = true);

// Canonical usage measurement: precise PMU plus size and MAC models.
ResourceUsage measure_usage(const ComputationGraph& g, const ShapeTable& shapes,
                            const MaskGroupTable& groups, const std::vector<double>& pi,
                            const PlannerOptions& opts = {});

}  // namespace tinyprune
