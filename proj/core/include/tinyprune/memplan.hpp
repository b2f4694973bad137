#pragma once

#include <cstdint>
#include <vector>

#include "tinyprune/graph.hpp"

namespace tinyprune {

struct PlannerOptions {
    int elem_bytes = 1;         // activation element size (1 = int8, 4 = float mode)
    bool add_inplace = false;   // Add may accumulate into one summand whose other
                                // consumers have all executed
    int node_cap = 40;          // max node count after chain contraction
    std::size_t state_cap = 1u << 22;  // DP state guard; both overflows raise PlanError
};

// Per-node activation buffer size in bytes under width multipliers `pi`
// (one entry per mask group; non-prunable groups are pinned at 1.0).
struct TensorSizeTable {
    std::vector<long long> bytes;
    long long operator[](int id) const { return bytes[static_cast<std::size_t>(id)]; }
};

TensorSizeTable tensor_sizes(const ComputationGraph& g, const ShapeTable& shapes,
                             const MaskGroupTable& groups, const std::vector<double>& pi,
                             const PlannerOptions& opts);

// Real-relaxed sizes (floor and the min-1 clamp removed); used for
// finite-difference checks of the PMU subgradient.
std::vector<double> tensor_sizes_real(const ComputationGraph& g, const ShapeTable& shapes,
                                      const MaskGroupTable& groups, const std::vector<double>& pi,
                                      const PlannerOptions& opts);

struct MemoryPlan {
    std::vector<int> order;        // a peak-optimal topological order (lex-smallest)
    long long peak_bytes = 0;      // min over topological orders of the schedule peak
    std::vector<int> bottleneck;   // node ids live at the peak step; sizes sum to peak_bytes
};

// Minimum attainable peak memory over all topological execution orders.
//
// Liveness: a node's output buffer is allocated when the node executes and
// freed once all its consumers have executed; while a node executes its input
// buffers and its output buffer are live simultaneously; the Input buffer is
// live from step 0 until its consumers finish. No in-place execution, except
// Add reuse under PlannerOptions::add_inplace.
//
// Exact dynamic program over executed-node sets; dominated states (same set,
// higher peak) are discarded. Ties between equal-peak orders go to the
// lexicographically smallest order so the bottleneck set is deterministic.
MemoryPlan precise_pmu(const ComputationGraph& g, const TensorSizeTable& sizes,
                       const PlannerOptions& opts = {});

struct MemoryPlanReal {
    std::vector<int> order;
    double peak = 0.0;
    std::vector<int> bottleneck;
};

// Same planner over real-valued buffer sizes (test/FD support).
MemoryPlanReal precise_pmu_real(const ComputationGraph& g, const std::vector<double>& sizes,
                                const PlannerOptions& opts = {});

// Per-operator under-approximation used by prior work: the maximum over
// operators of (sum of input buffer sizes + output buffer size), ignoring the
// position of the operator in the execution order. With add_inplace the Add
// operator is costed at the reused-summand basis so that the bound stays
// below precise_pmu in both modes.
long long imprecise_pmu(const ComputationGraph& g, const TensorSizeTable& sizes,
                        const PlannerOptions& opts = {});

// Test oracle: explicit enumeration of every topological order (<= 8 nodes;
// refuses larger graphs). Independent of the DP implementation.
long long brute_force_pmu(const ComputationGraph& g, const TensorSizeTable& sizes,
                          const PlannerOptions& opts = {});

// d(peak_bytes)/d(pi_g) treating floor as identity: for each group, the sum of
// base element counts (times element size) of bottleneck tensors in the group.
// Non-prunable groups report 0.
std::vector<double> pmu_subgradient(const MemoryPlan& plan, const ComputationGraph& g,
                                    const ShapeTable& shapes, const MaskGroupTable& groups,
                                    const PlannerOptions& opts = {});

// Same, for the imprecise objective: gradient of the argmax operator's
// input+output size sum (ties to the smallest node id).
std::vector<double> imprecise_pmu_subgradient(const ComputationGraph& g, const TensorSizeTable& sizes,
                                              const ShapeTable& shapes, const MaskGroupTable& groups,
                                              const PlannerOptions& opts = {});

// Node count after contracting linear chains (out-degree-1 producer feeding an
// in-degree-1 consumer); the quantity checked against PlannerOptions::node_cap.
int contracted_node_count(const ComputationGraph& g);

}  // namespace tinyprune
