#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tinyprune/data.hpp"
#include "tinyprune/nn.hpp"
#include "tinyprune/resources.hpp"

namespace tinyprune {

enum class PmuObjective { Precise, Imprecise, None };
enum class LossMode { Both, TaskOnly, ResourceOnly };

struct PruneConfig {
    bool enabled = true;
    double eta_pi = 0.05;        // pruning learning rate
    double r = 2.0 / 3.0;        // alpha ratio
    int update_interval = 20;    // training steps between width updates
    double grad_clip_hi = 0.025; // combined gradient clipped to [0, grad_clip_hi]
    double exp_scale = 4.0;      // c in pi = exp(c * v)
    int start_epoch = 0;
    bool early_terminate = false;
    PmuObjective pmu_objective = PmuObjective::Precise;
    LossMode loss_mode = LossMode::Both;
    bool mask_batch_from_train = false;  // default: held-out validation batches
};

// Width multipliers stored through the unconstrained variable v <= 0 with
// pi = exp(c*v); pi starts at 1 and can only decrease (updates subtract a
// non-negative clipped gradient).
struct WidthMultipliers {
    std::vector<double> v;  // per group; non-prunable groups stay pinned at 0
    double exp_scale = 4.0;

    static WidthMultipliers ones(int group_count, double exp_scale);
    double pi(int g) const { return std::exp(exp_scale * v[static_cast<std::size_t>(g)]); }
    std::vector<double> pis() const;
};

struct MaskResult {
    std::vector<std::uint8_t> mask;     // M_i, keep count = max(1, floor(pi*C))
    double tau = 0.0;                   // hard threshold; also s0 of the smooth mask
    std::vector<double> dmask_dtau;     // d/dtau [1/(1+tau/s_i)] = -s_i/(s_i+tau)^2
};

// Keeps the top max(1, floor(pi*C)) channels by salience (ties to the lower
// channel index). tau is the largest discarded salience, or half the minimum
// salience when nothing is discarded. Saliences are floored at 1e-12 before
// the log-domain derivative.
MaskResult compute_mask(const std::vector<double>& salience, double pi);

// dP_TSK/dpi for one group: C * sum_j mask_grad_j * w_j with convex weights
// w_j = (dM_j/ds0) / sum_k (dM_k/ds0). Returns 0 and sets *degenerate when the
// denominator vanishes.
double task_grad_wrt_pi(const std::vector<double>& mask_grads, const std::vector<double>& dmask_dtau,
                        bool* degenerate = nullptr);

struct AlphaInit {
    double alpha_res = 1.0;
    double alpha_tsk = 0.0;
    bool already_satisfied = false;  // P_RES_init == 0: nothing to prune
};

// alpha_tsk = r * P_RES_init / P_TSK_init, alpha_res = 1 (only the ratio
// matters). P_RES_init == 0 disables pruning and reports success.
AlphaInit init_alphas(double p_res_init, double p_tsk_init, double r);

// One width-multiplier SGD step over all prunable groups:
//   G_g = clip(alpha_res*res_grad + alpha_tsk*task_grad, 0, grad_clip_hi)
//   v_g <- v_g - eta_pi * G_g * c * exp(c*v_g)
// When the active objective is PMU, groups with zero resource gradient are
// gated out (focus regime). No update when res_loss_value == 0.
void width_update(WidthMultipliers& w, const MaskGroupTable& groups, const std::vector<double>& task_grads,
                  const std::vector<double>& res_grads, Objective active, double res_loss_value,
                  double alpha_res, double alpha_tsk, const PruneConfig& cfg);

struct TrainHyper {
    int epochs = 6;
    double lr = 0.05;
    std::string lr_schedule = "const";  // const | cosine
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 32;
    bool augment = false;
};

struct TelemetryRow {
    long long step = 0;
    std::vector<double> pi;             // prunable groups, ascending group id
    long long pmu_bytes = 0;            // reading used by the resource loss
    long long pmu_precise = 0;
    long long pmu_imprecise = 0;
    long long size_bytes = 0;
    long long macs = 0;
    double p_res = 0.0;
    double p_tsk = 0.0;
    std::string active = "-";
    double mask_churn_pct = 0.0;
    long long train_macs_cum = 0;
};

struct PruneRunResult {
    ComputationGraph graph;      // final architecture (materialized when early-terminated)
    ModelParams params;
    MaskSet masks;
    WidthMultipliers widths;
    std::vector<TelemetryRow> telemetry;
    std::vector<double> epoch_val_acc;
    ResourceUsage final_usage;   // objective-mode PMU reading, plus size/MACs
    long long final_pmu_precise = 0;
    bool budgets_met = false;
    bool frozen = false;
    bool materialized = false;
    long long freeze_step = -1;
    long long total_train_macs = 0;
    double final_val_acc = 0.0;
    double final_test_acc = 0.0;
    NormStats norm;
};

// Interleaved training + pruning (the full schedule): SGD training with a
// Mask/WidthUpdate pass every update_interval steps after start_epoch; width
// learning stops once every budget is satisfied; masks keep following salience
// unless early termination materializes the pruned network mid-run.
// Throws when even the minimum-width network exceeds the budget.
PruneRunResult prune_train_loop(const ComputationGraph& g, const Dataset& data, const ResourceBudget& budget,
                                const PruneConfig& pcfg, const TrainHyper& hyper, const PlannerOptions& popts,
                                std::uint64_t seed);

}  // namespace tinyprune
