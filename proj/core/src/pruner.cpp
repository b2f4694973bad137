#include "tinyprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tinyprune/error.hpp"

namespace tinyprune {

namespace {
constexpr double kSalienceFloor = 1e-12;
}

WidthMultipliers WidthMultipliers::ones(int group_count, double exp_scale) {
    WidthMultipliers w;
    w.v.assign(static_cast<std::size_t>(group_count), 0.0);
    w.exp_scale = exp_scale;
    return w;
}

std::vector<double> WidthMultipliers::pis() const {
    std::vector<double> p(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = std::exp(exp_scale * v[i]);
    return p;
}

MaskResult compute_mask(const std::vector<double>& salience, double pi) {
    const int c = static_cast<int>(salience.size());
    if (c < 1) throw Error("compute_mask: empty salience vector");

    std::vector<double> s(salience);
    for (double& x : s) x = std::max(x, kSalienceFloor);

    const int keep = std::max(1, std::min(c, static_cast<int>(std::floor(pi * c))));

    // rank channels by (salience desc, index asc); the first `keep` survive
    std::vector<int> idx(static_cast<std::size_t>(c));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return s[static_cast<std::size_t>(a)] > s[static_cast<std::size_t>(b)];
    });

    MaskResult r;
    r.mask.assign(static_cast<std::size_t>(c), 0);
    for (int i = 0; i < keep; ++i) r.mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;

    if (keep == c) {
        double mn = s[0];
        for (double x : s) mn = std::min(mn, x);
        r.tau = 0.5 * mn;  // strictly below every salience
    } else {
        r.tau = s[static_cast<std::size_t>(idx[static_cast<std::size_t>(keep)])];  // largest discarded
    }

    r.dmask_dtau.resize(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) {
        const double si = s[static_cast<std::size_t>(i)];
        const double d = si + r.tau;
        r.dmask_dtau[static_cast<std::size_t>(i)] = -si / (d * d);
    }
    return r;
}

double task_grad_wrt_pi(const std::vector<double>& mask_grads, const std::vector<double>& dmask_dtau,
                        bool* degenerate) {
    if (degenerate) *degenerate = false;
    const std::size_t c = mask_grads.size();
    double denom = 0.0;
    for (double d : dmask_dtau) denom += d;
    if (std::abs(denom) < 1e-300) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += mask_grads[j] * (dmask_dtau[j] / denom);
    return static_cast<double>(c) * acc;
}

AlphaInit init_alphas(double p_res_init, double p_tsk_init, double r) {
    AlphaInit a;
    if (p_res_init <= 0.0) {
        a.already_satisfied = true;
        a.alpha_res = 1.0;
        a.alpha_tsk = 0.0;
        return a;
    }
    a.alpha_res = 1.0;
    a.alpha_tsk = r * p_res_init / p_tsk_init;
    return a;
}

void width_update(WidthMultipliers& w, const MaskGroupTable& groups, const std::vector<double>& task_grads,
                  const std::vector<double>& res_grads, Objective active, double res_loss_value,
                  double alpha_res, double alpha_tsk, const PruneConfig& cfg) {
    if (res_loss_value == 0.0 && cfg.loss_mode != LossMode::TaskOnly) return;
    for (int gi = 0; gi < groups.group_count(); ++gi) {
        if (!groups.prunable[static_cast<std::size_t>(gi)]) continue;
        double g = alpha_res * res_grads[static_cast<std::size_t>(gi)] +
                   alpha_tsk * task_grads[static_cast<std::size_t>(gi)];
        g = std::clamp(g, 0.0, cfg.grad_clip_hi);
        if (cfg.loss_mode != LossMode::TaskOnly && active == Objective::PMU &&
            res_grads[static_cast<std::size_t>(gi)] == 0.0)
            g = 0.0;  // focus regime: only bottleneck groups move
        if (g == 0.0) continue;
        const double dpi_dv = cfg.exp_scale * std::exp(cfg.exp_scale * w.v[static_cast<std::size_t>(gi)]);
        w.v[static_cast<std::size_t>(gi)] -= cfg.eta_pi * g * dpi_dv;
    }
}


// ---------------------------------------------------------------------------
// interleaved training loop
// ---------------------------------------------------------------------------

namespace {

struct UsageReadings {
    ResourceUsage objective;  // pmu field follows the configured objective
    long long pmu_precise = 0;
    long long pmu_imprecise = 0;
    MemoryPlan plan;          // precise plan (bottleneck source)
};

UsageReadings read_usage(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                         const std::vector<double>& pi, const PlannerOptions& popts, PmuObjective mode) {
    UsageReadings r;
    const TensorSizeTable sizes = tensor_sizes(g, shapes, groups, pi, popts);
    r.plan = precise_pmu(g, sizes, popts);
    r.pmu_precise = r.plan.peak_bytes;
    r.pmu_imprecise = imprecise_pmu(g, sizes, popts);
    r.objective.size_bytes = model_size(g, shapes, groups, pi);
    r.objective.macs = mac_count(g, shapes, groups, pi);
    r.objective.pmu_bytes = mode == PmuObjective::Imprecise ? r.pmu_imprecise : r.pmu_precise;
    r.objective.bottleneck = r.plan.bottleneck;
    return r;
}

bool budgets_satisfied(const ResourceUsage& u, const ResourceBudget& b, PmuObjective mode) {
    const bool pmu_ok = mode == PmuObjective::None || u.pmu_bytes <= b.pmu_bytes;
    return pmu_ok && u.size_bytes <= b.size_bytes && u.macs <= b.macs;
}

double lr_at(const TrainHyper& h, long long step, long long total_steps) {
    if (h.lr_schedule == "cosine")
        return h.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
    return h.lr;
}

std::vector<int> split_labels(const Dataset& data, const std::vector<int>& idx) {
    std::vector<int> l;
    l.reserve(idx.size());
    for (int i : idx) l.push_back(data.labels[static_cast<std::size_t>(i)]);
    return l;
}

}  // namespace

PruneRunResult prune_train_loop(const ComputationGraph& graph_in, const Dataset& data,
                                const ResourceBudget& budget, const PruneConfig& pcfg, const TrainHyper& hyper,
                                const PlannerOptions& popts, std::uint64_t seed) {
    if (budget.pmu_bytes <= 0 || budget.size_bytes <= 0 || budget.macs <= 0)
        throw Error("budgets must be strictly positive");

    PruneRunResult run;
    run.graph = graph_in;
    const ComputationGraph* g = &run.graph;
    ShapeTable shapes = infer_shapes(*g);
    MaskGroupTable groups = compute_mask_groups(*g);
    const std::vector<int> pi_columns = groups.prunable_groups();  // telemetry schema is fixed up front

    run.norm = compute_norm_stats(data);
    Rng init_rng = derive_rng(seed, RngStream::WeightInit);
    run.params = init_params(*g, shapes, init_rng);
    ModelParams momenta = zeros_like(run.params);
    run.masks = MaskSet::all_ones(groups);
    run.widths = WidthMultipliers::ones(groups.group_count(), pcfg.exp_scale);
    Rng scal_rng = derive_rng(seed, RngStream::Scalarization);

    // Budgets must be attainable at minimum width (one channel per group).
    if (pcfg.enabled) {
        std::vector<double> pi_min(static_cast<std::size_t>(groups.group_count()), 1e-12);
        const UsageReadings min_u = read_usage(*g, shapes, groups, pi_min, popts, pcfg.pmu_objective);
        if (!budgets_satisfied(min_u.objective, budget, pcfg.pmu_objective)) {
            std::string binding;
            if (pcfg.pmu_objective != PmuObjective::None && min_u.objective.pmu_bytes > budget.pmu_bytes)
                binding += " pmu(" + std::to_string(min_u.objective.pmu_bytes) + ">" +
                           std::to_string(budget.pmu_bytes) + ")";
            if (min_u.objective.size_bytes > budget.size_bytes)
                binding += " size(" + std::to_string(min_u.objective.size_bytes) + ">" +
                           std::to_string(budget.size_bytes) + ")";
            if (min_u.objective.macs > budget.macs)
                binding += " macs(" + std::to_string(min_u.objective.macs) + ">" + std::to_string(budget.macs) + ")";
            throw Error("budget unreachable: minimum-width network still exceeds the budget on" + binding);
        }
    }

    const long long steps_per_epoch =
        (static_cast<long long>(data.train_idx.size()) + hyper.batch_size - 1) / hyper.batch_size;
    const long long total_steps = steps_per_epoch * hyper.epochs;

    bool alphas_ready = false;
    double alpha_res = 1.0, alpha_tsk = 0.0;
    bool frozen = !pcfg.enabled;
    MaskSet prev_masks = run.masks;
    long long val_cursor = 0;
    long long base_macs_per_sample = mac_count(*g, shapes, groups, run.widths.pis());
    const double churn_denom = static_cast<double>(run.masks.total_channels());

    auto group_saliences = [&]() {
        std::vector<std::vector<double>> s(static_cast<std::size_t>(groups.group_count()));
        for (int gi = 0; gi < groups.group_count(); ++gi)
            if (groups.prunable[static_cast<std::size_t>(gi)])
                s[static_cast<std::size_t>(gi)] = group_salience(*g, groups, run.params, gi);
        return s;
    };

    auto refresh_masks = [&](const std::vector<std::vector<double>>& sal) {
        for (int gi = 0; gi < groups.group_count(); ++gi) {
            if (!groups.prunable[static_cast<std::size_t>(gi)]) continue;
            run.masks.by_group[static_cast<std::size_t>(gi)] =
                compute_mask(sal[static_cast<std::size_t>(gi)], run.widths.pi(gi)).mask;
        }
    };

    auto mask_batch_indices = [&]() {
        const std::vector<int>& pool = pcfg.mask_batch_from_train ? data.train_idx : data.val_idx;
        std::vector<int> idx;
        for (int i = 0; i < hyper.batch_size; ++i) {
            idx.push_back(pool[static_cast<std::size_t>(val_cursor % static_cast<long long>(pool.size()))]);
            ++val_cursor;
        }
        return idx;
    };

    long long global_step = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const std::vector<int> order = epoch_order(data.train_idx, seed, epoch);
        for (long long b = 0; b < steps_per_epoch; ++b) {
            const long long lo = b * hyper.batch_size;
            const long long hi = std::min<long long>(lo + hyper.batch_size, static_cast<long long>(order.size()));
            std::vector<int> batch_idx(order.begin() + lo, order.begin() + hi);

            Tensor batch;
            if (hyper.augment) {
                std::vector<std::uint8_t> raw(batch_idx.size() * static_cast<std::size_t>(data.sample_bytes()));
                for (std::size_t i = 0; i < batch_idx.size(); ++i)
                    std::copy_n(&data.images[static_cast<std::size_t>(batch_idx[i]) *
                                             static_cast<std::size_t>(data.sample_bytes())],
                                static_cast<std::size_t>(data.sample_bytes()),
                                &raw[i * static_cast<std::size_t>(data.sample_bytes())]);
                augment_batch(raw, static_cast<int>(batch_idx.size()), data.c, data.h, data.w, batch_idx, seed,
                              epoch);
                batch = make_batch_raw(raw, static_cast<int>(batch_idx.size()), data.c, data.h, data.w, run.norm);
            } else {
                batch = make_batch(data, batch_idx, run.norm);
            }
            const std::vector<int> labels = split_labels(data, batch_idx);

            const ForwardCache cache = forward(*g, shapes, groups, run.params, run.masks, batch);
            const Gradients grads = backward(*g, shapes, groups, run.params, run.masks, cache, labels);
            sgd_step(run.params, grads.params, momenta, lr_at(hyper, global_step, total_steps), hyper.momentum,
                     hyper.weight_decay);
            ++global_step;
            run.total_train_macs += base_macs_per_sample * static_cast<long long>(batch_idx.size());

            // ----- Mask + WidthUpdate cadence -----
            if (!(pcfg.enabled && epoch >= pcfg.start_epoch && global_step % pcfg.update_interval == 0)) continue;

            TelemetryRow row;
            row.step = global_step;

            if (!run.materialized) {
                if (!frozen) {
                    // Mask at the current pi, with smooth-mask derivatives.
                    const auto sal = group_saliences();
                    std::vector<MaskResult> mres(static_cast<std::size_t>(groups.group_count()));
                    for (int gi = 0; gi < groups.group_count(); ++gi)
                        if (groups.prunable[static_cast<std::size_t>(gi)]) {
                            mres[static_cast<std::size_t>(gi)] =
                                compute_mask(sal[static_cast<std::size_t>(gi)], run.widths.pi(gi));
                            run.masks.by_group[static_cast<std::size_t>(gi)] =
                                mres[static_cast<std::size_t>(gi)].mask;
                        }

                    const std::vector<double> pi = run.widths.pis();
                    const UsageReadings u = read_usage(*g, shapes, groups, pi, popts, pcfg.pmu_objective);

                    if (budgets_satisfied(u.objective, budget, pcfg.pmu_objective)) {
                        frozen = true;
                        run.freeze_step = global_step;
                    } else {
                        // Task-loss gradients through the masks (held-out batch, eval mode).
                        double p_tsk = 0.0;
                        std::vector<double> task_grads(static_cast<std::size_t>(groups.group_count()), 0.0);
                        if (pcfg.loss_mode != LossMode::ResourceOnly) {
                            const std::vector<int> midx = mask_batch_indices();
                            const Tensor mb = make_batch(data, midx, run.norm);
                            const std::vector<int> mlabels = split_labels(data, midx);
                            const ForwardCache mcache = eval_forward(*g, shapes, groups, run.params, run.masks, mb);
                            const Gradients mg = backward(*g, shapes, groups, run.params, run.masks, mcache, mlabels);
                            p_tsk = mg.loss;
                            for (int gi = 0; gi < groups.group_count(); ++gi) {
                                if (!groups.prunable[static_cast<std::size_t>(gi)]) continue;
                                task_grads[static_cast<std::size_t>(gi)] =
                                    task_grad_wrt_pi(mg.mask_grads[static_cast<std::size_t>(gi)],
                                                     mres[static_cast<std::size_t>(gi)].dmask_dtau);
                            }
                        }

                        // Resource loss (random scalarization) and its gradient.
                        const bool include_pmu = pcfg.pmu_objective != PmuObjective::None;
                        double p_res = 0.0;
                        Objective active = Objective::Size;
                        std::vector<double> res_grads(static_cast<std::size_t>(groups.group_count()), 0.0);
                        if (pcfg.loss_mode != LossMode::TaskOnly) {
                            const Scalarization scal = sample_scalarization(scal_rng);
                            const ResourceLoss rl = resource_loss(u.objective, budget, scal, include_pmu);
                            p_res = rl.value;
                            active = rl.active;
                            if (rl.value > 0.0) {
                                std::vector<double> gvec;
                                double bval = 1.0;
                                switch (rl.active) {
                                    case Objective::PMU:
                                        gvec = pcfg.pmu_objective == PmuObjective::Imprecise
                                                   ? imprecise_pmu_subgradient(
                                                         *g, tensor_sizes(*g, shapes, groups, pi, popts), shapes,
                                                         groups, popts)
                                                   : pmu_subgradient(u.plan, *g, shapes, groups, popts);
                                        bval = static_cast<double>(budget.pmu_bytes);
                                        break;
                                    case Objective::Size:
                                        gvec = model_size_grad(*g, shapes, groups, pi);
                                        bval = static_cast<double>(budget.size_bytes);
                                        break;
                                    case Objective::MACs:
                                        gvec = mac_count_grad(*g, shapes, groups, pi);
                                        bval = static_cast<double>(budget.macs);
                                        break;
                                }
                                for (double& x : gvec) x /= bval;
                                res_grads = std::move(gvec);
                            }
                        }

                        if (!alphas_ready) {
                            // lambda-free readings anchor the trade-off once.
                            const ResourceLoss init_rl =
                                resource_loss(u.objective, budget, Scalarization{}, include_pmu);
                            double p_tsk_init = p_tsk > 0.0 ? p_tsk : 1.0;
                            const AlphaInit a = init_alphas(init_rl.value, p_tsk_init, pcfg.r);
                            alpha_res = a.alpha_res;
                            alpha_tsk = a.alpha_tsk;
                            if (pcfg.loss_mode == LossMode::TaskOnly) {
                                alpha_res = 0.0;
                                alpha_tsk = 1.0;
                            } else if (pcfg.loss_mode == LossMode::ResourceOnly) {
                                alpha_tsk = 0.0;
                            }
                            alphas_ready = true;
                        }

                        const double drive = pcfg.loss_mode == LossMode::TaskOnly ? 1.0 : p_res;
                        width_update(run.widths, groups, task_grads, res_grads, active, drive, alpha_res,
                                     alpha_tsk, pcfg);
                        row.p_res = p_res;
                        row.p_tsk = p_tsk;
                        row.active = pcfg.loss_mode == LossMode::TaskOnly ? "-" : objective_name(active);

                        // Refresh masks at the updated pi (Mask without derivatives).
                        refresh_masks(sal);
                        if (budgets_satisfied(
                                read_usage(*g, shapes, groups, run.widths.pis(), popts, pcfg.pmu_objective)
                                    .objective,
                                budget, pcfg.pmu_objective)) {
                            frozen = true;
                            run.freeze_step = global_step;
                        }
                    }
                } else {
                    // pi frozen; masks keep tracking salience until termination.
                    refresh_masks(group_saliences());
                }

                if (frozen && pcfg.early_terminate) {
                    // Freeze masks and switch training to the physically pruned net.
                    MaterializedModel m = materialize_pruned(*g, shapes, groups, run.params, run.masks);
                    ModelParams mom = materialize_pruned(*g, shapes, groups, momenta, run.masks).params;
                    run.graph = std::move(m.graph);
                    run.params = std::move(m.params);
                    momenta = std::move(mom);
                    g = &run.graph;
                    shapes = infer_shapes(*g);
                    groups = compute_mask_groups(*g);
                    run.masks = MaskSet::all_ones(groups);
                    prev_masks = run.masks;
                    run.materialized = true;
                    base_macs_per_sample =
                        mac_count(*g, shapes, groups,
                                  std::vector<double>(static_cast<std::size_t>(groups.group_count()), 1.0));
                }
            }

            // Telemetry row reflects the post-update state.
            const std::vector<double> pi_now =
                run.materialized ? std::vector<double>(static_cast<std::size_t>(groups.group_count()), 1.0)
                                 : run.widths.pis();
            const UsageReadings u2 = read_usage(*g, shapes, groups, pi_now, popts, pcfg.pmu_objective);
            for (int gi : pi_columns) row.pi.push_back(run.widths.pi(gi));
            row.pmu_bytes = u2.objective.pmu_bytes;
            row.pmu_precise = u2.pmu_precise;
            row.pmu_imprecise = u2.pmu_imprecise;
            row.size_bytes = u2.objective.size_bytes;
            row.macs = u2.objective.macs;
            row.mask_churn_pct = run.masks.by_group.size() == prev_masks.by_group.size()
                                     ? 100.0 * run.masks.churn(prev_masks) / churn_denom
                                     : 0.0;
            row.train_macs_cum = run.total_train_macs;
            prev_masks = run.masks;
            run.telemetry.push_back(std::move(row));
        }

        run.epoch_val_acc.push_back(evaluate_accuracy(*g, shapes, groups, run.params, run.masks,
                                                      make_batch(data, data.val_idx, run.norm),
                                                      split_labels(data, data.val_idx), hyper.batch_size));
    }

    run.frozen = frozen;
    const std::vector<double> final_pi =
        run.materialized ? std::vector<double>(static_cast<std::size_t>(groups.group_count()), 1.0)
                         : run.widths.pis();
    const UsageReadings fu = read_usage(*g, shapes, groups, final_pi, popts, pcfg.pmu_objective);
    run.final_usage = fu.objective;
    run.final_pmu_precise = fu.pmu_precise;
    run.budgets_met = !pcfg.enabled || budgets_satisfied(fu.objective, budget, pcfg.pmu_objective);
    run.final_val_acc = run.epoch_val_acc.empty() ? 0.0 : run.epoch_val_acc.back();

    if (!data.test_idx.empty())
        run.final_test_acc = evaluate_accuracy(*g, shapes, groups, run.params, run.masks,
                                               make_batch(data, data.test_idx, run.norm),
                                               split_labels(data, data.test_idx), hyper.batch_size);
    return run;
}

}  // namespace tinyprune
