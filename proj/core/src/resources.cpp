#include "tinyprune/resources.hpp"

#include <cmath>

namespace tinyprune {

const char* objective_name(Objective o) {
    switch (o) {
        case Objective::PMU: return "pmu";
        case Objective::Size: return "size";
        case Objective::MACs: return "macs";
    }
    return "?";
}

Scalarization sample_scalarization(Rng& rng) {
    Scalarization s;
    s.pmu = 1.0 / rng.uniform_open();
    s.size = 1.0 / rng.uniform_open();
    s.macs = 1.0 / rng.uniform_open();
    return s;
}

namespace {

// Effective (integer) and relaxed (real) channel counts of a node's output.
int eff_channels(const ShapeTable& shapes, const MaskGroupTable& groups, const std::vector<double>& pi, int id) {
    const int gi = groups.group_of[static_cast<std::size_t>(id)];
    if (!groups.prunable[static_cast<std::size_t>(gi)]) return shapes[id].c;
    return ShapeTable::effective_channels(shapes[id].c, pi[static_cast<std::size_t>(gi)]);
}

double relaxed_channels(const ShapeTable& shapes, const MaskGroupTable& groups, const std::vector<double>& pi,
                        int id) {
    const int gi = groups.group_of[static_cast<std::size_t>(id)];
    const double frac = groups.prunable[static_cast<std::size_t>(gi)] ? pi[static_cast<std::size_t>(gi)] : 1.0;
    return frac * shapes[id].c;
}

// Walks every parametric node once; Acc is called with the node's term pieces
// so the integer value, the relaxed value and the gradient share one formula.
template <typename Acc>
void for_each_param_node(const ComputationGraph& g, const ShapeTable& shapes, Acc&& acc) {
    for (int id = 0; id < g.size(); ++id) {
        const Node& n = g.node(id);
        if (n.kind == OpKind::Conv2D) {
            const int in = n.preds[0];
            const double k = static_cast<double>(n.attrs.kernel_h) * n.attrs.kernel_w;
            const double extra = 1.0 + (n.attrs.has_bn ? 2.0 : 0.0);  // bias (+ gamma, beta)
            const double hw_out = static_cast<double>(shapes[id].h) * shapes[id].w;
            acc(id, in, id, /*pair_coef=*/k, /*out_coef=*/extra, hw_out, /*in_spatial=*/1.0);
        } else if (n.kind == OpKind::DepthwiseConv2D) {
            const double k = static_cast<double>(n.attrs.kernel_h) * n.attrs.kernel_w;
            const double extra = n.attrs.has_bn ? 2.0 : 0.0;
            const double hw_out = static_cast<double>(shapes[id].h) * shapes[id].w;
            acc(id, -1, id, k, extra, hw_out, 1.0);
        } else if (n.kind == OpKind::FullyConnected) {
            const int in = n.preds[0];
            const double in_spatial = static_cast<double>(shapes[in].h) * shapes[in].w;
            acc(id, in, id, 1.0, 1.0, 1.0, in_spatial);
        }
    }
}

}  // namespace

// Term shape per parametric node:
//   params = pair_coef * x_in * in_spatial * x_out + out_coef * x_out
//   macs   = pair_coef * x_in * in_spatial * x_out * hw_out
// where depthwise passes in = -1 and collapses to pair_coef * x + out_coef * x.

long long model_size(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                     const std::vector<double>& pi) {
    long long total = 0;
    for_each_param_node(g, shapes,
                        [&](int id, int in, int out, double pair_coef, double out_coef, double, double in_spatial) {
                            const long long xo = eff_channels(shapes, groups, pi, out);
                            if (in < 0) {
                                total += static_cast<long long>(pair_coef) * xo +
                                         static_cast<long long>(out_coef) * xo;
                            } else {
                                const long long xi = eff_channels(shapes, groups, pi, in);
                                total += static_cast<long long>(pair_coef * in_spatial) * xi * xo +
                                         static_cast<long long>(out_coef) * xo;
                            }
                        });
    return total;
}

long long mac_count(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                    const std::vector<double>& pi) {
    long long total = 0;
    for_each_param_node(g, shapes,
                        [&](int id, int in, int out, double pair_coef, double, double hw_out, double in_spatial) {
                            const long long xo = eff_channels(shapes, groups, pi, out);
                            if (in < 0) {
                                total += static_cast<long long>(pair_coef * hw_out) * xo;
                            } else {
                                const long long xi = eff_channels(shapes, groups, pi, in);
                                total += static_cast<long long>(pair_coef * in_spatial * hw_out) * xi * xo;
                            }
                        });
    return total;
}

namespace {

enum class Metric { Size, Macs };

void accumulate_grad(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                     const std::vector<double>& pi, Metric metric, std::vector<double>* grad, double* value) {
    for_each_param_node(
        g, shapes,
        [&](int id, int in, int out, double pair_coef, double out_coef, double hw_out, double in_spatial) {
            const double spatial = metric == Metric::Macs ? hw_out : 1.0;
            const double extra = metric == Metric::Macs ? 0.0 : out_coef;
            const int go = groups.group_of[static_cast<std::size_t>(out)];
            const double xo = relaxed_channels(shapes, groups, pi, out);
            const double co = static_cast<double>(shapes[out].c);
            if (in < 0) {
                if (value) *value += (pair_coef + extra) * spatial * xo;
                if (grad && groups.prunable[static_cast<std::size_t>(go)])
                    (*grad)[static_cast<std::size_t>(go)] += (pair_coef + extra) * spatial * co;
                return;
            }
            const int gi = groups.group_of[static_cast<std::size_t>(in)];
            const double xi = relaxed_channels(shapes, groups, pi, in);
            const double ci = static_cast<double>(shapes[in].c);
            const double k = pair_coef * in_spatial * spatial;
            if (value) *value += k * xi * xo + extra * spatial * xo;
            if (grad) {
                if (groups.prunable[static_cast<std::size_t>(gi)])
                    (*grad)[static_cast<std::size_t>(gi)] += k * ci * xo;
                if (groups.prunable[static_cast<std::size_t>(go)])
                    (*grad)[static_cast<std::size_t>(go)] += k * xi * co + extra * spatial * co;
            }
        });
}

}  // namespace

std::vector<double> model_size_grad(const ComputationGraph& g, const ShapeTable& shapes,
                                    const MaskGroupTable& groups, const std::vector<double>& pi) {
    std::vector<double> grad(static_cast<std::size_t>(groups.group_count()), 0.0);
    accumulate_grad(g, shapes, groups, pi, Metric::Size, &grad, nullptr);
    return grad;
}

std::vector<double> mac_count_grad(const ComputationGraph& g, const ShapeTable& shapes,
                                   const MaskGroupTable& groups, const std::vector<double>& pi) {
    std::vector<double> grad(static_cast<std::size_t>(groups.group_count()), 0.0);
    accumulate_grad(g, shapes, groups, pi, Metric::Macs, &grad, nullptr);
    return grad;
}

double model_size_real(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                       const std::vector<double>& pi) {
    double v = 0.0;
    accumulate_grad(g, shapes, groups, pi, Metric::Size, nullptr, &v);
    return v;
}

double mac_count_real(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                      const std::vector<double>& pi) {
    double v = 0.0;
    accumulate_grad(g, shapes, groups, pi, Metric::Macs, nullptr, &v);
    return v;
}

ResourceLoss resource_loss(const ResourceUsage& usage, const ResourceBudget& budget, const Scalarization& scal,
                           bool include_pmu) {
    ResourceLoss out;
    double best = -1.0;
    auto consider = [&](Objective o, double lambda, long long u, long long b) {
        const double r = lambda * static_cast<double>(u) / static_cast<double>(b);
        if (r > best) {  // strict: earlier objectives win ties (PMU > Size > MACs)
            best = r;
            out.active = o;
        }
    };
    if (include_pmu) consider(Objective::PMU, scal.pmu, usage.pmu_bytes, budget.pmu_bytes);
    consider(Objective::Size, scal.size, usage.size_bytes, budget.size_bytes);
    consider(Objective::MACs, scal.macs, usage.macs, budget.macs);
    out.value = std::max(0.0, best - 1.0);
    return out;
}

ResourceUsage measure_usage(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                            const std::vector<double>& pi, const PlannerOptions& opts) {
    ResourceUsage u;
    const TensorSizeTable sizes = tensor_sizes(g, shapes, groups, pi, opts);
    const MemoryPlan plan = precise_pmu(g, sizes, opts);
    u.pmu_bytes = plan.peak_bytes;
    u.bottleneck = plan.bottleneck;
    u.size_bytes = model_size(g, shapes, groups, pi);
    u.macs = mac_count(g, shapes, groups, pi);
    return u;
}

}  // namespace tinyprune
