#include "tinyprune/memplan.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace tinyprune {

TensorSizeTable tensor_sizes(const ComputationGraph& g, const ShapeTable& shapes,
                             const MaskGroupTable& groups, const std::vector<double>& pi,
                             const PlannerOptions& opts) {
    TensorSizeTable t;
    t.bytes.resize(static_cast<std::size_t>(g.size()));
    for (int id = 0; id < g.size(); ++id) {
        const Shape& s = shapes[id];
        const int gi = groups.group_of[static_cast<std::size_t>(id)];
        const int eff = groups.prunable[static_cast<std::size_t>(gi)]
                            ? ShapeTable::effective_channels(s.c, pi[static_cast<std::size_t>(gi)])
                            : s.c;
        t.bytes[static_cast<std::size_t>(id)] =
            static_cast<long long>(eff) * s.h * s.w * opts.elem_bytes;
    }
    return t;
}

std::vector<double> tensor_sizes_real(const ComputationGraph& g, const ShapeTable& shapes,
                                      const MaskGroupTable& groups, const std::vector<double>& pi,
                                      const PlannerOptions& opts) {
    std::vector<double> t(static_cast<std::size_t>(g.size()));
    for (int id = 0; id < g.size(); ++id) {
        const Shape& s = shapes[id];
        const int gi = groups.group_of[static_cast<std::size_t>(id)];
        const double frac = groups.prunable[static_cast<std::size_t>(gi)] ? pi[static_cast<std::size_t>(gi)] : 1.0;
        t[static_cast<std::size_t>(id)] = frac * s.c * s.h * s.w * opts.elem_bytes;
    }
    return t;
}

int contracted_node_count(const ComputationGraph& g) {
    int contracted_edges = 0;
    for (int u = 0; u < g.size(); ++u) {
        const auto& ss = g.succs(u);
        if (ss.size() == 1 && g.preds(ss[0]).size() == 1) ++contracted_edges;
    }
    return g.size() - contracted_edges;
}

namespace {

// Executed-node set; supports up to 128 nodes.
struct NodeSet {
    std::uint64_t w0 = 0, w1 = 0;

    bool test(int i) const {
        return i < 64 ? (w0 >> i) & 1u : (w1 >> (i - 64)) & 1u;
    }
    void set(int i) {
        if (i < 64)
            w0 |= (std::uint64_t{1} << i);
        else
            w1 |= (std::uint64_t{1} << (i - 64));
    }
    NodeSet with(int i) const {
        NodeSet s = *this;
        s.set(i);
        return s;
    }
    bool contains(const NodeSet& o) const {
        return (o.w0 & ~w0) == 0 && (o.w1 & ~w1) == 0;
    }
    bool intersects_complement(const NodeSet& o) const {  // o has a bit outside *this
        return (o.w0 & ~w0) != 0 || (o.w1 & ~w1) != 0;
    }
    bool operator==(const NodeSet& o) const { return w0 == o.w0 && w1 == o.w1; }
};

struct NodeSetHash {
    std::size_t operator()(const NodeSet& s) const {
        std::uint64_t z = s.w0 + 0x9e3779b97f4a7c15ull * (s.w1 + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return static_cast<std::size_t>(z ^ (z >> 31));
    }
};

template <typename SizeT>
struct Planner {
    const ComputationGraph& g;
    const std::vector<SizeT>& size;
    const PlannerOptions& opts;
    int n;
    std::vector<NodeSet> pred_mask;
    std::vector<NodeSet> succ_mask;
    std::vector<bool> sink;
    std::unordered_map<NodeSet, SizeT, NodeSetHash> memo;

    Planner(const ComputationGraph& graph, const std::vector<SizeT>& sizes, const PlannerOptions& o)
        : g(graph), size(sizes), opts(o), n(graph.size()) {
        pred_mask.resize(static_cast<std::size_t>(n));
        succ_mask.resize(static_cast<std::size_t>(n));
        sink.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            for (int p : g.preds(i)) pred_mask[static_cast<std::size_t>(i)].set(p);
            for (int s : g.succs(i)) succ_mask[static_cast<std::size_t>(i)].set(s);
            sink[static_cast<std::size_t>(i)] = g.succs(i).empty();
        }
    }

    // Total live bytes while executing v with executed set S (v not in S).
    SizeT live_during(const NodeSet& S, int v) const {
        SizeT live = size[static_cast<std::size_t>(v)];
        for (int u = 0; u < n; ++u) {
            if (!S.test(u)) continue;
            if (sink[static_cast<std::size_t>(u)] || S.intersects_complement(succ_mask[static_cast<std::size_t>(u)]))
                live += size[static_cast<std::size_t>(u)];
        }
        if (opts.add_inplace && g.node(v).kind == OpKind::Add) {
            // Reuse a summand buffer when v is its only remaining consumer.
            for (int p : g.preds(v)) {
                bool reusable = true;
                for (int c : g.succs(p))
                    if (c != v && !S.test(c)) reusable = false;
                if (reusable) {
                    live -= size[static_cast<std::size_t>(v)];
                    break;
                }
            }
        }
        return live;
    }

    // Min over completions of the max step cost, starting from executed set S.
    SizeT finish_value(const NodeSet& S, int executed_count) {
        if (executed_count == n) return SizeT{0};
        auto it = memo.find(S);
        if (it != memo.end()) return it->second;
        SizeT best{};
        bool have = false;
        for (int v = 0; v < n; ++v) {
            if (S.test(v) || !S.contains(pred_mask[static_cast<std::size_t>(v)])) continue;
            const SizeT val = std::max(live_during(S, v), finish_value(S.with(v), executed_count + 1));
            if (!have || val < best) {
                best = val;
                have = true;
            }
        }
        if (memo.size() >= opts.state_cap)
            throw PlanError("precise_pmu: state-space overflow (more than " + std::to_string(opts.state_cap) +
                            " schedule states); simplify the graph or raise the cap");
        memo.emplace(S, best);
        return best;
    }

    void solve(std::vector<int>& order, SizeT& peak, std::vector<int>& bottleneck) {
        if (n > 128) throw PlanError("precise_pmu: more than 128 nodes is unsupported");
        const int contracted = contracted_node_count(g);
        if (contracted > opts.node_cap)
            throw PlanError("precise_pmu: state-space overflow (node count " + std::to_string(contracted) +
                            " after chain contraction exceeds cap " + std::to_string(opts.node_cap) +
                            "); simplify the graph or raise the cap");

        const int input = g.input_node();
        NodeSet S;
        S.set(input);
        const SizeT opt = std::max(size[static_cast<std::size_t>(input)], finish_value(S, 1));
        peak = opt;

        // Lexicographically smallest order achieving the optimum; the first
        // step that attains the peak defines the bottleneck set.
        order.assign(1, input);
        bottleneck.clear();
        SizeT seen_peak = size[static_cast<std::size_t>(input)];
        if (seen_peak >= opt) bottleneck.assign(1, input);
        int executed = 1;
        while (executed < n) {
            for (int v = 0; v < n; ++v) {
                if (S.test(v) || !S.contains(pred_mask[static_cast<std::size_t>(v)])) continue;
                const SizeT step = live_during(S, v);
                if (std::max(step, finish_value(S.with(v), executed + 1)) <= opt) {
                    if (bottleneck.empty() && step >= opt) {
                        for (int u = 0; u < n; ++u) {
                            if (!S.test(u)) continue;
                            if (sink[static_cast<std::size_t>(u)] ||
                                S.intersects_complement(succ_mask[static_cast<std::size_t>(u)]))
                                bottleneck.push_back(u);
                        }
                        bottleneck.push_back(v);
                        std::sort(bottleneck.begin(), bottleneck.end());
                    }
                    seen_peak = std::max(seen_peak, step);
                    order.push_back(v);
                    S.set(v);
                    ++executed;
                    break;
                }
            }
        }
    }
};

}  // namespace

MemoryPlan precise_pmu(const ComputationGraph& g, const TensorSizeTable& sizes, const PlannerOptions& opts) {
    Planner<long long> p(g, sizes.bytes, opts);
    MemoryPlan plan;
    p.solve(plan.order, plan.peak_bytes, plan.bottleneck);
    return plan;
}

MemoryPlanReal precise_pmu_real(const ComputationGraph& g, const std::vector<double>& sizes,
                                const PlannerOptions& opts) {
    Planner<double> p(g, sizes, opts);
    MemoryPlanReal plan;
    p.solve(plan.order, plan.peak, plan.bottleneck);
    return plan;
}

long long imprecise_pmu(const ComputationGraph& g, const TensorSizeTable& sizes, const PlannerOptions& opts) {
    long long best = 0;
    for (int v = 0; v < g.size(); ++v) {
        long long total = sizes[v];
        std::vector<int> seen;
        for (int p : g.preds(v)) {
            if (std::find(seen.begin(), seen.end(), p) != seen.end()) continue;
            seen.push_back(p);
            total += sizes[p];
        }
        if (opts.add_inplace && g.node(v).kind == OpKind::Add) total -= sizes[v];
        best = std::max(best, total);
    }
    return best;
}

long long brute_force_pmu(const ComputationGraph& g, const TensorSizeTable& sizes, const PlannerOptions& opts) {
    const int n = g.size();
    if (n > 8) throw PlanError("brute_force_pmu: refusing graphs with more than 8 nodes");

    // Simulate one complete order from scratch; no shared helpers with the DP.
    std::vector<int> order;
    std::vector<char> placed(static_cast<std::size_t>(n), 0);
    long long best = -1;

    auto order_peak = [&]() {
        long long peak = 0;
        for (std::size_t step = 0; step < order.size(); ++step) {
            const int v = order[step];
            long long live = sizes[v];
            for (std::size_t j = 0; j < step; ++j) {
                const int u = order[j];
                bool u_live = g.succs(u).empty();
                for (int c : g.succs(u)) {
                    bool c_done = false;
                    for (std::size_t k = 0; k < step; ++k) c_done |= (order[k] == c);
                    if (!c_done) u_live = true;
                }
                if (u_live) live += sizes[u];
            }
            if (opts.add_inplace && g.node(v).kind == OpKind::Add) {
                for (int p : g.preds(v)) {
                    bool reusable = true;
                    for (int c : g.succs(p)) {
                        if (c == v) continue;
                        bool c_done = false;
                        for (std::size_t k = 0; k < step; ++k) c_done |= (order[k] == c);
                        if (!c_done) reusable = false;
                    }
                    if (reusable) {
                        live -= sizes[v];
                        break;
                    }
                }
            }
            peak = std::max(peak, live);
        }
        return peak;
    };

    auto rec = [&](auto&& self) -> void {
        if (static_cast<int>(order.size()) == n) {
            const long long p = order_peak();
            if (best < 0 || p < best) best = p;
            return;
        }
        for (int v = 0; v < n; ++v) {
            if (placed[static_cast<std::size_t>(v)]) continue;
            bool ready = true;
            for (int p : g.preds(v)) ready &= static_cast<bool>(placed[static_cast<std::size_t>(p)]);
            if (!ready) continue;
            placed[static_cast<std::size_t>(v)] = 1;
            order.push_back(v);
            self(self);
            order.pop_back();
            placed[static_cast<std::size_t>(v)] = 0;
        }
    };
    rec(rec);
    return best;
}

std::vector<double> pmu_subgradient(const MemoryPlan& plan, const ComputationGraph& g,
                                    const ShapeTable& shapes, const MaskGroupTable& groups,
                                    const PlannerOptions& opts) {
    std::vector<double> grad(static_cast<std::size_t>(groups.group_count()), 0.0);
    for (int t : plan.bottleneck) {
        const int gi = groups.group_of[static_cast<std::size_t>(t)];
        if (!groups.prunable[static_cast<std::size_t>(gi)]) continue;
        grad[static_cast<std::size_t>(gi)] += static_cast<double>(shapes[t].elems()) * opts.elem_bytes;
    }
    return grad;
}

std::vector<double> imprecise_pmu_subgradient(const ComputationGraph& g, const TensorSizeTable& sizes,
                                              const ShapeTable& shapes, const MaskGroupTable& groups,
                                              const PlannerOptions& opts) {
    long long best = -1;
    int best_node = -1;
    for (int v = 0; v < g.size(); ++v) {
        long long total = sizes[v];
        std::vector<int> seen;
        for (int p : g.preds(v)) {
            if (std::find(seen.begin(), seen.end(), p) != seen.end()) continue;
            seen.push_back(p);
            total += sizes[p];
        }
        if (opts.add_inplace && g.node(v).kind == OpKind::Add) total -= sizes[v];
        if (total > best) {
            best = total;
            best_node = v;
        }
    }
    std::vector<double> grad(static_cast<std::size_t>(groups.group_count()), 0.0);
    if (best_node < 0) return grad;
    auto add_tensor = [&](int t) {
        const int gi = groups.group_of[static_cast<std::size_t>(t)];
        if (!groups.prunable[static_cast<std::size_t>(gi)]) return;
        grad[static_cast<std::size_t>(gi)] += static_cast<double>(shapes[t].elems()) * opts.elem_bytes;
    };
    if (!(opts.add_inplace && g.node(best_node).kind == OpKind::Add)) add_tensor(best_node);
    std::vector<int> seen;
    for (int p : g.preds(best_node)) {
        if (std::find(seen.begin(), seen.end(), p) != seen.end()) continue;
        seen.push_back(p);
        add_tensor(p);
    }
    return grad;
}

}  // namespace tinyprune
