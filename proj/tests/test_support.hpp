#pragma once

#include <string>
#include <vector>

#include "tinyprune/graph.hpp"
#include "tinyprune/memplan.hpp"
#include "tinyprune/rng.hpp"

namespace tinyprune::testsup {

// Random valid graph: single Input, single Output, pass-through nodes with
// in-degree 1 (ReLU) and in-degree-2 Add joins. Node count includes Input and
// Output. Used by the planner equivalence suites.
inline ComputationGraph random_graph(int n, Rng& rng) {
    for (;;) {
        std::vector<Node> nodes(static_cast<std::size_t>(n));
        nodes[0].name = "in";
        nodes[0].kind = OpKind::Input;
        nodes[0].attrs.in_c = 1;
        nodes[0].attrs.in_h = 1;
        nodes[0].attrs.in_w = 1;
        for (int i = 1; i < n; ++i) {
            Node& v = nodes[static_cast<std::size_t>(i)];
            v.name = "n" + std::to_string(i);
            const bool add = i >= 2 && rng.uniform() < 0.35;
            if (add) {
                v.kind = OpKind::Add;
                const int a = rng.range_int(0, i - 1);
                int b = rng.range_int(0, i - 1);
                while (b == a) b = rng.range_int(0, i - 1);
                v.preds = {a, b};
            } else {
                v.kind = OpKind::ReLU;
                v.preds = {rng.range_int(0, i - 1)};
            }
        }
        nodes[static_cast<std::size_t>(n - 1)].kind = OpKind::Output;
        if (nodes[static_cast<std::size_t>(n - 1)].preds.size() == 2)
            nodes[static_cast<std::size_t>(n - 1)].preds.pop_back();
        // count successors; reject unless output is the unique sink
        std::vector<int> succ(static_cast<std::size_t>(n), 0);
        for (const Node& v : nodes)
            for (int p : v.preds) ++succ[static_cast<std::size_t>(p)];
        bool ok = true;
        for (int i = 0; i < n - 1; ++i) ok &= succ[static_cast<std::size_t>(i)] > 0;
        if (!ok) continue;
        try {
            return ComputationGraph::from_nodes(std::move(nodes));
        } catch (const GraphError&) {
            continue;
        }
    }
}

inline TensorSizeTable random_sizes(const ComputationGraph& g, Rng& rng, long long lo = 1, long long hi = 20) {
    TensorSizeTable t;
    for (int i = 0; i < g.size(); ++i)
        t.bytes.push_back(lo + static_cast<long long>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
    return t;
}

inline std::string source_path(const std::string& rel) {
    return std::string(TINYPRUNE_SOURCE_DIR) + "/" + rel;
}

}  // namespace tinyprune::testsup
