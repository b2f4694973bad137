#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "test_support.hpp"
#include "tinyprune/memplan.hpp"

using namespace tinyprune;
using testsup::random_graph;
using testsup::random_sizes;

namespace {

ComputationGraph chain(const std::vector<long long>& sizes_dummy) {
    std::vector<Node> nodes;
    Node in;
    in.name = "in";
    in.kind = OpKind::Input;
    in.attrs = {.in_c = 1, .in_h = 1, .in_w = 1};
    nodes.push_back(in);
    for (std::size_t i = 1; i + 1 < sizes_dummy.size(); ++i) {
        Node v;
        v.name = "n" + std::to_string(i);
        v.kind = OpKind::ReLU;
        v.preds = {static_cast<int>(i - 1)};
        nodes.push_back(v);
    }
    Node out;
    out.name = "out";
    out.kind = OpKind::Output;
    out.preds = {static_cast<int>(sizes_dummy.size() - 2)};
    nodes.push_back(out);
    return ComputationGraph::from_nodes(std::move(nodes));
}

TensorSizeTable sizes_of(std::vector<long long> v) {
    TensorSizeTable t;
    t.bytes = std::move(v);
    return t;
}

// Input -> {B, C} -> Add -> (the 5-node diamond)
ComputationGraph diamond() {
    std::vector<Node> nodes(5);
    nodes[0].name = "in";
    nodes[0].kind = OpKind::Input;
    nodes[0].attrs = {.in_c = 1, .in_h = 1, .in_w = 1};
    nodes[1].name = "b";
    nodes[1].kind = OpKind::ReLU;
    nodes[1].preds = {0};
    nodes[2].name = "c";
    nodes[2].kind = OpKind::ReLU;
    nodes[2].preds = {0};
    nodes[3].name = "add";
    nodes[3].kind = OpKind::Add;
    nodes[3].preds = {1, 2};
    nodes[4].name = "out";
    nodes[4].kind = OpKind::Output;
    nodes[4].preds = {3};
    return ComputationGraph::from_nodes(std::move(nodes));
}

}  // namespace

TEST_CASE("chain peak: two large buffers dominate") {
    // Input(3KB) -> A(64KB) -> B(64KB) -> Output(64KB)
    const ComputationGraph g = chain({3072, 65536, 65536, 65536});
    const auto t = sizes_of({3072, 65536, 65536, 65536});
    const MemoryPlan plan = precise_pmu(g, t);
    CHECK(plan.peak_bytes == 131072);
    CHECK(imprecise_pmu(g, t) == 131072);
    CHECK(brute_force_pmu(g, t) == 131072);
}

TEST_CASE("single node graph: input size + output size") {
    const ComputationGraph g = chain({7, 5});
    const auto t = sizes_of({7, 5});
    CHECK(precise_pmu(g, t).peak_bytes == 12);
    CHECK(brute_force_pmu(g, t) == 12);
}

TEST_CASE("diamond example from first principles") {
    const ComputationGraph g = diamond();
    const auto t = sizes_of({4, 10, 2, 4, 4});
    // brute force over all topological orders of the 5-node diamond
    CHECK(brute_force_pmu(g, t) == 16);
    const MemoryPlan plan = precise_pmu(g, t);
    CHECK(plan.peak_bytes == 16);
    // lexicographically smallest optimal order
    CHECK(plan.order == std::vector<int>{0, 1, 2, 3, 4});
    long long bsum = 0;
    for (int id : plan.bottleneck) bsum += t[id];
    CHECK(bsum == plan.peak_bytes);
}

TEST_CASE("precise equals brute force on random graphs") {
    Rng rng(42);
    int checked = 0;
    while (checked < 300) {
        const ComputationGraph g = random_graph(rng.range_int(3, 7), rng);
        const TensorSizeTable t = random_sizes(g, rng);
        const long long bf = brute_force_pmu(g, t);
        const MemoryPlan plan = precise_pmu(g, t);
        REQUIRE(plan.peak_bytes == bf);
        // the returned order must be a valid topological order achieving the peak
        std::vector<char> done(static_cast<std::size_t>(g.size()), 0);
        for (int v : plan.order) {
            for (int p : g.preds(v)) REQUIRE(done[static_cast<std::size_t>(p)]);
            done[static_cast<std::size_t>(v)] = 1;
        }
        ++checked;
    }
}

TEST_CASE("precise equals brute force with add-inplace enabled") {
    Rng rng(43);
    PlannerOptions opts;
    opts.add_inplace = true;
    for (int i = 0; i < 150; ++i) {
        const ComputationGraph g = random_graph(rng.range_int(3, 7), rng);
        const TensorSizeTable t = random_sizes(g, rng);
        CHECK(precise_pmu(g, t, opts).peak_bytes == brute_force_pmu(g, t, opts));
    }
}

TEST_CASE("imprecise underapproximates precise; equality on chains") {
    Rng rng(44);
    for (int i = 0; i < 200; ++i) {
        const ComputationGraph g = random_graph(rng.range_int(3, 7), rng);
        const TensorSizeTable t = random_sizes(g, rng);
        CHECK(imprecise_pmu(g, t) <= precise_pmu(g, t).peak_bytes);
    }
    for (int len = 2; len <= 6; ++len) {
        std::vector<long long> v;
        Rng r2(static_cast<std::uint64_t>(len));
        for (int i = 0; i < len; ++i) v.push_back(1 + static_cast<long long>(r2.below(50)));
        const ComputationGraph g = chain(v);
        const auto t = sizes_of(v);
        CHECK(imprecise_pmu(g, t) == precise_pmu(g, t).peak_bytes);
    }
}

TEST_CASE("strict gap on a long-skip residual graph") {
    // in -> x -> a -> b -> c, with skip x -> add(c, x); a and b are wide.
    std::vector<Node> nodes(7);
    nodes[0] = {0, "in", OpKind::Input, {.in_c = 1, .in_h = 1, .in_w = 1}, {}};
    nodes[1] = {1, "x", OpKind::ReLU, {}, {0}};
    nodes[2] = {2, "a", OpKind::ReLU, {}, {1}};
    nodes[3] = {3, "b", OpKind::ReLU, {}, {2}};
    nodes[4] = {4, "c", OpKind::ReLU, {}, {3}};
    nodes[5] = {5, "add", OpKind::Add, {}, {1, 4}};
    nodes[6] = {6, "out", OpKind::Output, {}, {5}};
    const ComputationGraph g = ComputationGraph::from_nodes(std::move(nodes));
    const auto t = sizes_of({1, 10, 20, 20, 10, 10, 10});
    const long long precise = precise_pmu(g, t).peak_bytes;
    const long long imprecise = imprecise_pmu(g, t);
    CHECK(imprecise < precise);  // the held skip buffer is invisible per-operator
    CHECK(precise == brute_force_pmu(g, t));
}

TEST_CASE("precise_pmu is monotone in buffer sizes") {
    Rng rng(45);
    for (int i = 0; i < 100; ++i) {
        const ComputationGraph g = random_graph(rng.range_int(3, 7), rng);
        TensorSizeTable t = random_sizes(g, rng);
        const long long before = precise_pmu(g, t).peak_bytes;
        const int bump = rng.range_int(0, g.size() - 1);
        t.bytes[static_cast<std::size_t>(bump)] += 1 + static_cast<long long>(rng.below(10));
        CHECK(precise_pmu(g, t).peak_bytes >= before);
    }
}

TEST_CASE("bottleneck sizes sum to the peak") {
    Rng rng(46);
    for (int i = 0; i < 100; ++i) {
        const ComputationGraph g = random_graph(rng.range_int(3, 8), rng);
        const TensorSizeTable t = random_sizes(g, rng);
        const MemoryPlan plan = precise_pmu(g, t);
        long long sum = 0;
        for (int id : plan.bottleneck) sum += t[id];
        CHECK(sum == plan.peak_bytes);
    }
}

TEST_CASE("planner is deterministic (ties broken lexicographically)") {
    Rng rng(47);
    for (int i = 0; i < 50; ++i) {
        const ComputationGraph g = random_graph(rng.range_int(4, 8), rng);
        TensorSizeTable t;
        t.bytes.assign(static_cast<std::size_t>(g.size()), 8);  // everything ties
        const MemoryPlan p1 = precise_pmu(g, t);
        const MemoryPlan p2 = precise_pmu(g, t);
        CHECK(p1.order == p2.order);
        CHECK(p1.bottleneck == p2.bottleneck);
    }
}

TEST_CASE("brute force refuses more than 8 nodes") {
    Rng rng(48);
    const ComputationGraph g = random_graph(9, rng);
    const TensorSizeTable t = random_sizes(g, rng);
    CHECK_THROWS_AS(brute_force_pmu(g, t), PlanError);
}

TEST_CASE("node cap raises a state-space error") {
    Rng rng(49);
    // a wide fan of parallel branches exceeds a tiny cap after contraction
    const ComputationGraph g = random_graph(8, rng);
    const TensorSizeTable t = random_sizes(g, rng);
    PlannerOptions opts;
    opts.node_cap = 2;
    CHECK_THROWS_WITH_AS(precise_pmu(g, t, opts), doctest::Contains("state-space overflow"), PlanError);
}

TEST_CASE("add-inplace lowers the diamond peak") {
    const ComputationGraph g = diamond();
    const auto t = sizes_of({4, 10, 10, 10, 10});
    PlannerOptions off;
    PlannerOptions on;
    on.add_inplace = true;
    CHECK(precise_pmu(g, t, off).peak_bytes > precise_pmu(g, t, on).peak_bytes);
    CHECK(imprecise_pmu(g, t, on) <= precise_pmu(g, t, on).peak_bytes);
}

TEST_CASE("tensor sizes honor effective channels and element size") {
    const ComputationGraph g = parse_model_spec(
        "input: Input(3, 4, 4)\n"
        "c1: Conv2D(3, 8, pad=1) <- input\n"
        "c2: Conv2D(3, 6, pad=1) <- c1\n"
        "out: Output <- c2\n");
    const ShapeTable shapes = infer_shapes(g);
    const MaskGroupTable groups = compute_mask_groups(g);
    std::vector<double> pi(static_cast<std::size_t>(groups.group_count()), 1.0);
    pi[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(g.find("c1"))])] = 0.5;

    PlannerOptions opts;
    const TensorSizeTable t1 = tensor_sizes(g, shapes, groups, pi, opts);
    CHECK(t1[g.find("c1")] == 4 * 4 * 4);   // floor(0.5*8) = 4 channels
    CHECK(t1[g.find("c2")] == 6 * 4 * 4);   // c2 feeds Output: pinned
    opts.elem_bytes = 4;
    const TensorSizeTable t4 = tensor_sizes(g, shapes, groups, pi, opts);
    CHECK(t4[g.find("c1")] == 4 * t1[g.find("c1")]);
}

TEST_CASE("pmu subgradient: definition and finite differences on a tied diamond") {
    // input -> c1 -> {branch a: c2 -> relu; skip} -> add ties c1 and c2's groups
    const char* text =
        "input: Input(2, 4, 4)\n"
        "c1: Conv2D(3, 8, pad=1, bn) <- input\n"
        "c2: Conv2D(3, 8, pad=1, bn) <- c1\n"
        "j: Add <- c1, c2\n"
        "gap: AvgPoolGlobal <- j\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(2) <- flat\n"
        "out: Output <- fc\n";
    const ComputationGraph g = parse_model_spec(text);
    const ShapeTable shapes = infer_shapes(g);
    const MaskGroupTable groups = compute_mask_groups(g);
    const int tied = groups.group_of[static_cast<std::size_t>(g.find("c1"))];
    REQUIRE(tied == groups.group_of[static_cast<std::size_t>(g.find("c2"))]);

    PlannerOptions opts;
    std::vector<double> pi(static_cast<std::size_t>(groups.group_count()), 0.75);

    // real-relaxed planner for finite differences
    auto peak_at = [&](double p) {
        std::vector<double> q(pi);
        q[static_cast<std::size_t>(tied)] = p;
        return precise_pmu_real(g, tensor_sizes_real(g, shapes, groups, q, opts), opts).peak;
    };
    const MemoryPlan plan = precise_pmu(g, tensor_sizes(g, shapes, groups, pi, opts), opts);
    const std::vector<double> grad = pmu_subgradient(plan, g, shapes, groups, opts);

    const double eps = 1e-4;
    const double fd = (peak_at(0.75 + eps) - peak_at(0.75 - eps)) / (2 * eps);
    CHECK(grad[static_cast<std::size_t>(tied)] == doctest::Approx(fd).epsilon(1e-6));

    // groups absent from the bottleneck get zero gradient
    double total = 0.0;
    for (double v : grad) total += v;
    CHECK(total > 0.0);
    for (int gi = 0; gi < groups.group_count(); ++gi) {
        bool in_bottleneck = false;
        for (int id : plan.bottleneck)
            in_bottleneck |= groups.group_of[static_cast<std::size_t>(id)] == gi;
        if (!in_bottleneck) CHECK(grad[static_cast<std::size_t>(gi)] == 0.0);
    }
}

TEST_CASE("pmu subgradient: single-tensor bottleneck definition") {
    // chain in -> a(64x32x32) with bottleneck containing a
    const ComputationGraph g = parse_model_spec(
        "input: Input(3, 32, 32)\n"
        "a: Conv2D(3, 64, pad=1) <- input\n"
        "b: Conv2D(3, 64, pad=1) <- a\n"
        "out: Output <- b\n");
    const ShapeTable shapes = infer_shapes(g);
    const MaskGroupTable groups = compute_mask_groups(g);
    PlannerOptions opts;
    const std::vector<double> pi(static_cast<std::size_t>(groups.group_count()), 1.0);
    const MemoryPlan plan = precise_pmu(g, tensor_sizes(g, shapes, groups, pi, opts), opts);
    const std::vector<double> grad = pmu_subgradient(plan, g, shapes, groups, opts);
    const int ga = groups.group_of[static_cast<std::size_t>(g.find("a"))];
    // bottleneck is {a, b}; only a's group is prunable (b feeds Output)
    CHECK(grad[static_cast<std::size_t>(ga)] == doctest::Approx(64.0 * 32 * 32));
}

TEST_CASE("stable bottleneck when no floor boundary is crossed") {
    const ComputationGraph g = parse_model_spec(
        "input: Input(2, 6, 6)\n"
        "c1: Conv2D(3, 10, pad=1) <- input\n"
        "c2: Conv2D(3, 10, pad=1) <- c1\n"
        "out: Output <- c2\n");
    const ShapeTable shapes = infer_shapes(g);
    const MaskGroupTable groups = compute_mask_groups(g);
    PlannerOptions opts;
    std::vector<double> pi(static_cast<std::size_t>(groups.group_count()), 0.65);
    const MemoryPlan p1 = precise_pmu(g, tensor_sizes(g, shapes, groups, pi, opts), opts);
    for (double& v : pi)
        if (v < 1.0) v = 0.69;  // floor(0.65*10)=6 == floor(0.69*10)
    const MemoryPlan p2 = precise_pmu(g, tensor_sizes(g, shapes, groups, pi, opts), opts);
    CHECK(p1.peak_bytes == p2.peak_bytes);
    CHECK(p1.bottleneck == p2.bottleneck);
    CHECK(p1.order == p2.order);
}

TEST_CASE("contracted node count: chains collapse") {
    const ComputationGraph g = chain({1, 1, 1, 1, 1, 1});
    CHECK(contracted_node_count(g) == 1);
    const ComputationGraph d = diamond();
    CHECK(contracted_node_count(d) == 4);  // in, b, c, add+out merge partially
}
