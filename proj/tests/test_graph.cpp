#include <doctest.h>

#include <algorithm>

#include "test_support.hpp"
#include "tinyprune/graph.hpp"

using namespace tinyprune;

namespace {

const char* kResidual = R"(
# two conv branches joined by Add
input: Input(3, 8, 8)
conv_a: Conv2D(3x3, 16, stride=1, pad=1, bn) <- input
relu_a: ReLU <- conv_a
conv_b: Conv2D(3x3, 16, stride=1, pad=1, bn) <- relu_a
join: Add <- relu_a, conv_b
gap: AvgPoolGlobal <- join
flat: Flatten <- gap
fc: FullyConnected(4) <- flat
out: Output <- fc
)";

}  // namespace

TEST_CASE("parse minimal chain") {
    const ComputationGraph g = parse_model_spec(
        "input: Input(3, 32, 32)\n"
        "conv1: Conv2D(3x3, 64, stride=1, pad=1) <- input\n"
        "out: Output <- conv1\n");
    CHECK(g.size() == 3);
    CHECK(g.node(1).kind == OpKind::Conv2D);
    CHECK(g.node(1).attrs.out_channels == 64);
    CHECK(g.preds(2) == std::vector<int>{1});
    CHECK(g.succs(0) == std::vector<int>{1});
}

TEST_CASE("parse residual with Add in-degree 2") {
    const ComputationGraph g = parse_model_spec(kResidual);
    const int join = g.find("join");
    REQUIRE(join >= 0);
    CHECK(g.preds(join).size() == 2);
    CHECK(g.node(join).kind == OpKind::Add);
}

TEST_CASE("missing output node is rejected") {
    CHECK_THROWS_WITH_AS(parse_model_spec("input: Input(3, 8, 8)\nconv: Conv2D(3, 4) <- input\n"),
                         doctest::Contains("no output node"), GraphError);
}

TEST_CASE("parser rejects malformed input") {
    // unknown kind
    CHECK_THROWS_AS(parse_model_spec("a: Blob(3)\n"), ParseError);
    // unknown named field
    CHECK_THROWS_WITH_AS(parse_model_spec("input: Input(1,4,4)\nc: Conv2D(3, 4, dilation=2) <- input\n"),
                         doctest::Contains("unknown field"), ParseError);
    // dangling reference
    CHECK_THROWS_WITH_AS(parse_model_spec("input: Input(1,4,4)\nc: Conv2D(3, 4) <- nothere\n"),
                         doctest::Contains("unknown input"), ParseError);
    // duplicate name
    CHECK_THROWS_AS(parse_model_spec("input: Input(1,4,4)\ninput: ReLU <- input\n"), ParseError);
    // line number is reported
    try {
        parse_model_spec("input: Input(1,4,4)\nbad line\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("shape inference: conv / pool arithmetic") {
    const ComputationGraph g = parse_model_spec(
        "input: Input(3, 32, 32)\n"
        "conv: Conv2D(3x3, 64, stride=1, pad=1) <- input\n"
        "pool: MaxPool(2, 2) <- conv\n"
        "out: Output <- pool\n");
    const ShapeTable t = infer_shapes(g);
    CHECK(t[g.find("conv")].c == 64);
    CHECK(t[g.find("conv")].h == 32);
    CHECK(t[g.find("conv")].w == 32);
    CHECK(t[g.find("pool")].h == 16);
    CHECK(t[g.find("pool")].w == 16);
}

TEST_CASE("shape inference: Add mismatch is an error") {
    const char* text =
        "input: Input(3, 16, 16)\n"
        "a: Conv2D(3x3, 64, stride=2, pad=1) <- input\n"
        "b: Conv2D(3x3, 32, stride=2, pad=1) <- input\n"
        "j: Add <- a, b\n"
        "out: Output <- j\n";
    CHECK_THROWS_WITH_AS(infer_shapes(parse_model_spec(text)), doctest::Contains("Add shape mismatch"),
                         GraphError);
}

TEST_CASE("shape inference: non-positive spatial dimension") {
    const char* text =
        "input: Input(3, 4, 4)\n"
        "c: Conv2D(7x7, 8) <- input\n"
        "out: Output <- c\n";
    CHECK_THROWS_WITH_AS(infer_shapes(parse_model_spec(text)), doctest::Contains("non-positive"), GraphError);
}

TEST_CASE("effective channels: floor with minimum 1") {
    CHECK(ShapeTable::effective_channels(64, 1.0) == 64);
    CHECK(ShapeTable::effective_channels(64, 0.5) == 32);
    CHECK(ShapeTable::effective_channels(64, 0.001) == 1);
    CHECK(ShapeTable::effective_channels(1, 0.9) == 1);
}

TEST_CASE("mask groups: plain chain gives singleton groups") {
    const ComputationGraph g = parse_model_spec(
        "input: Input(3, 8, 8)\n"
        "c1: Conv2D(3, 8, pad=1) <- input\n"
        "c2: Conv2D(3, 8, pad=1) <- c1\n"
        "c3: Conv2D(3, 8, pad=1) <- c2\n"
        "out: Output <- c3\n");
    const MaskGroupTable t = compute_mask_groups(g);
    const int g1 = t.group_of[static_cast<std::size_t>(g.find("c1"))];
    const int g2 = t.group_of[static_cast<std::size_t>(g.find("c2"))];
    const int g3 = t.group_of[static_cast<std::size_t>(g.find("c3"))];
    CHECK(g1 != g2);
    CHECK(g2 != g3);
    CHECK(t.members[static_cast<std::size_t>(g1)] == std::vector<int>{g.find("c1")});
    // c3 feeds Output: not prunable
    CHECK_FALSE(t.prunable[static_cast<std::size_t>(g3)]);
    CHECK(t.prunable[static_cast<std::size_t>(g1)]);
    CHECK(t.prunable[static_cast<std::size_t>(g2)]);
}

TEST_CASE("mask groups: residual ties both producers") {
    const ComputationGraph g = parse_model_spec(kResidual);
    const MaskGroupTable t = compute_mask_groups(g);
    const int ga = t.group_of[static_cast<std::size_t>(g.find("conv_a"))];
    const int gb = t.group_of[static_cast<std::size_t>(g.find("conv_b"))];
    CHECK(ga == gb);
    std::vector<int> members = t.members[static_cast<std::size_t>(ga)];
    std::sort(members.begin(), members.end());
    CHECK(members == std::vector<int>{g.find("conv_a"), g.find("conv_b")});
}

TEST_CASE("mask groups: stacked residual blocks collapse to one group") {
    // conv0 -> add1(conv_a) -> add2(conv_b): all three share the skip path
    const char* text =
        "input: Input(3, 8, 8)\n"
        "conv0: Conv2D(3, 16, pad=1, bn) <- input\n"
        "conv_a: Conv2D(3, 16, pad=1, bn) <- conv0\n"
        "add1: Add <- conv0, conv_a\n"
        "conv_b: Conv2D(3, 16, pad=1, bn) <- add1\n"
        "add2: Add <- add1, conv_b\n"
        "gap: AvgPoolGlobal <- add2\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(4) <- flat\n"
        "out: Output <- fc\n";
    const ComputationGraph g = parse_model_spec(text);
    const MaskGroupTable t = compute_mask_groups(g);
    const int g0 = t.group_of[static_cast<std::size_t>(g.find("conv0"))];
    CHECK(t.group_of[static_cast<std::size_t>(g.find("conv_a"))] == g0);
    CHECK(t.group_of[static_cast<std::size_t>(g.find("conv_b"))] == g0);
    CHECK(t.members[static_cast<std::size_t>(g0)].size() == 3);
    // exhaustive pairwise check: any two of the three convs reach a common Add
    // through parameter-free paths, so one shared mask is forced
    CHECK(t.prunable[static_cast<std::size_t>(g0)]);
}

TEST_CASE("mask groups: depthwise and parameter-free nodes inherit") {
    const char* text =
        "input: Input(3, 8, 8)\n"
        "c1: Conv2D(3, 8, pad=1, bn) <- input\n"
        "r1: ReLU <- c1\n"
        "dw: DepthwiseConv2D(3, stride=1, pad=1, bn) <- r1\n"
        "gap: AvgPoolGlobal <- dw\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(2) <- flat\n"
        "out: Output <- fc\n";
    const ComputationGraph g = parse_model_spec(text);
    const MaskGroupTable t = compute_mask_groups(g);
    const int gc = t.group_of[static_cast<std::size_t>(g.find("c1"))];
    CHECK(t.group_of[static_cast<std::size_t>(g.find("r1"))] == gc);
    CHECK(t.group_of[static_cast<std::size_t>(g.find("dw"))] == gc);
    CHECK(t.group_of[static_cast<std::size_t>(g.find("gap"))] == gc);
    CHECK(t.group_of[static_cast<std::size_t>(g.find("flat"))] == gc);
    // dw is a member (its parameters are masked with the group)
    const auto& members = t.members[static_cast<std::size_t>(gc)];
    CHECK(std::find(members.begin(), members.end(), g.find("dw")) != members.end());
}

TEST_CASE("mask groups: permutation invariance (relabeling)") {
    // Build the residual graph twice with different node orders and compare
    // partitions as set-of-sets of node names.
    const ComputationGraph g1 = parse_model_spec(kResidual);
    const char* reordered = R"(
input: Input(3, 8, 8)
conv_a: Conv2D(3x3, 16, stride=1, pad=1, bn) <- input
relu_a: ReLU <- conv_a
conv_b: Conv2D(3x3, 16, stride=1, pad=1, bn) <- relu_a
join: Add <- conv_b, relu_a
gap: AvgPoolGlobal <- join
flat: Flatten <- gap
fc: FullyConnected(4) <- flat
out: Output <- fc
)";
    const ComputationGraph g2 = parse_model_spec(reordered);
    auto partition = [](const ComputationGraph& g) {
        const MaskGroupTable t = compute_mask_groups(g);
        std::vector<std::vector<std::string>> part(static_cast<std::size_t>(t.group_count()));
        for (int id = 0; id < g.size(); ++id)
            part[static_cast<std::size_t>(t.group_of[static_cast<std::size_t>(id)])].push_back(g.node(id).name);
        for (auto& p : part) std::sort(p.begin(), p.end());
        std::sort(part.begin(), part.end());
        return part;
    };
    CHECK(partition(g1) == partition(g2));
}

TEST_CASE("mask groups: idempotent") {
    const ComputationGraph g = parse_model_spec(kResidual);
    const MaskGroupTable a = compute_mask_groups(g);
    const MaskGroupTable b = compute_mask_groups(g);
    CHECK(a.group_of == b.group_of);
    CHECK(a.members == b.members);
    CHECK(a.prunable == b.prunable);
}

TEST_CASE("add groups equal after grouping (random graphs)") {
    Rng rng(7);
    for (int t = 0; t < 50; ++t) {
        const ComputationGraph g = testsup::random_graph(rng.range_int(4, 9), rng);
        const MaskGroupTable mt = compute_mask_groups(g);
        for (int id = 0; id < g.size(); ++id) {
            if (g.node(id).kind != OpKind::Add) continue;
            const int a = mt.group_of[static_cast<std::size_t>(g.preds(id)[0])];
            const int b = mt.group_of[static_cast<std::size_t>(g.preds(id)[1])];
            CHECK(a == b);
        }
    }
}

TEST_CASE("model spec round trip") {
    const ComputationGraph g = parse_model_spec(kResidual);
    const ComputationGraph g2 = parse_model_spec(write_model_spec(g));
    REQUIRE(g2.size() == g.size());
    for (int id = 0; id < g.size(); ++id) {
        CHECK(g2.node(id).name == g.node(id).name);
        CHECK(g2.node(id).kind == g.node(id).kind);
        CHECK(g2.preds(id) == g.preds(id));
    }
}
