#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "tinyprune/nn.hpp"
#include "tinyprune/resources.hpp"

using namespace tinyprune;

namespace {

struct Model {
    ComputationGraph g;
    ShapeTable shapes;
    MaskGroupTable groups;
    std::vector<double> pi;
};

Model load(const std::string& text) {
    Model m{parse_model_spec(text), {}, {}, {}};
    m.shapes = infer_shapes(m.g);
    m.groups = compute_mask_groups(m.g);
    m.pi.assign(static_cast<std::size_t>(m.groups.group_count()), 1.0);
    return m;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

#include <fstream>
#include <sstream>

TEST_CASE("single FC 10->10 with bias is 110 bytes") {
    Model m = load(
        "input: Input(10, 1, 1)\n"
        "fc: FullyConnected(10) <- input\n"
        "out: Output <- fc\n");
    CHECK(model_size(m.g, m.shapes, m.groups, m.pi) == 110);
}

TEST_CASE("1x1 conv with 1 channel on 4x4 output is 16 MACs") {
    Model m = load(
        "input: Input(1, 4, 4)\n"
        "c: Conv2D(1, 1) <- input\n"
        "out: Output <- c\n");
    CHECK(mac_count(m.g, m.shapes, m.groups, m.pi) == 16);
}

TEST_CASE("VGG-16 CIFAR static numbers") {
    const Model m = [&] {
        return load(read_file(testsup::source_path("models/vgg16_cifar.model")));
    }();
    const long long size = model_size(m.g, m.shapes, m.groups, m.pi);
    const long long macs = mac_count(m.g, m.shapes, m.groups, m.pi);
    CHECK(std::abs(static_cast<double>(size) - 14.7e6) / 14.7e6 < 0.03);
    CHECK(std::abs(static_cast<double>(macs) - 313.3e6) / 313.3e6 < 0.03);

    PlannerOptions opts;
    const TensorSizeTable sizes = tensor_sizes(m.g, m.shapes, m.groups, m.pi, opts);
    CHECK(precise_pmu(m.g, sizes, opts).peak_bytes == 131072);
}

TEST_CASE("model size equals a parameter-count oracle on a random pruned net") {
    Model m = load(
        "input: Input(3, 8, 8)\n"
        "c1: Conv2D(3, 12, pad=1, bn) <- input\n"
        "r1: ReLU <- c1\n"
        "c2: Conv2D(3, 10, pad=1) <- r1\n"
        "gap: AvgPoolGlobal <- c2\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(5) <- flat\n"
        "out: Output <- fc\n");
    // random pi over prunable groups
    Rng rng(11);
    for (int gi : m.groups.prunable_groups()) m.pi[static_cast<std::size_t>(gi)] = 0.3 + 0.7 * rng.uniform();

    // oracle: materialize the masked network and count parameters one by one
    Rng wrng(1);
    const ModelParams params = init_params(m.g, m.shapes, wrng);
    MaskSet masks = MaskSet::all_ones(m.groups);
    for (int gi : m.groups.prunable_groups()) {
        const int c = m.groups.channels[static_cast<std::size_t>(gi)];
        const int k = ShapeTable::effective_channels(c, m.pi[static_cast<std::size_t>(gi)]);
        for (int i = k; i < c; ++i) masks.by_group[static_cast<std::size_t>(gi)][static_cast<std::size_t>(i)] = 0;
    }
    const MaterializedModel mat = materialize_pruned(m.g, m.shapes, m.groups, params, masks);
    long long counted = 0;
    for (const NodeParams& np : mat.params.nodes) {
        counted += np.w.numel() + np.b.numel() + np.gamma.numel() + np.beta.numel();
    }
    CHECK(model_size(m.g, m.shapes, m.groups, m.pi) == counted);
}

TEST_CASE("mac count equals an explicit per-output-element loop oracle") {
    Model m = load(
        "input: Input(2, 5, 5)\n"
        "c1: Conv2D(3, 7, pad=1, stride=2) <- input\n"
        "dw: DepthwiseConv2D(3, stride=1, pad=1) <- c1\n"
        "gap: AvgPoolGlobal <- dw\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(4) <- flat\n"
        "out: Output <- fc\n");
    Rng rng(12);
    for (int gi : m.groups.prunable_groups()) m.pi[static_cast<std::size_t>(gi)] = 0.4 + 0.6 * rng.uniform();

    auto eff = [&](int id) {
        const int gi = m.groups.group_of[static_cast<std::size_t>(id)];
        return m.groups.prunable[static_cast<std::size_t>(gi)]
                   ? ShapeTable::effective_channels(m.shapes[id].c, m.pi[static_cast<std::size_t>(gi)])
                   : m.shapes[id].c;
    };
    long long oracle = 0;
    for (int id = 0; id < m.g.size(); ++id) {
        const Node& n = m.g.node(id);
        if (n.kind == OpKind::Conv2D) {
            for (int out = 0; out < eff(id); ++out)
                for (int oh = 0; oh < m.shapes[id].h; ++oh)
                    for (int ow = 0; ow < m.shapes[id].w; ++ow)
                        oracle += static_cast<long long>(n.attrs.kernel_h) * n.attrs.kernel_w * eff(n.preds[0]);
        } else if (n.kind == OpKind::DepthwiseConv2D) {
            for (int out = 0; out < eff(id); ++out)
                for (int oh = 0; oh < m.shapes[id].h; ++oh)
                    for (int ow = 0; ow < m.shapes[id].w; ++ow)
                        oracle += static_cast<long long>(n.attrs.kernel_h) * n.attrs.kernel_w;
        } else if (n.kind == OpKind::FullyConnected) {
            const Shape in = m.shapes[n.preds[0]];
            oracle += static_cast<long long>(eff(n.preds[0])) * in.h * in.w * eff(id);
        }
    }
    CHECK(mac_count(m.g, m.shapes, m.groups, m.pi) == oracle);
}

TEST_CASE("scalarization formula and reproducibility") {
    {
        Rng rng(5);
        Scalarization s = sample_scalarization(rng);
        CHECK(s.pmu > 1.0);
        CHECK(s.size > 1.0);
        CHECK(s.macs > 1.0);
    }
    // same seed -> identical sequence
    Rng a(9), b(9);
    for (int i = 0; i < 100; ++i) {
        const Scalarization s1 = sample_scalarization(a);
        const Scalarization s2 = sample_scalarization(b);
        CHECK(s1.pmu == s2.pmu);
        CHECK(s1.size == s2.size);
        CHECK(s1.macs == s2.macs);
    }
    // P(lambda > 10) = P(u < 0.1) ~ 0.1
    Rng rng(123);
    int over = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i)
        if (1.0 / rng.uniform_open() > 10.0) ++over;
    CHECK(std::abs(over / static_cast<double>(draws) - 0.1) < 0.01);
}

TEST_CASE("resource loss: boundary, forced max, satisfied-objective selection") {
    const ResourceBudget b{1000, 1000, 1000};
    {
        // all usage exactly at budget, lambda -> 1+: value 0, clipped
        const ResourceLoss rl = resource_loss({1000, 1000, 1000, {}}, b, Scalarization{});
        CHECK(rl.value == 0.0);
        CHECK(rl.active == Objective::PMU);  // tie priority
    }
    {
        // MACs at 2x budget: value 1, active MACs
        const ResourceLoss rl = resource_loss({1000, 1000, 2000, {}}, b, Scalarization{});
        CHECK(rl.value == doctest::Approx(1.0));
        CHECK(rl.active == Objective::MACs);
    }
    {
        // lambda = (1, 5, 1), size at half budget: scalarization picks the
        // satisfied objective (5 * 0.5 = 2.5 > 1) and the value is 1.5
        Scalarization s;
        s.size = 5.0;
        const ResourceLoss rl = resource_loss({1000, 500, 1000, {}}, b, s);
        CHECK(rl.value == doctest::Approx(1.5));
        CHECK(rl.active == Objective::Size);
    }
}

TEST_CASE("straight-through gradients match finite differences of the relaxed formulas") {
    Model m = load(
        "input: Input(3, 8, 8)\n"
        "c1: Conv2D(3, 12, pad=1, bn) <- input\n"
        "c2: Conv2D(3, 12, pad=1, bn) <- c1\n"
        "j: Add <- c1, c2\n"
        "dw: DepthwiseConv2D(3, pad=1, bn) <- j\n"
        "gap: AvgPoolGlobal <- dw\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(6) <- flat\n"
        "out: Output <- fc\n");
    Rng rng(77);
    for (int gi : m.groups.prunable_groups()) m.pi[static_cast<std::size_t>(gi)] = 0.3 + 0.6 * rng.uniform();

    const std::vector<double> gs = model_size_grad(m.g, m.shapes, m.groups, m.pi);
    const std::vector<double> gm = mac_count_grad(m.g, m.shapes, m.groups, m.pi);
    const double eps = 1e-6;
    for (int gi : m.groups.prunable_groups()) {
        auto at = [&](double delta, auto&& f) {
            std::vector<double> q(m.pi);
            q[static_cast<std::size_t>(gi)] += delta;
            return f(m.g, m.shapes, m.groups, q);
        };
        const double fd_size = (at(eps, model_size_real) - at(-eps, model_size_real)) / (2 * eps);
        const double fd_macs = (at(eps, mac_count_real) - at(-eps, mac_count_real)) / (2 * eps);
        CHECK(gs[static_cast<std::size_t>(gi)] == doctest::Approx(fd_size).epsilon(1e-6));
        CHECK(gm[static_cast<std::size_t>(gi)] == doctest::Approx(fd_macs).epsilon(1e-6));
    }
}

TEST_CASE("size and macs are monotone in every group multiplier") {
    Model m = load(
        "input: Input(3, 8, 8)\n"
        "c1: Conv2D(3, 16, pad=1, bn) <- input\n"
        "c2: Conv2D(3, 12, pad=1) <- c1\n"
        "gap: AvgPoolGlobal <- c2\n"
        "flat: Flatten <- gap\n"
        "fc: FullyConnected(4) <- flat\n"
        "out: Output <- fc\n");
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> lo(m.pi), hi(m.pi);
        for (int gi : m.groups.prunable_groups()) {
            const double a = 0.1 + 0.9 * rng.uniform();
            const double b = std::min(1.0, a + 0.3 * rng.uniform());
            lo[static_cast<std::size_t>(gi)] = a;
            hi[static_cast<std::size_t>(gi)] = b;
        }
        CHECK(model_size(m.g, m.shapes, m.groups, lo) <= model_size(m.g, m.shapes, m.groups, hi));
        CHECK(mac_count(m.g, m.shapes, m.groups, lo) <= mac_count(m.g, m.shapes, m.groups, hi));
    }
}
