#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinyprune/graph.hpp"
#include "tinyprune/rng.hpp"
#include "tinyprune/tensor.hpp"

namespace tinyprune {

// Parameters of one node. Weight layout: Conv2D (Cout,Cin,kh,kw), depthwise
// (C,1,kh,kw), FullyConnected (out,in). Tensors keep their base (unpruned)
// sizes; pruning masks channels rather than reallocating, until export.
struct NodeParams {
    Tensor w;
    Tensor b;                                  // absent for depthwise
    Tensor gamma, beta, run_mean, run_var;     // present when has_bn
    bool has_bn = false;
};

struct ModelParams {
    std::vector<NodeParams> nodes;  // indexed by node id

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {  // learnable tensors only
        for (auto& n : nodes) {
            if (!n.w.empty()) fn(n.w, /*is_weight=*/true);
            if (!n.b.empty()) fn(n.b, false);
            if (!n.gamma.empty()) fn(n.gamma, false);
            if (!n.beta.empty()) fn(n.beta, false);
        }
    }
};

ModelParams init_params(const ComputationGraph& g, const ShapeTable& shapes, Rng& rng);
ModelParams zeros_like(const ModelParams& p);

// Per-group binary channel masks, applied multiplicatively to the output of
// every parametric node in the group.
struct MaskSet {
    std::vector<std::vector<std::uint8_t>> by_group;

    static MaskSet all_ones(const MaskGroupTable& groups);
    int popcount(int group) const;
    long long total_channels() const;
    int churn(const MaskSet& prev) const;  // number of entries that differ
};

struct NodeCache {
    Tensor out;       // node output (post-mask for parametric nodes)
    Tensor pre_mask;  // parametric nodes: value before masking
    Tensor lin;       // conv/dw with bn: pre-normalization output
    std::vector<float> mean, var;  // batch statistics used (training mode)
    std::vector<int> argmax;       // maxpool winner index per output element
};

struct ForwardCache {
    std::vector<NodeCache> nodes;
    bool training = true;
    const Tensor& logits(const ComputationGraph& g) const {
        return nodes[static_cast<std::size_t>(g.output_node())].out;
    }
};

// Masked forward pass. Training mode normalizes with batch statistics and
// updates running statistics of unmasked channels (masked channels stay
// frozen); eval mode uses running statistics and never mutates params.
ForwardCache forward(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                     ModelParams& params, const MaskSet& masks, const Tensor& batch);
ForwardCache eval_forward(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                          const ModelParams& params, const MaskSet& masks, const Tensor& batch);

double cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct Gradients {
    ModelParams params;                          // same shapes as the model
    std::vector<std::vector<double>> mask_grads; // per group, per channel: dL/dM
    double loss = 0.0;                           // cross-entropy of the cached logits
};

Gradients backward(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                   const ModelParams& params, const MaskSet& masks, const ForwardCache& cache,
                   const std::vector<int>& labels);

// SGD with classical momentum; weight decay applies to weight matrices only.
void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& momenta, double lr,
              double momentum, double weight_decay);

// Per-channel importance of a prunable node: |gamma_i| for Conv-BN, L2 norm of
// the weight slice producing output channel/unit i otherwise. A depthwise node
// reports its group's combined salience (it has no width of its own). Throws
// on non-parametric nodes.
std::vector<double> salience(const ComputationGraph& g, const MaskGroupTable& groups,
                             const ModelParams& params, int node);

// Elementwise max over the group's width-picking members.
std::vector<double> group_salience(const ComputationGraph& g, const MaskGroupTable& groups,
                                   const ModelParams& params, int group);

struct MaterializedModel {
    ComputationGraph graph;
    ModelParams params;
};

// Physically removes masked channels (producer rows and consumer columns).
// Logits match the masked forward within float tolerance.
MaterializedModel materialize_pruned(const ComputationGraph& g, const ShapeTable& shapes,
                                     const MaskGroupTable& groups, const ModelParams& params,
                                     const MaskSet& masks);

struct QuantTensor {
    std::vector<std::int8_t> q;
    std::vector<int> shape;
    double scale = 1.0;
    int zero_point = 0;
};

struct QuantizedParams {
    struct Entry {
        int node = -1;
        std::string tensor;  // "w", "b", "gamma", "beta"
        QuantTensor data;
    };
    std::vector<Entry> tensors;
};

// Per-tensor asymmetric affine int8 quantization:
//   q = clamp(round(w/scale) + zero_point, -128, 127)
// scale = (max-min)/255; constant tensors degrade to scale=1,
// zero_point=-round(w). Reconstruction error <= scale/2 per element.
QuantizedParams affine_quantize_weights(const ModelParams& params);

// Accuracy of eval-mode forward over a labelled set, processed in batches.
double evaluate_accuracy(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                         const ModelParams& params, const MaskSet& masks, const Tensor& images,
                         const std::vector<int>& labels, int batch_size);

}  // namespace tinyprune
