#pragma once

#include <string>
#include <vector>

#include "tinyprune/error.hpp"

namespace tinyprune {

enum class OpKind {
    Input,
    Conv2D,
    DepthwiseConv2D,
    FullyConnected,
    ReLU,
    MaxPool,
    AvgPoolGlobal,
    Add,
    Flatten,
    Output,
};

const char* op_kind_name(OpKind k);

// Per-node attributes; only the fields relevant to the kind are meaningful.
struct LayerAttrs {
    int kernel_h = 0;
    int kernel_w = 0;
    int stride = 1;
    int pad = 0;
    int out_channels = 0;  // Conv2D base out channels / FullyConnected base out units
    int in_c = 0, in_h = 0, in_w = 0;  // Input
    bool has_bn = false;
};

struct Node {
    int id = -1;
    std::string name;
    OpKind kind = OpKind::Input;
    LayerAttrs attrs;
    std::vector<int> preds;  // producer node ids, in declaration order
};

// DAG of layers. node ids are dense 0..N-1 in declaration order (which is a
// topological order because the model-spec format requires inputs to be
// declared before use). Immutable after construction.
class ComputationGraph {
public:
    static ComputationGraph from_nodes(std::vector<Node> nodes);

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<int>& preds(int id) const { return nodes_[static_cast<std::size_t>(id)].preds; }
    const std::vector<int>& succs(int id) const { return succs_[static_cast<std::size_t>(id)]; }
    int input_node() const { return input_; }
    int output_node() const { return output_; }
    int find(const std::string& name) const;  // -1 when absent

    // Node owns parameters (Conv2D / DepthwiseConv2D / FullyConnected).
    bool is_parametric(int id) const;
    // Node picks its own output-channel count (Conv2D / FullyConnected);
    // depthwise mirrors its input width instead.
    bool picks_width(int id) const;

private:
    void validate() const;

    std::vector<Node> nodes_;
    std::vector<std::vector<int>> succs_;
    int input_ = -1;
    int output_ = -1;
};

// Deterministic topological order (smallest node id first among ready nodes).
std::vector<int> topological_order(const ComputationGraph& g);

// Parses the line-oriented model-spec format:
//   <name>: <Kind>(<args>) [<- <input>[, <input>]]
// Grammar details are documented in README.md; unknown kinds and unknown
// named fields are rejected with the offending line number.
ComputationGraph parse_model_spec(const std::string& text);

// Serializes a graph back to model-spec text (used by export).
std::string write_model_spec(const ComputationGraph& g);

// Base (unpruned) output shape of one node. For Flatten and Output the entry
// mirrors the producer's (c,h,w) so that `c` is always the prunable channel
// count of the node's mask group and c*h*w is the element count; their logical
// (flattened) shape is recovered from the node kind where needed.
struct Shape {
    int c = 0;
    int h = 0;
    int w = 0;
    long long elems() const { return static_cast<long long>(c) * h * w; }
};

class ShapeTable {
public:
    const Shape& operator[](int id) const { return shapes_[static_cast<std::size_t>(id)]; }
    int size() const { return static_cast<int>(shapes_.size()); }

    // floor(pi * channels_base) clamped to >= 1.
    static int effective_channels(int channels_base, double pi);

    std::vector<Shape> shapes_;
};

// infer_shapes computes every node's base shape from the Input node, using
// out = floor((in + 2*pad - kernel)/stride) + 1 for convolution and pooling.
ShapeTable infer_shapes(const ComputationGraph& g);

// Mask groups: connected components of "must share one pruning mask".
// The two producers feeding an Add (transitively through parameter-free
// layers and depthwise convolutions) share a group; parameter-free nodes and
// depthwise convolutions inherit their producer's group.
struct MaskGroupTable {
    std::vector<int> group_of;                // per node: group id of its output tensor
    std::vector<std::vector<int>> members;    // per group: parametric member node ids
    std::vector<int> channels;                // per group: base channel count (0 when unknown/fixed)
    std::vector<bool> prunable;               // false for the Input group and the classifier group

    int group_count() const { return static_cast<int>(members.size()); }
    std::vector<int> prunable_groups() const;
};

MaskGroupTable compute_mask_groups(const ComputationGraph& g);

}  // namespace tinyprune
