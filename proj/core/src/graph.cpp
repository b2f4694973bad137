#include "tinyprune/graph.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace tinyprune {

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "Input";
        case OpKind::Conv2D: return "Conv2D";
        case OpKind::DepthwiseConv2D: return "DepthwiseConv2D";
        case OpKind::FullyConnected: return "FullyConnected";
        case OpKind::ReLU: return "ReLU";
        case OpKind::MaxPool: return "MaxPool";
        case OpKind::AvgPoolGlobal: return "AvgPoolGlobal";
        case OpKind::Add: return "Add";
        case OpKind::Flatten: return "Flatten";
        case OpKind::Output: return "Output";
    }
    return "?";
}

namespace {

int expected_in_degree(OpKind k) {
    if (k == OpKind::Input) return 0;
    if (k == OpKind::Add) return 2;
    return 1;
}

}  // namespace

ComputationGraph ComputationGraph::from_nodes(std::vector<Node> nodes) {
    ComputationGraph g;
    g.nodes_ = std::move(nodes);
    for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
        g.nodes_[i].id = static_cast<int>(i);
    }
    g.succs_.assign(g.nodes_.size(), {});
    for (const Node& n : g.nodes_) {
        for (int p : n.preds) {
            if (p < 0 || p >= g.size()) throw GraphError("node '" + n.name + "': predecessor id out of range");
            g.succs_[static_cast<std::size_t>(p)].push_back(n.id);
        }
    }
    for (const Node& n : g.nodes_) {
        if (n.kind == OpKind::Input) {
            if (g.input_ != -1) throw GraphError("multiple input nodes");
            g.input_ = n.id;
        }
        if (n.kind == OpKind::Output) {
            if (g.output_ != -1) throw GraphError("multiple output nodes");
            g.output_ = n.id;
        }
    }
    if (g.input_ == -1) throw GraphError("no input node");
    if (g.output_ == -1) throw GraphError("no output node");
    g.validate();
    return g;
}

void ComputationGraph::validate() const {
    const int n = size();
    for (const Node& node : nodes_) {
        const int want = expected_in_degree(node.kind);
        if (static_cast<int>(node.preds.size()) != want) {
            throw GraphError("node '" + node.name + "' (" + op_kind_name(node.kind) + ") expects " +
                             std::to_string(want) + " input(s), got " + std::to_string(node.preds.size()));
        }
        switch (node.kind) {
            case OpKind::Input:
                if (node.attrs.in_c < 1 || node.attrs.in_h < 1 || node.attrs.in_w < 1)
                    throw GraphError("node '" + node.name + "': input dimensions must be >= 1");
                break;
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D:
            case OpKind::MaxPool:
                if (node.attrs.kernel_h < 1 || node.attrs.kernel_w < 1)
                    throw GraphError("node '" + node.name + "': kernel must be >= 1");
                if (node.attrs.stride < 1) throw GraphError("node '" + node.name + "': stride must be >= 1");
                if (node.attrs.pad < 0) throw GraphError("node '" + node.name + "': pad must be >= 0");
                if (node.kind == OpKind::Conv2D && node.attrs.out_channels < 1)
                    throw GraphError("node '" + node.name + "': out channels must be >= 1");
                break;
            case OpKind::FullyConnected:
                if (node.attrs.out_channels < 1)
                    throw GraphError("node '" + node.name + "': out units must be >= 1");
                break;
            default:
                break;
        }
    }

    // Acyclicity via Kahn.
    std::vector<int> indeg(static_cast<std::size_t>(n), 0);
    for (const Node& node : nodes_) indeg[static_cast<std::size_t>(node.id)] = static_cast<int>(node.preds.size());
    std::vector<int> stack;
    for (int i = 0; i < n; ++i)
        if (indeg[static_cast<std::size_t>(i)] == 0) stack.push_back(i);
    int seen = 0;
    while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        ++seen;
        for (int s : succs_[static_cast<std::size_t>(v)])
            if (--indeg[static_cast<std::size_t>(s)] == 0) stack.push_back(s);
    }
    if (seen != n) throw GraphError("graph contains a cycle");

    // Reachability: every node reachable from Input and reaching Output.
    auto flood = [&](int start, bool forward) {
        std::vector<char> mark(static_cast<std::size_t>(n), 0);
        std::vector<int> st{start};
        mark[static_cast<std::size_t>(start)] = 1;
        while (!st.empty()) {
            const int v = st.back();
            st.pop_back();
            const auto& nbrs = forward ? succs_[static_cast<std::size_t>(v)] : nodes_[static_cast<std::size_t>(v)].preds;
            for (int u : nbrs)
                if (!mark[static_cast<std::size_t>(u)]) {
                    mark[static_cast<std::size_t>(u)] = 1;
                    st.push_back(u);
                }
        }
        return mark;
    };
    const auto from_in = flood(input_, true);
    const auto to_out = flood(output_, false);
    for (int i = 0; i < n; ++i) {
        if (!from_in[static_cast<std::size_t>(i)])
            throw GraphError("node '" + nodes_[static_cast<std::size_t>(i)].name + "' unreachable from input");
        if (!to_out[static_cast<std::size_t>(i)])
            throw GraphError("node '" + nodes_[static_cast<std::size_t>(i)].name + "' does not reach output");
    }
}

int ComputationGraph::find(const std::string& name) const {
    for (const Node& n : nodes_)
        if (n.name == name) return n.id;
    return -1;
}

bool ComputationGraph::is_parametric(int id) const {
    const OpKind k = node(id).kind;
    return k == OpKind::Conv2D || k == OpKind::DepthwiseConv2D || k == OpKind::FullyConnected;
}

bool ComputationGraph::picks_width(int id) const {
    const OpKind k = node(id).kind;
    return k == OpKind::Conv2D || k == OpKind::FullyConnected;
}

// ---------------------------------------------------------------------------
// model-spec parser
// ---------------------------------------------------------------------------

namespace {

struct Arg {
    std::string key;    // empty for positional
    std::string value;  // empty for flags
};

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void fail(int line_no, const std::string& msg) {
    throw ParseError("model spec line " + std::to_string(line_no) + ": " + msg);
}

bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_') return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
    return true;
}

int parse_int(const std::string& s, int line_no, const std::string& what) {
    if (s.empty()) fail(line_no, "expected integer for " + what);
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(s, &pos);
    } catch (const std::exception&) {
        fail(line_no, "expected integer for " + what + ", got '" + s + "'");
    }
    if (pos != s.size()) fail(line_no, "expected integer for " + what + ", got '" + s + "'");
    return static_cast<int>(v);
}

// "3" or "3x3"
std::pair<int, int> parse_kernel(const std::string& s, int line_no) {
    const std::size_t x = s.find('x');
    if (x == std::string::npos) {
        const int k = parse_int(s, line_no, "kernel");
        return {k, k};
    }
    return {parse_int(s.substr(0, x), line_no, "kernel height"),
            parse_int(s.substr(x + 1), line_no, "kernel width")};
}

std::vector<Arg> parse_args(const std::string& inside, int line_no) {
    std::vector<Arg> out;
    std::string cur;
    std::stringstream ss(inside);
    while (std::getline(ss, cur, ',')) {
        cur = trim(cur);
        if (cur.empty()) fail(line_no, "empty argument");
        const std::size_t eq = cur.find('=');
        if (eq == std::string::npos) {
            out.push_back({"", cur});
        } else {
            out.push_back({trim(cur.substr(0, eq)), trim(cur.substr(eq + 1))});
        }
    }
    return out;
}

OpKind kind_from_string(const std::string& s, int line_no) {
    static const std::map<std::string, OpKind> table = {
        {"Input", OpKind::Input},
        {"Conv2D", OpKind::Conv2D},
        {"DepthwiseConv2D", OpKind::DepthwiseConv2D},
        {"FullyConnected", OpKind::FullyConnected},
        {"ReLU", OpKind::ReLU},
        {"MaxPool", OpKind::MaxPool},
        {"AvgPoolGlobal", OpKind::AvgPoolGlobal},
        {"Add", OpKind::Add},
        {"Flatten", OpKind::Flatten},
        {"Output", OpKind::Output},
    };
    const auto it = table.find(s);
    if (it == table.end()) fail(line_no, "unknown layer kind '" + s + "'");
    return it->second;
}

LayerAttrs parse_attrs(OpKind kind, std::vector<Arg> args, int line_no) {
    LayerAttrs a;
    std::vector<std::string> positional;
    bool stride_set = false;
    for (const Arg& arg : args) {
        if (arg.key.empty()) {
            if (arg.value == "bn") {
                if (kind != OpKind::Conv2D && kind != OpKind::DepthwiseConv2D)
                    fail(line_no, "'bn' is only valid on Conv2D/DepthwiseConv2D");
                a.has_bn = true;
            } else {
                positional.push_back(arg.value);
            }
        } else if (arg.key == "stride") {
            if (kind != OpKind::Conv2D && kind != OpKind::DepthwiseConv2D && kind != OpKind::MaxPool)
                fail(line_no, "'stride' is not valid for " + std::string(op_kind_name(kind)));
            a.stride = parse_int(arg.value, line_no, "stride");
            stride_set = true;
        } else if (arg.key == "pad") {
            if (kind != OpKind::Conv2D && kind != OpKind::DepthwiseConv2D)
                fail(line_no, "'pad' is not valid for " + std::string(op_kind_name(kind)));
            a.pad = parse_int(arg.value, line_no, "pad");
        } else {
            fail(line_no, "unknown field '" + arg.key + "'");
        }
    }

    auto want_positional = [&](std::size_t count, const char* desc) {
        if (positional.size() != count)
            fail(line_no, std::string(op_kind_name(kind)) + " expects arguments (" + desc + ")");
    };

    switch (kind) {
        case OpKind::Input:
            want_positional(3, "channels, height, width");
            a.in_c = parse_int(positional[0], line_no, "channels");
            a.in_h = parse_int(positional[1], line_no, "height");
            a.in_w = parse_int(positional[2], line_no, "width");
            break;
        case OpKind::Conv2D: {
            want_positional(2, "kernel, out_channels");
            const auto k = parse_kernel(positional[0], line_no);
            a.kernel_h = k.first;
            a.kernel_w = k.second;
            a.out_channels = parse_int(positional[1], line_no, "out_channels");
            break;
        }
        case OpKind::DepthwiseConv2D: {
            want_positional(1, "kernel");
            const auto k = parse_kernel(positional[0], line_no);
            a.kernel_h = k.first;
            a.kernel_w = k.second;
            break;
        }
        case OpKind::FullyConnected:
            want_positional(1, "units");
            a.out_channels = parse_int(positional[0], line_no, "units");
            break;
        case OpKind::MaxPool: {
            if (positional.empty() || positional.size() > 2)
                fail(line_no, "MaxPool expects arguments (kernel[, stride])");
            const auto k = parse_kernel(positional[0], line_no);
            a.kernel_h = k.first;
            a.kernel_w = k.second;
            if (positional.size() == 2) {
                if (stride_set) fail(line_no, "stride given twice");
                a.stride = parse_int(positional[1], line_no, "stride");
                stride_set = true;
            }
            if (!stride_set) a.stride = a.kernel_h;
            break;
        }
        case OpKind::ReLU:
        case OpKind::AvgPoolGlobal:
        case OpKind::Add:
        case OpKind::Flatten:
        case OpKind::Output:
            if (!positional.empty())
                fail(line_no, std::string(op_kind_name(kind)) + " takes no arguments");
            break;
    }
    return a;
}

}  // namespace

ComputationGraph parse_model_spec(const std::string& text) {
    std::vector<Node> nodes;
    std::unordered_map<std::string, int> by_name;

    std::stringstream ss(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        const std::size_t hash = raw.find('#');
        std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;

        const std::size_t colon = line.find(':');
        if (colon == std::string::npos) fail(line_no, "expected '<name>: <kind>(...)'");
        const std::string name = trim(line.substr(0, colon));
        if (!valid_name(name)) fail(line_no, "invalid node name '" + name + "'");
        if (by_name.count(name)) fail(line_no, "duplicate node name '" + name + "'");

        std::string rest = trim(line.substr(colon + 1));
        std::vector<int> preds;
        const std::size_t arrow = rest.find("<-");
        if (arrow != std::string::npos) {
            std::string inputs = trim(rest.substr(arrow + 2));
            rest = trim(rest.substr(0, arrow));
            if (inputs.empty()) fail(line_no, "empty input list after '<-'");
            std::stringstream is(inputs);
            std::string tok;
            while (std::getline(is, tok, ',')) {
                tok = trim(tok);
                const auto it = by_name.find(tok);
                if (it == by_name.end()) fail(line_no, "unknown input '" + tok + "' (inputs must be declared before use)");
                preds.push_back(it->second);
            }
        }

        std::string kind_str = rest;
        std::vector<Arg> args;
        const std::size_t paren = rest.find('(');
        if (paren != std::string::npos) {
            if (rest.back() != ')') fail(line_no, "missing ')'");
            kind_str = trim(rest.substr(0, paren));
            args = parse_args(rest.substr(paren + 1, rest.size() - paren - 2), line_no);
        }
        const OpKind kind = kind_from_string(kind_str, line_no);
        const int want = expected_in_degree(kind);
        if (static_cast<int>(preds.size()) != want)
            fail(line_no, std::string(op_kind_name(kind)) + " expects " + std::to_string(want) +
                              " input(s), got " + std::to_string(preds.size()));

        Node n;
        n.name = name;
        n.kind = kind;
        n.attrs = parse_attrs(kind, std::move(args), line_no);
        n.preds = std::move(preds);
        by_name.emplace(name, static_cast<int>(nodes.size()));
        nodes.push_back(std::move(n));
    }
    if (nodes.empty()) throw ParseError("model spec is empty");
    return ComputationGraph::from_nodes(std::move(nodes));
}

std::string write_model_spec(const ComputationGraph& g) {
    std::ostringstream os;
    for (const Node& n : g.nodes()) {
        os << n.name << ": " << op_kind_name(n.kind);
        switch (n.kind) {
            case OpKind::Input:
                os << "(" << n.attrs.in_c << ", " << n.attrs.in_h << ", " << n.attrs.in_w << ")";
                break;
            case OpKind::Conv2D:
                os << "(" << n.attrs.kernel_h << "x" << n.attrs.kernel_w << ", " << n.attrs.out_channels
                   << ", stride=" << n.attrs.stride << ", pad=" << n.attrs.pad;
                if (n.attrs.has_bn) os << ", bn";
                os << ")";
                break;
            case OpKind::DepthwiseConv2D:
                os << "(" << n.attrs.kernel_h << "x" << n.attrs.kernel_w << ", stride=" << n.attrs.stride
                   << ", pad=" << n.attrs.pad;
                if (n.attrs.has_bn) os << ", bn";
                os << ")";
                break;
            case OpKind::FullyConnected:
                os << "(" << n.attrs.out_channels << ")";
                break;
            case OpKind::MaxPool:
                os << "(" << n.attrs.kernel_h << "x" << n.attrs.kernel_w << ", stride=" << n.attrs.stride << ")";
                break;
            default:
                break;
        }
        if (!n.preds.empty()) {
            os << " <- ";
            for (std::size_t i = 0; i < n.preds.size(); ++i) {
                if (i) os << ", ";
                os << g.node(n.preds[i]).name;
            }
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// shape inference
// ---------------------------------------------------------------------------

namespace {

int conv_out_dim(int in, int pad, int kernel, int stride) {
    return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

std::vector<int> topological_order(const ComputationGraph& g) {
    // ids are not guaranteed pre-sorted for programmatically built graphs.
    std::vector<int> indeg(static_cast<std::size_t>(g.size()), 0);
    for (const Node& n : g.nodes()) indeg[static_cast<std::size_t>(n.id)] = static_cast<int>(n.preds.size());
    std::vector<int> order;
    std::vector<int> ready;
    for (int i = 0; i < g.size(); ++i)
        if (indeg[static_cast<std::size_t>(i)] == 0) ready.push_back(i);
    std::make_heap(ready.begin(), ready.end(), std::greater<>());
    while (!ready.empty()) {
        std::pop_heap(ready.begin(), ready.end(), std::greater<>());
        const int v = ready.back();
        ready.pop_back();
        order.push_back(v);
        for (int s : g.succs(v)) {
            if (--indeg[static_cast<std::size_t>(s)] == 0) {
                ready.push_back(s);
                std::push_heap(ready.begin(), ready.end(), std::greater<>());
            }
        }
    }
    return order;
}

int ShapeTable::effective_channels(int channels_base, double pi) {
    const int eff = static_cast<int>(std::floor(pi * channels_base));
    return std::max(1, std::min(eff, channels_base));
}

ShapeTable infer_shapes(const ComputationGraph& g) {
    ShapeTable t;
    t.shapes_.assign(static_cast<std::size_t>(g.size()), Shape{});
    for (int id : topological_order(g)) {
        const Node& n = g.node(id);
        Shape s;
        const Shape in = n.preds.empty() ? Shape{} : t[n.preds[0]];
        switch (n.kind) {
            case OpKind::Input:
                s = {n.attrs.in_c, n.attrs.in_h, n.attrs.in_w};
                break;
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D:
            case OpKind::MaxPool: {
                if (g.node(n.preds[0]).kind == OpKind::Flatten)
                    throw GraphError("node '" + n.name + "': spatial op cannot consume Flatten output");
                const int oh = conv_out_dim(in.h, n.attrs.pad, n.attrs.kernel_h, n.attrs.stride);
                const int ow = conv_out_dim(in.w, n.attrs.pad, n.attrs.kernel_w, n.attrs.stride);
                if (oh < 1 || ow < 1)
                    throw GraphError("node '" + n.name + "': non-positive spatial output " +
                                     std::to_string(oh) + "x" + std::to_string(ow));
                s = {n.kind == OpKind::Conv2D ? n.attrs.out_channels : in.c, oh, ow};
                break;
            }
            case OpKind::FullyConnected:
                s = {n.attrs.out_channels, 1, 1};
                break;
            case OpKind::ReLU:
                s = in;
                break;
            case OpKind::AvgPoolGlobal:
                s = {in.c, 1, 1};
                break;
            case OpKind::Add: {
                const Shape b = t[n.preds[1]];
                if (in.c != b.c || in.h != b.h || in.w != b.w)
                    throw GraphError("Add shape mismatch at '" + n.name + "': (" + std::to_string(in.c) + "," +
                                     std::to_string(in.h) + "," + std::to_string(in.w) + ") vs (" +
                                     std::to_string(b.c) + "," + std::to_string(b.h) + "," + std::to_string(b.w) + ")");
                s = in;
                break;
            }
            case OpKind::Flatten:
            case OpKind::Output:
                s = in;  // mirrors the producer; see header comment
                break;
        }
        t.shapes_[static_cast<std::size_t>(id)] = s;
    }
    return t;
}

// ---------------------------------------------------------------------------
// mask groups
// ---------------------------------------------------------------------------

namespace {

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int find(int x) {
        while (parent[static_cast<std::size_t>(x)] != x) {
            parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            x = parent[static_cast<std::size_t>(x)];
        }
        return x;
    }
    void merge(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    }
};

}  // namespace

std::vector<int> MaskGroupTable::prunable_groups() const {
    std::vector<int> out;
    for (int gi = 0; gi < group_count(); ++gi)
        if (prunable[static_cast<std::size_t>(gi)]) out.push_back(gi);
    return out;
}

MaskGroupTable compute_mask_groups(const ComputationGraph& g) {
    const int n = g.size();
    UnionFind uf(n);
    // rep[v] = representative node whose union-find class is the mask group of
    // v's output tensor.
    std::vector<int> rep(static_cast<std::size_t>(n), -1);
    for (int id : topological_order(g)) {
        const Node& node = g.node(id);
        switch (node.kind) {
            case OpKind::Input:
            case OpKind::Conv2D:
            case OpKind::FullyConnected:
                rep[static_cast<std::size_t>(id)] = id;
                break;
            case OpKind::Add: {
                const int a = rep[static_cast<std::size_t>(node.preds[0])];
                const int b = rep[static_cast<std::size_t>(node.preds[1])];
                uf.merge(a, b);
                rep[static_cast<std::size_t>(id)] = uf.find(a);
                break;
            }
            default:  // parameter-free layers and depthwise mirror their producer
                rep[static_cast<std::size_t>(id)] = rep[static_cast<std::size_t>(node.preds[0])];
                break;
        }
    }

    MaskGroupTable t;
    t.group_of.assign(static_cast<std::size_t>(n), -1);
    std::unordered_map<int, int> root_to_group;
    for (int id = 0; id < n; ++id) {
        const int root = uf.find(rep[static_cast<std::size_t>(id)]);
        auto it = root_to_group.find(root);
        if (it == root_to_group.end()) {
            it = root_to_group.emplace(root, static_cast<int>(t.members.size())).first;
            t.members.emplace_back();
            t.channels.push_back(0);
            t.prunable.push_back(true);
        }
        t.group_of[static_cast<std::size_t>(id)] = it->second;
    }

    for (int id = 0; id < n; ++id) {
        const int gi = t.group_of[static_cast<std::size_t>(id)];
        if (g.is_parametric(id)) t.members[static_cast<std::size_t>(gi)].push_back(id);
        if (g.picks_width(id) && t.channels[static_cast<std::size_t>(gi)] == 0)
            t.channels[static_cast<std::size_t>(gi)] = g.node(id).attrs.out_channels;
    }
    // Input channels are fixed; so is the tensor that feeds Output (the
    // classifier width is the class count). Groups without any width-picking
    // member have no free width either.
    for (int gi = 0; gi < t.group_count(); ++gi) {
        bool has_picker = false;
        for (int m : t.members[static_cast<std::size_t>(gi)]) has_picker |= g.picks_width(m);
        if (!has_picker) t.prunable[static_cast<std::size_t>(gi)] = false;
    }
    const int input_group = t.group_of[static_cast<std::size_t>(g.input_node())];
    t.prunable[static_cast<std::size_t>(input_group)] = false;
    t.channels[static_cast<std::size_t>(input_group)] = g.node(g.input_node()).attrs.in_c;
    t.prunable[static_cast<std::size_t>(t.group_of[static_cast<std::size_t>(g.output_node())])] = false;
    return t;
}

}  // namespace tinyprune
