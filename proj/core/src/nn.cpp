#include "tinyprune/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace tinyprune {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

inline std::size_t idx4(const Tensor& t, int n, int c, int h, int w) {
    return static_cast<std::size_t>(((static_cast<long long>(n) * t.dim(1) + c) * t.dim(2) + h) * t.dim(3) + w);
}

}  // namespace

ModelParams init_params(const ComputationGraph& g, const ShapeTable& shapes, Rng& rng) {
    ModelParams p;
    p.nodes.resize(static_cast<std::size_t>(g.size()));
    for (int id : topological_order(g)) {
        const Node& n = g.node(id);
        NodeParams& np = p.nodes[static_cast<std::size_t>(id)];
        if (n.kind == OpKind::Conv2D) {
            const int ci = shapes[n.preds[0]].c;
            const int co = n.attrs.out_channels;
            np.w = Tensor({co, ci, n.attrs.kernel_h, n.attrs.kernel_w});
            const double std = std::sqrt(2.0 / (static_cast<double>(ci) * n.attrs.kernel_h * n.attrs.kernel_w));
            for (auto& v : np.w.data) v = static_cast<float>(std * rng.gaussian());
            np.b = Tensor({co});
            np.has_bn = n.attrs.has_bn;
        } else if (n.kind == OpKind::DepthwiseConv2D) {
            const int c = shapes[id].c;
            np.w = Tensor({c, 1, n.attrs.kernel_h, n.attrs.kernel_w});
            const double std = std::sqrt(2.0 / (static_cast<double>(n.attrs.kernel_h) * n.attrs.kernel_w));
            for (auto& v : np.w.data) v = static_cast<float>(std * rng.gaussian());
            np.has_bn = n.attrs.has_bn;
        } else if (n.kind == OpKind::FullyConnected) {
            const Shape in = shapes[n.preds[0]];
            const int fin = static_cast<int>(in.elems());
            const int out = n.attrs.out_channels;
            np.w = Tensor({out, fin});
            const double std = std::sqrt(2.0 / static_cast<double>(fin));
            for (auto& v : np.w.data) v = static_cast<float>(std * rng.gaussian());
            np.b = Tensor({out});
        }
        if (np.has_bn) {
            const int c = shapes[id].c;
            np.gamma = Tensor({c});
            np.beta = Tensor({c});
            np.run_mean = Tensor({c});
            np.run_var = Tensor({c});
            std::fill(np.gamma.data.begin(), np.gamma.data.end(), 1.0f);
            std::fill(np.run_var.data.begin(), np.run_var.data.end(), 1.0f);
        }
    }
    return p;
}

ModelParams zeros_like(const ModelParams& p) {
    ModelParams z;
    z.nodes.resize(p.nodes.size());
    for (std::size_t i = 0; i < p.nodes.size(); ++i) {
        const NodeParams& src = p.nodes[i];
        NodeParams& dst = z.nodes[i];
        dst.has_bn = src.has_bn;
        if (!src.w.empty()) dst.w = Tensor(src.w.shape);
        if (!src.b.empty()) dst.b = Tensor(src.b.shape);
        if (!src.gamma.empty()) dst.gamma = Tensor(src.gamma.shape);
        if (!src.beta.empty()) dst.beta = Tensor(src.beta.shape);
    }
    return z;
}

MaskSet MaskSet::all_ones(const MaskGroupTable& groups) {
    MaskSet m;
    m.by_group.resize(static_cast<std::size_t>(groups.group_count()));
    for (int gi = 0; gi < groups.group_count(); ++gi)
        m.by_group[static_cast<std::size_t>(gi)].assign(
            static_cast<std::size_t>(std::max(1, groups.channels[static_cast<std::size_t>(gi)])), 1);
    return m;
}

int MaskSet::popcount(int group) const {
    int c = 0;
    for (auto v : by_group[static_cast<std::size_t>(group)]) c += v;
    return c;
}

long long MaskSet::total_channels() const {
    long long t = 0;
    for (const auto& g : by_group) t += static_cast<long long>(g.size());
    return t;
}

int MaskSet::churn(const MaskSet& prev) const {
    int c = 0;
    for (std::size_t g = 0; g < by_group.size(); ++g)
        for (std::size_t i = 0; i < by_group[g].size(); ++i)
            c += by_group[g][i] != prev.by_group[g][i];
    return c;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

void conv_forward(const Node& n, const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& out,
                  bool depthwise) {
    const int N = x.dim(0), Ci = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
    const int Co = out.dim(1), Ho = out.dim(2), Wo = out.dim(3);
    const int kh = n.attrs.kernel_h, kw = n.attrs.kernel_w, st = n.attrs.stride, pad = n.attrs.pad;
    for (int b = 0; b < N; ++b) {
        for (int co = 0; co < Co; ++co) {
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = bias ? (*bias)[static_cast<std::size_t>(co)] : 0.0;
                    const int ci_lo = depthwise ? co : 0;
                    const int ci_hi = depthwise ? co + 1 : Ci;
                    for (int ci = ci_lo; ci < ci_hi; ++ci) {
                        const int wc = depthwise ? 0 : ci;
                        for (int r = 0; r < kh; ++r) {
                            const int ih = oh * st - pad + r;
                            if (ih < 0 || ih >= Hi) continue;
                            for (int s = 0; s < kw; ++s) {
                                const int iw = ow * st - pad + s;
                                if (iw < 0 || iw >= Wi) continue;
                                acc += static_cast<double>(w[static_cast<std::size_t>(
                                           ((static_cast<long long>(co) * w.dim(1) + wc) * kh + r) * kw + s)]) *
                                       x[idx4(x, b, ci, ih, iw)];
                            }
                        }
                    }
                    out[idx4(out, b, co, oh, ow)] = static_cast<float>(acc);
                }
            }
        }
    }
}

ForwardCache forward_impl(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                          const ModelParams& params, ModelParams* mut, const MaskSet& masks,
                          const Tensor& batch, bool training) {
    ForwardCache cache;
    cache.training = training;
    cache.nodes.resize(static_cast<std::size_t>(g.size()));
    const int N = batch.dim(0);

    for (int id : topological_order(g)) {
        const Node& n = g.node(id);
        NodeCache& nc = cache.nodes[static_cast<std::size_t>(id)];
        const Shape sh = shapes[id];
        const Tensor* x = n.preds.empty() ? &batch : &cache.nodes[static_cast<std::size_t>(n.preds[0])].out;

        switch (n.kind) {
            case OpKind::Input: {
                if (batch.dim(1) != sh.c || batch.dim(2) != sh.h || batch.dim(3) != sh.w)
                    throw GraphError("batch shape does not match the Input node");
                nc.out = batch;
                break;
            }
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D: {
                const NodeParams& np = params.nodes[static_cast<std::size_t>(id)];
                Tensor lin({N, sh.c, sh.h, sh.w});
                conv_forward(n, *x, np.w, np.b.empty() ? nullptr : &np.b, lin,
                             n.kind == OpKind::DepthwiseConv2D);
                Tensor z;
                if (np.has_bn) {
                    const long long m = static_cast<long long>(N) * sh.h * sh.w;
                    nc.mean.assign(static_cast<std::size_t>(sh.c), 0.0f);
                    nc.var.assign(static_cast<std::size_t>(sh.c), 0.0f);
                    const std::uint8_t* mask = masks.by_group[static_cast<std::size_t>(
                                                                  groups.group_of[static_cast<std::size_t>(id)])]
                                                   .data();
                    for (int c = 0; c < sh.c; ++c) {
                        double sum = 0.0;
                        for (int b = 0; b < N; ++b)
                            for (int h = 0; h < sh.h; ++h)
                                for (int w = 0; w < sh.w; ++w) sum += lin[idx4(lin, b, c, h, w)];
                        const double mu = sum / static_cast<double>(m);
                        double sq = 0.0;
                        for (int b = 0; b < N; ++b)
                            for (int h = 0; h < sh.h; ++h)
                                for (int w = 0; w < sh.w; ++w) {
                                    const double d = lin[idx4(lin, b, c, h, w)] - mu;
                                    sq += d * d;
                                }
                        const double var = sq / static_cast<double>(m);
                        nc.mean[static_cast<std::size_t>(c)] = static_cast<float>(mu);
                        nc.var[static_cast<std::size_t>(c)] = static_cast<float>(var);
                        if (training && mut && mask[static_cast<std::size_t>(c)]) {
                            NodeParams& wp = mut->nodes[static_cast<std::size_t>(id)];
                            wp.run_mean[static_cast<std::size_t>(c)] = static_cast<float>(
                                (1.0 - kBnMomentum) * wp.run_mean[static_cast<std::size_t>(c)] + kBnMomentum * mu);
                            wp.run_var[static_cast<std::size_t>(c)] = static_cast<float>(
                                (1.0 - kBnMomentum) * wp.run_var[static_cast<std::size_t>(c)] + kBnMomentum * var);
                        }
                    }
                    z = Tensor({N, sh.c, sh.h, sh.w});
                    for (int c = 0; c < sh.c; ++c) {
                        const double mu = training ? nc.mean[static_cast<std::size_t>(c)]
                                                   : np.run_mean[static_cast<std::size_t>(c)];
                        const double var = training ? nc.var[static_cast<std::size_t>(c)]
                                                    : np.run_var[static_cast<std::size_t>(c)];
                        const double istd = 1.0 / std::sqrt(var + kBnEps);
                        const double ga = np.gamma[static_cast<std::size_t>(c)];
                        const double be = np.beta[static_cast<std::size_t>(c)];
                        for (int b = 0; b < N; ++b)
                            for (int h = 0; h < sh.h; ++h)
                                for (int w = 0; w < sh.w; ++w)
                                    z[idx4(z, b, c, h, w)] = static_cast<float>(
                                        ga * ((lin[idx4(lin, b, c, h, w)] - mu) * istd) + be);
                    }
                    nc.lin = std::move(lin);
                } else {
                    z = std::move(lin);
                }
                // channel mask
                const auto& m = masks.by_group[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(id)])];
                nc.out = z;
                for (int c = 0; c < sh.c; ++c) {
                    if (m[static_cast<std::size_t>(c)]) continue;
                    for (int b = 0; b < N; ++b)
                        for (int h = 0; h < sh.h; ++h)
                            for (int w = 0; w < sh.w; ++w) nc.out[idx4(nc.out, b, c, h, w)] = 0.0f;
                }
                nc.pre_mask = std::move(z);
                break;
            }
            case OpKind::FullyConnected: {
                const NodeParams& np = params.nodes[static_cast<std::size_t>(id)];
                const int fin = np.w.dim(1);
                const int out = np.w.dim(0);
                Tensor z({N, out});
                for (int b = 0; b < N; ++b) {
                    const float* row = &x->data[static_cast<std::size_t>(b) * static_cast<std::size_t>(fin)];
                    for (int o = 0; o < out; ++o) {
                        double acc = np.b[static_cast<std::size_t>(o)];
                        const float* wr = &np.w.data[static_cast<std::size_t>(o) * static_cast<std::size_t>(fin)];
                        for (int i = 0; i < fin; ++i) acc += static_cast<double>(wr[i]) * row[i];
                        z[static_cast<std::size_t>(b) * out + o] = static_cast<float>(acc);
                    }
                }
                const auto& m = masks.by_group[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(id)])];
                nc.out = z;
                for (int b = 0; b < N; ++b)
                    for (int o = 0; o < out; ++o)
                        if (!m[static_cast<std::size_t>(o)]) nc.out[static_cast<std::size_t>(b) * out + o] = 0.0f;
                nc.pre_mask = std::move(z);
                break;
            }
            case OpKind::ReLU: {
                nc.out = *x;
                for (auto& v : nc.out.data) v = v > 0.0f ? v : 0.0f;
                break;
            }
            case OpKind::MaxPool: {
                const int Hi = x->dim(2), Wi = x->dim(3);
                nc.out = Tensor({N, sh.c, sh.h, sh.w});
                nc.argmax.assign(nc.out.data.size(), -1);
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < sh.c; ++c)
                        for (int oh = 0; oh < sh.h; ++oh)
                            for (int ow = 0; ow < sh.w; ++ow) {
                                float best = -std::numeric_limits<float>::infinity();
                                int best_i = -1;
                                for (int r = 0; r < n.attrs.kernel_h; ++r) {
                                    const int ih = oh * n.attrs.stride + r;
                                    if (ih >= Hi) continue;
                                    for (int s = 0; s < n.attrs.kernel_w; ++s) {
                                        const int iw = ow * n.attrs.stride + s;
                                        if (iw >= Wi) continue;
                                        const std::size_t xi = idx4(*x, b, c, ih, iw);
                                        if ((*x)[xi] > best) {
                                            best = (*x)[xi];
                                            best_i = static_cast<int>(xi);
                                        }
                                    }
                                }
                                const std::size_t oi = idx4(nc.out, b, c, oh, ow);
                                nc.out[oi] = best;
                                nc.argmax[oi] = best_i;
                            }
                break;
            }
            case OpKind::AvgPoolGlobal: {
                const int Hi = x->dim(2), Wi = x->dim(3);
                nc.out = Tensor({N, sh.c, 1, 1});
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < sh.c; ++c) {
                        double acc = 0.0;
                        for (int h = 0; h < Hi; ++h)
                            for (int w = 0; w < Wi; ++w) acc += (*x)[idx4(*x, b, c, h, w)];
                        nc.out[idx4(nc.out, b, c, 0, 0)] = static_cast<float>(acc / (Hi * Wi));
                    }
                break;
            }
            case OpKind::Add: {
                const Tensor& y = cache.nodes[static_cast<std::size_t>(n.preds[1])].out;
                nc.out = *x;
                for (std::size_t i = 0; i < nc.out.data.size(); ++i) nc.out.data[i] += y.data[i];
                break;
            }
            case OpKind::Flatten: {
                nc.out = *x;
                nc.out.shape = {N, static_cast<int>(sh.elems())};
                break;
            }
            case OpKind::Output: {
                nc.out = *x;
                break;
            }
        }
#ifndef NDEBUG
        for (float v : nc.out.data) assert(std::isfinite(v));
#endif
    }
    return cache;
}

}  // namespace

ForwardCache forward(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                     ModelParams& params, const MaskSet& masks, const Tensor& batch) {
    return forward_impl(g, shapes, groups, params, &params, masks, batch, true);
}

ForwardCache eval_forward(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                          const ModelParams& params, const MaskSet& masks, const Tensor& batch) {
    return forward_impl(g, shapes, groups, params, nullptr, masks, batch, false);
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const int N = logits.dim(0), K = logits.dim(1);
    double loss = 0.0;
    for (int b = 0; b < N; ++b) {
        const float* row = &logits.data[static_cast<std::size_t>(b) * K];
        double mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
        loss += std::log(sum) - (row[labels[static_cast<std::size_t>(b)]] - mx);
    }
    return loss / N;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace {

void conv_backward(const Node& n, const Tensor& x, const Tensor& w, const Tensor& dlin, Tensor& dx,
                   Tensor& dw, Tensor* db, bool depthwise) {
    const int N = x.dim(0), Ci = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
    const int Co = dlin.dim(1), Ho = dlin.dim(2), Wo = dlin.dim(3);
    const int kh = n.attrs.kernel_h, kw = n.attrs.kernel_w, st = n.attrs.stride, pad = n.attrs.pad;
    for (int co = 0; co < Co; ++co) {
        if (db) {
            double acc = 0.0;
            for (int b = 0; b < N; ++b)
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) acc += dlin[idx4(dlin, b, co, oh, ow)];
            (*db)[static_cast<std::size_t>(co)] += static_cast<float>(acc);
        }
        const int ci_lo = depthwise ? co : 0;
        const int ci_hi = depthwise ? co + 1 : Ci;
        for (int ci = ci_lo; ci < ci_hi; ++ci) {
            const int wc = depthwise ? 0 : ci;
            for (int r = 0; r < kh; ++r) {
                for (int s = 0; s < kw; ++s) {
                    double acc = 0.0;
                    for (int b = 0; b < N; ++b)
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * st - pad + r;
                            if (ih < 0 || ih >= Hi) continue;
                            for (int ow = 0; ow < Wo; ++ow) {
                                const int iw = ow * st - pad + s;
                                if (iw < 0 || iw >= Wi) continue;
                                acc += static_cast<double>(dlin[idx4(dlin, b, co, oh, ow)]) *
                                       x[idx4(x, b, ci, ih, iw)];
                            }
                        }
                    dw[static_cast<std::size_t>(((static_cast<long long>(co) * dw.dim(1) + wc) * kh + r) * kw + s)] +=
                        static_cast<float>(acc);
                }
            }
        }
    }
    // dx
    for (int b = 0; b < N; ++b)
        for (int co = 0; co < Co; ++co) {
            const int ci_lo = depthwise ? co : 0;
            const int ci_hi = depthwise ? co + 1 : Ci;
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    const float d = dlin[idx4(dlin, b, co, oh, ow)];
                    if (d == 0.0f) continue;
                    for (int ci = ci_lo; ci < ci_hi; ++ci) {
                        const int wc = depthwise ? 0 : ci;
                        for (int r = 0; r < kh; ++r) {
                            const int ih = oh * st - pad + r;
                            if (ih < 0 || ih >= Hi) continue;
                            for (int s = 0; s < kw; ++s) {
                                const int iw = ow * st - pad + s;
                                if (iw < 0 || iw >= Wi) continue;
                                dx[idx4(dx, b, ci, ih, iw)] +=
                                    d * w[static_cast<std::size_t>(
                                            ((static_cast<long long>(co) * w.dim(1) + wc) * kh + r) * kw + s)];
                            }
                        }
                    }
                }
        }
}

}  // namespace

Gradients backward(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                   const ModelParams& params, const MaskSet& masks, const ForwardCache& cache,
                   const std::vector<int>& labels) {
    Gradients grads;
    grads.params = zeros_like(params);
    grads.mask_grads.resize(static_cast<std::size_t>(groups.group_count()));
    for (int gi = 0; gi < groups.group_count(); ++gi)
        grads.mask_grads[static_cast<std::size_t>(gi)].assign(
            masks.by_group[static_cast<std::size_t>(gi)].size(), 0.0);

    const Tensor& logits = cache.logits(g);
    const int N = logits.dim(0), K = logits.dim(1);
    grads.loss = cross_entropy(logits, labels);

    std::vector<Tensor> dbuf(static_cast<std::size_t>(g.size()));
    for (int id = 0; id < g.size(); ++id)
        dbuf[static_cast<std::size_t>(id)] = Tensor(cache.nodes[static_cast<std::size_t>(id)].out.shape);

    // d(losе)/d(logits) = (softmax - onehot)/N
    Tensor& dout = dbuf[static_cast<std::size_t>(g.output_node())];
    for (int b = 0; b < N; ++b) {
        const float* row = &logits.data[static_cast<std::size_t>(b) * K];
        double mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(row[k] - mx) / sum;
            dout[static_cast<std::size_t>(b) * K + k] =
                static_cast<float>((p - (k == labels[static_cast<std::size_t>(b)] ? 1.0 : 0.0)) / N);
        }
    }

    std::vector<int> order = topological_order(g);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int id = *it;
        const Node& n = g.node(id);
        const NodeCache& nc = cache.nodes[static_cast<std::size_t>(id)];
        Tensor& dy = dbuf[static_cast<std::size_t>(id)];
        const Shape sh = shapes[id];

        switch (n.kind) {
            case OpKind::Input:
                break;
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D: {
                const NodeParams& np = params.nodes[static_cast<std::size_t>(id)];
                NodeParams& gp = grads.params.nodes[static_cast<std::size_t>(id)];
                const int gi = groups.group_of[static_cast<std::size_t>(id)];
                const auto& m = masks.by_group[static_cast<std::size_t>(gi)];
                auto& mg = grads.mask_grads[static_cast<std::size_t>(gi)];
                // unmask: y = m * z
                Tensor dz(dy.shape);
                for (int c = 0; c < sh.c; ++c) {
                    double acc = 0.0;
                    for (int b = 0; b < N; ++b)
                        for (int h = 0; h < sh.h; ++h)
                            for (int w = 0; w < sh.w; ++w) {
                                const std::size_t i = idx4(dy, b, c, h, w);
                                acc += static_cast<double>(dy[i]) * nc.pre_mask[i];
                                dz[i] = m[static_cast<std::size_t>(c)] ? dy[i] : 0.0f;
                            }
                    mg[static_cast<std::size_t>(c)] += acc;
                }
                Tensor dlin;
                if (np.has_bn) {
                    dlin = Tensor(dz.shape);
                    const long long M = static_cast<long long>(N) * sh.h * sh.w;
                    for (int c = 0; c < sh.c; ++c) {
                        const double mu = cache.training ? nc.mean[static_cast<std::size_t>(c)]
                                                         : np.run_mean[static_cast<std::size_t>(c)];
                        const double var = cache.training ? nc.var[static_cast<std::size_t>(c)]
                                                          : np.run_var[static_cast<std::size_t>(c)];
                        const double istd = 1.0 / std::sqrt(var + kBnEps);
                        const double ga = np.gamma[static_cast<std::size_t>(c)];
                        double dgamma = 0.0, dbeta = 0.0;
                        for (int b = 0; b < N; ++b)
                            for (int h = 0; h < sh.h; ++h)
                                for (int w = 0; w < sh.w; ++w) {
                                    const std::size_t i = idx4(dz, b, c, h, w);
                                    const double xhat = (nc.lin[i] - mu) * istd;
                                    dgamma += static_cast<double>(dz[i]) * xhat;
                                    dbeta += dz[i];
                                }
                        gp.gamma[static_cast<std::size_t>(c)] += static_cast<float>(dgamma);
                        gp.beta[static_cast<std::size_t>(c)] += static_cast<float>(dbeta);
                        if (cache.training) {
                            double dvar = 0.0, dmean_a = 0.0, sum_centered = 0.0;
                            for (int b = 0; b < N; ++b)
                                for (int h = 0; h < sh.h; ++h)
                                    for (int w = 0; w < sh.w; ++w) {
                                        const std::size_t i = idx4(dz, b, c, h, w);
                                        const double dxhat = static_cast<double>(dz[i]) * ga;
                                        const double centered = nc.lin[i] - mu;
                                        dvar += dxhat * centered;
                                        dmean_a += dxhat;
                                        sum_centered += centered;
                                    }
                            dvar *= -0.5 * istd * istd * istd;
                            const double dmean =
                                -istd * dmean_a + dvar * (-2.0 / static_cast<double>(M)) * sum_centered;
                            for (int b = 0; b < N; ++b)
                                for (int h = 0; h < sh.h; ++h)
                                    for (int w = 0; w < sh.w; ++w) {
                                        const std::size_t i = idx4(dz, b, c, h, w);
                                        const double dxhat = static_cast<double>(dz[i]) * ga;
                                        dlin[i] = static_cast<float>(
                                            dxhat * istd +
                                            dvar * 2.0 * (nc.lin[i] - mu) / static_cast<double>(M) +
                                            dmean / static_cast<double>(M));
                                    }
                        } else {
                            for (int b = 0; b < N; ++b)
                                for (int h = 0; h < sh.h; ++h)
                                    for (int w = 0; w < sh.w; ++w) {
                                        const std::size_t i = idx4(dz, b, c, h, w);
                                        dlin[i] = static_cast<float>(static_cast<double>(dz[i]) * ga * istd);
                                    }
                        }
                    }
                } else {
                    dlin = std::move(dz);
                }
                const Tensor& x = n.preds.empty()
                                      ? cache.nodes[static_cast<std::size_t>(g.input_node())].out
                                      : cache.nodes[static_cast<std::size_t>(n.preds[0])].out;
                conv_backward(n, x, np.w, dlin, dbuf[static_cast<std::size_t>(n.preds[0])], gp.w,
                              gp.b.empty() ? nullptr : &gp.b, n.kind == OpKind::DepthwiseConv2D);
                break;
            }
            case OpKind::FullyConnected: {
                const NodeParams& np = params.nodes[static_cast<std::size_t>(id)];
                NodeParams& gp = grads.params.nodes[static_cast<std::size_t>(id)];
                const int gi = groups.group_of[static_cast<std::size_t>(id)];
                const auto& m = masks.by_group[static_cast<std::size_t>(gi)];
                auto& mg = grads.mask_grads[static_cast<std::size_t>(gi)];
                const int out = np.w.dim(0), fin = np.w.dim(1);
                const Tensor& x = cache.nodes[static_cast<std::size_t>(n.preds[0])].out;
                Tensor& dx = dbuf[static_cast<std::size_t>(n.preds[0])];
                for (int o = 0; o < out; ++o) {
                    double acc_mask = 0.0, acc_b = 0.0;
                    for (int b = 0; b < N; ++b) {
                        const std::size_t i = static_cast<std::size_t>(b) * out + o;
                        acc_mask += static_cast<double>(dy[i]) * nc.pre_mask[i];
                        const float d = m[static_cast<std::size_t>(o)] ? dy[i] : 0.0f;
                        if (d != 0.0f) {
                            acc_b += d;
                            const float* xr = &x.data[static_cast<std::size_t>(b) * fin];
                            float* wr = &gp.w.data[static_cast<std::size_t>(o) * fin];
                            const float* wv = &np.w.data[static_cast<std::size_t>(o) * fin];
                            float* dxr = &dx.data[static_cast<std::size_t>(b) * fin];
                            for (int i2 = 0; i2 < fin; ++i2) {
                                wr[i2] += d * xr[i2];
                                dxr[i2] += d * wv[i2];
                            }
                        }
                    }
                    mg[static_cast<std::size_t>(o)] += acc_mask;
                    gp.b[static_cast<std::size_t>(o)] += static_cast<float>(acc_b);
                }
                break;
            }
            case OpKind::ReLU: {
                Tensor& dx = dbuf[static_cast<std::size_t>(n.preds[0])];
                for (std::size_t i = 0; i < dy.data.size(); ++i)
                    if (nc.out[i] > 0.0f) dx[i] += dy[i];
                break;
            }
            case OpKind::MaxPool: {
                Tensor& dx = dbuf[static_cast<std::size_t>(n.preds[0])];
                for (std::size_t i = 0; i < dy.data.size(); ++i)
                    if (nc.argmax[i] >= 0) dx[static_cast<std::size_t>(nc.argmax[i])] += dy[i];
                break;
            }
            case OpKind::AvgPoolGlobal: {
                Tensor& dx = dbuf[static_cast<std::size_t>(n.preds[0])];
                const int Hi = dx.dim(2), Wi = dx.dim(3);
                const float scale = 1.0f / static_cast<float>(Hi * Wi);
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < sh.c; ++c) {
                        const float d = dy[idx4(dy, b, c, 0, 0)] * scale;
                        for (int h = 0; h < Hi; ++h)
                            for (int w = 0; w < Wi; ++w) dx[idx4(dx, b, c, h, w)] += d;
                    }
                break;
            }
            case OpKind::Add: {
                for (int p : n.preds) {
                    Tensor& dx = dbuf[static_cast<std::size_t>(p)];
                    for (std::size_t i = 0; i < dy.data.size(); ++i) dx[i] += dy[i];
                }
                break;
            }
            case OpKind::Flatten:
            case OpKind::Output: {
                Tensor& dx = dbuf[static_cast<std::size_t>(n.preds[0])];
                for (std::size_t i = 0; i < dy.data.size(); ++i) dx[i] += dy[i];
                break;
            }
        }
    }
    return grads;
}

void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& momenta, double lr,
              double momentum, double weight_decay) {
    for (std::size_t ni = 0; ni < params.nodes.size(); ++ni) {
        auto update = [&](Tensor& th, const Tensor& gr, Tensor& mo, bool is_weight) {
            if (th.empty()) return;
            const double wd = is_weight ? weight_decay : 0.0;
            for (std::size_t i = 0; i < th.data.size(); ++i) {
                const double g = gr.data[i] + wd * th.data[i];
                const double v = momentum * mo.data[i] + g;
                mo.data[i] = static_cast<float>(v);
                th.data[i] = static_cast<float>(th.data[i] - lr * v);
            }
        };
        update(params.nodes[ni].w, grads.nodes[ni].w, momenta.nodes[ni].w, true);
        update(params.nodes[ni].b, grads.nodes[ni].b, momenta.nodes[ni].b, false);
        update(params.nodes[ni].gamma, grads.nodes[ni].gamma, momenta.nodes[ni].gamma, false);
        update(params.nodes[ni].beta, grads.nodes[ni].beta, momenta.nodes[ni].beta, false);
    }
}

// ---------------------------------------------------------------------------
// salience / materialize / quantize
// ---------------------------------------------------------------------------

std::vector<double> salience(const ComputationGraph& g, const MaskGroupTable& groups,
                             const ModelParams& params, int node) {
    const Node& n = g.node(node);
    if (n.kind == OpKind::DepthwiseConv2D)
        return group_salience(g, groups, params, groups.group_of[static_cast<std::size_t>(node)]);
    if (n.kind != OpKind::Conv2D && n.kind != OpKind::FullyConnected)
        throw Error("salience: node '" + n.name + "' is not prunable");
    const NodeParams& np = params.nodes[static_cast<std::size_t>(node)];
    const int c = np.w.dim(0);
    std::vector<double> s(static_cast<std::size_t>(c), 0.0);
    if (np.has_bn) {
        for (int i = 0; i < c; ++i) s[static_cast<std::size_t>(i)] = std::abs(np.gamma[static_cast<std::size_t>(i)]);
    } else {
        const long long row = np.w.numel() / c;
        for (int i = 0; i < c; ++i) {
            double acc = 0.0;
            for (long long j = 0; j < row; ++j) {
                const double v = np.w.data[static_cast<std::size_t>(i * row + j)];
                acc += v * v;
            }
            s[static_cast<std::size_t>(i)] = std::sqrt(acc);
        }
    }
    return s;
}

std::vector<double> group_salience(const ComputationGraph& g, const MaskGroupTable& groups,
                                   const ModelParams& params, int group) {
    std::vector<double> best;
    for (int m : groups.members[static_cast<std::size_t>(group)]) {
        if (!g.picks_width(m)) continue;  // depthwise mirrors; no salience of its own
        std::vector<double> s = salience(g, groups, params, m);
        if (best.empty()) {
            best = std::move(s);
        } else {
            for (std::size_t i = 0; i < best.size(); ++i) best[i] = std::max(best[i], s[i]);
        }
    }
    if (best.empty()) throw Error("group_salience: group has no width-picking member");
    return best;
}

MaterializedModel materialize_pruned(const ComputationGraph& g, const ShapeTable& shapes,
                                     const MaskGroupTable& groups, const ModelParams& params,
                                     const MaskSet& masks) {
    const int n = g.size();
    // surviving channel index lists per group
    std::vector<std::vector<int>> keep(static_cast<std::size_t>(groups.group_count()));
    for (int gi = 0; gi < groups.group_count(); ++gi) {
        const auto& m = masks.by_group[static_cast<std::size_t>(gi)];
        for (std::size_t c = 0; c < m.size(); ++c)
            if (m[c]) keep[static_cast<std::size_t>(gi)].push_back(static_cast<int>(c));
    }

    std::vector<Node> new_nodes = g.nodes();
    for (Node& node : new_nodes) {
        if (g.picks_width(node.id))
            node.attrs.out_channels = static_cast<int>(
                keep[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(node.id)])].size());
    }

    MaterializedModel out{ComputationGraph::from_nodes(std::move(new_nodes)), ModelParams{}};
    out.params.nodes.resize(static_cast<std::size_t>(n));

    auto slice1 = [](const Tensor& t, const std::vector<int>& rows) {
        Tensor r({static_cast<int>(rows.size())});
        for (std::size_t i = 0; i < rows.size(); ++i) r.data[i] = t.data[static_cast<std::size_t>(rows[i])];
        return r;
    };

    for (int id = 0; id < n; ++id) {
        const Node& node = g.node(id);
        if (!g.is_parametric(id)) continue;
        const NodeParams& src = params.nodes[static_cast<std::size_t>(id)];
        NodeParams& dst = out.params.nodes[static_cast<std::size_t>(id)];
        dst.has_bn = src.has_bn;
        const auto& out_keep = keep[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(id)])];

        if (node.kind == OpKind::Conv2D || node.kind == OpKind::DepthwiseConv2D) {
            const int kh = node.attrs.kernel_h, kw = node.attrs.kernel_w;
            std::vector<int> in_keep;
            if (node.kind == OpKind::Conv2D) {
                in_keep = keep[static_cast<std::size_t>(
                    groups.group_of[static_cast<std::size_t>(node.preds[0])])];
            } else {
                in_keep = {0};  // depthwise weight has a single input slot
            }
            dst.w = Tensor({static_cast<int>(out_keep.size()), static_cast<int>(in_keep.size()), kh, kw});
            for (std::size_t co = 0; co < out_keep.size(); ++co)
                for (std::size_t ci = 0; ci < in_keep.size(); ++ci)
                    for (int r = 0; r < kh; ++r)
                        for (int s = 0; s < kw; ++s)
                            dst.w.data[((co * in_keep.size() + ci) * kh + static_cast<std::size_t>(r)) * kw +
                                       static_cast<std::size_t>(s)] =
                                src.w.data[static_cast<std::size_t>(
                                    ((static_cast<long long>(out_keep[co]) * src.w.dim(1) + in_keep[ci]) * kh + r) *
                                        kw +
                                    s)];
            if (!src.b.empty()) dst.b = slice1(src.b, out_keep);
        } else {  // FullyConnected
            const Shape in_sh = shapes[node.preds[0]];
            const auto& in_keep =
                keep[static_cast<std::size_t>(groups.group_of[static_cast<std::size_t>(node.preds[0])])];
            const int spatial = in_sh.h * in_sh.w;
            const int fin_new = static_cast<int>(in_keep.size()) * spatial;
            dst.w = Tensor({static_cast<int>(out_keep.size()), fin_new});
            for (std::size_t o = 0; o < out_keep.size(); ++o) {
                const float* srow = &src.w.data[static_cast<std::size_t>(out_keep[o]) *
                                                static_cast<std::size_t>(src.w.dim(1))];
                float* drow = &dst.w.data[o * static_cast<std::size_t>(fin_new)];
                int f = 0;
                for (int ci : in_keep)
                    for (int sp = 0; sp < spatial; ++sp) drow[f++] = srow[ci * spatial + sp];
            }
            dst.b = slice1(src.b, out_keep);
        }
        if (!src.gamma.empty()) dst.gamma = slice1(src.gamma, out_keep);
        if (!src.beta.empty()) dst.beta = slice1(src.beta, out_keep);
        if (!src.run_mean.empty()) dst.run_mean = slice1(src.run_mean, out_keep);
        if (!src.run_var.empty()) dst.run_var = slice1(src.run_var, out_keep);
    }
    return out;
}

QuantizedParams affine_quantize_weights(const ModelParams& params) {
    QuantizedParams out;
    auto quantize = [&](int node, const char* name, const Tensor& t) {
        if (t.empty()) return;
        QuantTensor q;
        q.shape = t.shape;
        q.q.resize(t.data.size());
        float mn = t.data[0], mx = t.data[0];
        for (float v : t.data) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        if (mx > mn) {
            q.scale = (static_cast<double>(mx) - mn) / 255.0;
            q.zero_point = -128 - static_cast<int>(std::lround(mn / q.scale));
        } else {  // constant tensor: scale would be 0
            q.scale = 1.0;
            q.zero_point = -static_cast<int>(std::lround(mn));
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const long v = std::lround(t.data[i] / q.scale) + q.zero_point;
            q.q[i] = static_cast<std::int8_t>(std::clamp(v, -128l, 127l));
        }
        out.tensors.push_back({node, name, std::move(q)});
    };
    for (std::size_t id = 0; id < params.nodes.size(); ++id) {
        const NodeParams& np = params.nodes[id];
        quantize(static_cast<int>(id), "w", np.w);
        quantize(static_cast<int>(id), "b", np.b);
        quantize(static_cast<int>(id), "gamma", np.gamma);
        quantize(static_cast<int>(id), "beta", np.beta);
    }
    return out;
}

double evaluate_accuracy(const ComputationGraph& g, const ShapeTable& shapes, const MaskGroupTable& groups,
                         const ModelParams& params, const MaskSet& masks, const Tensor& images,
                         const std::vector<int>& labels, int batch_size) {
    const int n = images.dim(0);
    const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
    long long correct = 0;
    for (int start = 0; start < n; start += batch_size) {
        const int bs = std::min(batch_size, n - start);
        Tensor batch({bs, C, H, W});
        std::memcpy(batch.data.data(), &images.data[static_cast<std::size_t>(start) * C * H * W],
                    batch.data.size() * sizeof(float));
        const ForwardCache cache = eval_forward(g, shapes, groups, params, masks, batch);
        const Tensor& logits = cache.logits(g);
        const int K = logits.dim(1);
        for (int b = 0; b < bs; ++b) {
            int arg = 0;
            for (int k = 1; k < K; ++k)
                if (logits[static_cast<std::size_t>(b) * K + k] > logits[static_cast<std::size_t>(b) * K + arg])
                    arg = k;
            correct += arg == labels[static_cast<std::size_t>(start + b)];
        }
    }
    return static_cast<double>(correct) / n;
}

}  // namespace tinyprune
