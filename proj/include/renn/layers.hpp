// layers.hpp — the six rotation-equivariant layer operations.
//
// Each operation O commutes with the key rotation: O(R ∘ f) = R ∘ O(f).
//   conv       per-component matrix multiply, no bias
//   relu       element scaled by ||f_v|| / max(||f_v||, C)
//   batchnorm  element divided by sqrt(mean over batch of ||f_v||^2 + eps),
//              no centering, no learned affine
//   avg/max    pooling over consecutive element windows; max selects the
//              whole element with the largest norm (ties: lowest index)
//   dropout    whole d-ary elements dropped, survivors scaled 1/(1-rate)
//   skip       f + inner(f)
//
// Forward functions are pure; mask-producing variants return the masks a
// backward pass needs.  Stack application runs on batches so batchnorm
// sees its statistics axis; a single tensor is a batch of one.

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "renn/core.hpp"
#include "renn/linalg.hpp"
#include "renn/tensor.hpp"

namespace renn {

enum class LayerKind { Conv, Relu, BatchNorm, AvgPool, MaxPool, Dropout, Skip };

enum class PoolMode { Avg, Max };

struct Layer {
    LayerKind kind = LayerKind::Relu;
    Matrix weights;                // conv: out x in, no bias term
    double clamp = 1.0;            // relu C
    double eps = 1e-5;             // batchnorm
    double rate = 0.0;             // dropout probability
    std::size_t window = 2;        // pooling receptive field
    std::vector<Layer> inner;      // skip body

    static Layer conv(Matrix w) {
        if (!w.all_finite()) throw ShapeError("conv: non-finite weight");
        Layer l;
        l.kind = LayerKind::Conv;
        l.weights = std::move(w);
        return l;
    }
    static Layer relu(double c) {
        if (!(c > 0.0)) throw ShapeError("relu: clamp must be positive");
        Layer l;
        l.kind = LayerKind::Relu;
        l.clamp = c;
        return l;
    }
    static Layer batchnorm(double eps) {
        if (eps < 0.0) throw ShapeError("batchnorm: eps must be nonnegative");
        Layer l;
        l.kind = LayerKind::BatchNorm;
        l.eps = eps;
        return l;
    }
    static Layer avgpool(std::size_t window) {
        if (window == 0) throw ShapeError("avgpool: window must be positive");
        Layer l;
        l.kind = LayerKind::AvgPool;
        l.window = window;
        return l;
    }
    static Layer maxpool(std::size_t window) {
        if (window == 0) throw ShapeError("maxpool: window must be positive");
        Layer l;
        l.kind = LayerKind::MaxPool;
        l.window = window;
        return l;
    }
    static Layer dropout(double rate) {
        if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout: rate must be in [0,1)");
        Layer l;
        l.kind = LayerKind::Dropout;
        l.rate = rate;
        return l;
    }
    static Layer skip(std::vector<Layer> inner_stack) {
        Layer l;
        l.kind = LayerKind::Skip;
        l.inner = std::move(inner_stack);
        return l;
    }
};

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

inline DAryTensor conv_forward(const DAryTensor& f, const Matrix& w) {
    if (w.cols() != f.n()) throw ShapeError("conv_forward: weight columns must equal element count");
    if (!w.all_finite()) throw ShapeError("conv_forward: non-finite weight");
    const std::size_t d = f.d();
    DAryTensor out(w.rows(), d);
    for (std::size_t u = 0; u < w.rows(); ++u) {
        auto dst = out.element(u);
        for (std::size_t v = 0; v < f.n(); ++v) {
            const double wv = w(u, v);
            if (wv == 0.0) continue;
            const auto src = f.element(v);
            for (std::size_t k = 0; k < d; ++k) dst[k] += wv * src[k];
        }
    }
    return out;
}

inline DAryTensor relu_forward(const DAryTensor& f, double clamp) {
    if (!(clamp > 0.0)) throw ShapeError("relu_forward: clamp must be positive");
    DAryTensor out = f;
    for (std::size_t v = 0; v < f.n(); ++v) {
        const double r = f.element_norm(v);
        const double factor = r / std::max(r, clamp); // 0 when r == 0
        for (double& x : out.element(v)) x *= factor;
    }
    return out;
}

inline BatchOfDAry batchnorm_forward(const BatchOfDAry& batch, double eps) {
    if (eps < 0.0) throw ShapeError("batchnorm_forward: eps must be nonnegative");
    const std::size_t k = batch.size();
    const std::size_t n = batch.n();
    BatchOfDAry out = batch;
    for (std::size_t v = 0; v < n; ++v) {
        double mean_sq = 0.0;
        for (std::size_t s = 0; s < k; ++s) {
            const double r = batch.tensors[s].element_norm(v);
            mean_sq += r * r;
        }
        mean_sq /= static_cast<double>(k);
        const double divisor_sq = mean_sq + eps;
        // All-zero element column with eps == 0 stays zero.
        const double scale = divisor_sq > 0.0 ? 1.0 / std::sqrt(divisor_sq) : 0.0;
        for (std::size_t s = 0; s < k; ++s)
            for (double& x : out.tensors[s].element(v)) x *= scale;
    }
    return out;
}

struct MaxPoolResult {
    DAryTensor output;
    std::vector<std::uint32_t> selected; // absolute input index per window
};

inline MaxPoolResult maxpool_forward_masked(const DAryTensor& f, std::size_t window) {
    if (window == 0 || f.n() % window != 0)
        throw ShapeError("maxpool_forward: element count not divisible by window");
    const std::size_t n_out = f.n() / window;
    MaxPoolResult res{DAryTensor(n_out, f.d()), {}};
    res.selected.resize(n_out);
    for (std::size_t u = 0; u < n_out; ++u) {
        std::size_t best = u * window;
        double best_norm = f.element_norm(best);
        for (std::size_t i = 1; i < window; ++i) {
            const std::size_t v = u * window + i;
            const double r = f.element_norm(v);
            if (r > best_norm) { // strict: ties keep the lowest index
                best = v;
                best_norm = r;
            }
        }
        res.selected[u] = static_cast<std::uint32_t>(best);
        auto dst = res.output.element(u);
        const auto src = f.element(best);
        for (std::size_t c = 0; c < f.d(); ++c) dst[c] = src[c];
    }
    return res;
}

inline DAryTensor pool_forward(const DAryTensor& f, std::size_t window, PoolMode mode) {
    if (window == 0 || f.n() % window != 0)
        throw ShapeError("pool_forward: element count not divisible by window");
    if (mode == PoolMode::Max) return maxpool_forward_masked(f, window).output;
    const std::size_t n_out = f.n() / window;
    DAryTensor out(n_out, f.d());
    for (std::size_t u = 0; u < n_out; ++u) {
        auto dst = out.element(u);
        for (std::size_t i = 0; i < window; ++i) {
            const auto src = f.element(u * window + i);
            for (std::size_t c = 0; c < f.d(); ++c) dst[c] += src[c];
        }
        for (std::size_t c = 0; c < f.d(); ++c) dst[c] /= static_cast<double>(window);
    }
    return out;
}

// Per-element keep flags from (seed, element index).
inline std::vector<std::uint8_t> dropout_mask(std::size_t n, double rate, Seed seed) {
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout_mask: rate must be in [0,1)");
    std::vector<std::uint8_t> keep(n, 1);
    if (rate == 0.0) return keep;
    CounterRng rng(seed);
    for (std::size_t v = 0; v < n; ++v) keep[v] = rng.stream(v).next_unit() >= rate ? 1 : 0;
    return keep;
}

struct DropoutResult {
    DAryTensor output;
    std::vector<std::uint8_t> keep;
};

inline DropoutResult dropout_forward_masked(const DAryTensor& f, double rate, Seed seed,
                                            bool training) {
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout_forward: rate must be in [0,1)");
    DropoutResult res{f, std::vector<std::uint8_t>(f.n(), 1)};
    if (!training || rate == 0.0) return res;
    res.keep = dropout_mask(f.n(), rate, seed);
    const double scale = 1.0 / (1.0 - rate);
    for (std::size_t v = 0; v < f.n(); ++v) {
        auto e = res.output.element(v);
        for (double& x : e) x = res.keep[v] ? x * scale : 0.0;
    }
    return res;
}

inline DAryTensor dropout_forward(const DAryTensor& f, double rate, Seed seed, bool training) {
    return dropout_forward_masked(f, rate, seed, training).output;
}

// ---------------------------------------------------------------------------
// Stack evaluation
// ---------------------------------------------------------------------------

struct EvalContext {
    Seed seed{0};
    bool training = false;
};

struct LayerTrace {
    BatchOfDAry input;
    std::vector<std::vector<std::uint32_t>> selected; // maxpool, per sample
    std::vector<std::vector<std::uint8_t>> keep;      // dropout, per sample
    std::vector<LayerTrace> inner;                    // skip body
};

// Conv weight gradients for a stack, mirroring its nesting.
struct StackGrads {
    std::vector<Matrix> weight;     // one slot per layer; empty unless conv
    std::vector<StackGrads> inner;  // one slot per layer; used by skip

    static StackGrads zeros_like(const std::vector<Layer>& stack) {
        StackGrads g;
        g.weight.reserve(stack.size());
        g.inner.resize(stack.size());
        for (std::size_t i = 0; i < stack.size(); ++i) {
            if (stack[i].kind == LayerKind::Conv)
                g.weight.emplace_back(stack[i].weights.rows(), stack[i].weights.cols());
            else
                g.weight.emplace_back();
            if (stack[i].kind == LayerKind::Skip) g.inner[i] = zeros_like(stack[i].inner);
        }
        return g;
    }

    void add_scaled(const StackGrads& other, double factor) {
        for (std::size_t i = 0; i < weight.size(); ++i)
            for (std::size_t j = 0; j < weight[i].data().size(); ++j)
                weight[i].data()[j] += factor * other.weight[i].data()[j];
        for (std::size_t i = 0; i < inner.size(); ++i) inner[i].add_scaled(other.inner[i], factor);
    }
};

// Copies through the window winners recorded by an earlier forward pass.
inline DAryTensor maxpool_apply_mask(const DAryTensor& f, std::size_t window,
                                     const std::vector<std::uint32_t>& selected) {
    if (window == 0 || f.n() % window != 0 || selected.size() != f.n() / window)
        throw ShapeError("maxpool_apply_mask: mask does not match shape");
    DAryTensor out(selected.size(), f.d());
    for (std::size_t u = 0; u < selected.size(); ++u) {
        if (selected[u] >= f.n()) throw ShapeError("maxpool_apply_mask: index out of range");
        const auto src = f.element(selected[u]);
        auto dst = out.element(u);
        for (std::size_t c = 0; c < f.d(); ++c) dst[c] = src[c];
    }
    return out;
}

namespace detail {

inline BatchOfDAry stack_forward_impl(const std::vector<Layer>& stack, BatchOfDAry f,
                                      const EvalContext& ctx, std::uint64_t& layer_counter,
                                      std::vector<LayerTrace>* trace,
                                      const std::vector<LayerTrace>* replay);

inline BatchOfDAry layer_forward_impl(const Layer& layer, const BatchOfDAry& f,
                                      const EvalContext& ctx, std::uint64_t& layer_counter,
                                      LayerTrace* trace, const LayerTrace* replay) {
    const std::uint64_t layer_id = layer_counter++;
    const std::size_t k = f.size();
    if (trace) trace->input = f;
    switch (layer.kind) {
        case LayerKind::Conv: {
            std::vector<DAryTensor> out;
            out.reserve(k);
            for (const auto& t : f.tensors) out.push_back(conv_forward(t, layer.weights));
            return BatchOfDAry(std::move(out));
        }
        case LayerKind::Relu: {
            std::vector<DAryTensor> out;
            out.reserve(k);
            for (const auto& t : f.tensors) out.push_back(relu_forward(t, layer.clamp));
            return BatchOfDAry(std::move(out));
        }
        case LayerKind::BatchNorm:
            return batchnorm_forward(f, layer.eps);
        case LayerKind::AvgPool: {
            std::vector<DAryTensor> out;
            out.reserve(k);
            for (const auto& t : f.tensors) out.push_back(pool_forward(t, layer.window, PoolMode::Avg));
            return BatchOfDAry(std::move(out));
        }
        case LayerKind::MaxPool: {
            std::vector<DAryTensor> out;
            out.reserve(k);
            if (trace) trace->selected.resize(k);
            for (std::size_t s = 0; s < k; ++s) {
                if (replay) {
                    if (replay->selected.size() != k)
                        throw ShapeError("stack_forward: replay mask does not match batch");
                    if (trace) trace->selected[s] = replay->selected[s];
                    out.push_back(maxpool_apply_mask(f.tensors[s], layer.window, replay->selected[s]));
                    continue;
                }
                auto res = maxpool_forward_masked(f.tensors[s], layer.window);
                if (trace) trace->selected[s] = std::move(res.selected);
                out.push_back(std::move(res.output));
            }
            return BatchOfDAry(std::move(out));
        }
        case LayerKind::Dropout: {
            const Seed layer_seed = derive_seed(ctx.seed, layer_id);
            // keep masks are recorded only when dropout actually fired;
            // an empty trace marks the layer as identity for backward
            const bool active = ctx.training && layer.rate > 0.0;
            std::vector<DAryTensor> out;
            out.reserve(k);
            if (trace && active) trace->keep.resize(k);
            for (std::size_t s = 0; s < k; ++s) {
                auto res = dropout_forward_masked(f.tensors[s], layer.rate, derive_seed(layer_seed, s),
                                                  ctx.training);
                if (trace && active) trace->keep[s] = std::move(res.keep);
                out.push_back(std::move(res.output));
            }
            return BatchOfDAry(std::move(out));
        }
        case LayerKind::Skip: {
            BatchOfDAry branch =
                stack_forward_impl(layer.inner, f, ctx, layer_counter,
                                   trace ? &trace->inner : nullptr, replay ? &replay->inner : nullptr);
            if (branch.n() != f.n() || branch.d() != f.d())
                throw ShapeError("skip: inner stack must preserve shape");
            BatchOfDAry out = f;
            for (std::size_t s = 0; s < k; ++s)
                for (std::size_t i = 0; i < out.tensors[s].data().size(); ++i)
                    out.tensors[s].data()[i] += branch.tensors[s].data()[i];
            return out;
        }
    }
    throw ShapeError("layer_forward: unknown layer kind");
}

inline BatchOfDAry stack_forward_impl(const std::vector<Layer>& stack, BatchOfDAry f,
                                      const EvalContext& ctx, std::uint64_t& layer_counter,
                                      std::vector<LayerTrace>* trace,
                                      const std::vector<LayerTrace>* replay) {
    if (trace) trace->resize(stack.size());
    if (replay && replay->size() != stack.size())
        throw ShapeError("stack_forward: replay trace does not match stack");
    for (std::size_t i = 0; i < stack.size(); ++i)
        f = layer_forward_impl(stack[i], f, ctx, layer_counter, trace ? &(*trace)[i] : nullptr,
                               replay ? &(*replay)[i] : nullptr);
    return f;
}

} // namespace detail

// `trace` records inputs and masks for a later backward pass; `replay`
// reuses the selection masks of an earlier pass instead of recomputing
// them, which pins the pooling mask when comparing the two sides of the
// equivariance identity.
inline BatchOfDAry stack_forward(const std::vector<Layer>& stack, const BatchOfDAry& f,
                                 const EvalContext& ctx, std::vector<LayerTrace>* trace = nullptr,
                                 const std::vector<LayerTrace>* replay = nullptr) {
    std::uint64_t layer_counter = 0;
    return detail::stack_forward_impl(stack, f, ctx, layer_counter, trace, replay);
}

inline DAryTensor stack_forward(const std::vector<Layer>& stack, const DAryTensor& f,
                                const EvalContext& ctx, std::vector<LayerTrace>* trace = nullptr,
                                const std::vector<LayerTrace>* replay = nullptr) {
    BatchOfDAry batch(std::vector<DAryTensor>{f});
    return stack_forward(stack, batch, ctx, trace, replay).tensors.front();
}

inline DAryTensor skip_forward(const DAryTensor& f, const std::vector<Layer>& inner,
                               const EvalContext& ctx = {}) {
    std::vector<Layer> wrapper{Layer::skip(inner)};
    return stack_forward(wrapper, f, ctx);
}

// ---------------------------------------------------------------------------
// Backward operations (analytic gradients)
// ---------------------------------------------------------------------------

inline DAryTensor conv_backward_input(const Matrix& w, const DAryTensor& upstream) {
    if (w.rows() != upstream.n()) throw ShapeError("conv_backward: upstream shape mismatch");
    const std::size_t d = upstream.d();
    DAryTensor grad(w.cols(), d);
    for (std::size_t u = 0; u < w.rows(); ++u) {
        const auto g = upstream.element(u);
        for (std::size_t v = 0; v < w.cols(); ++v) {
            const double wv = w(u, v);
            if (wv == 0.0) continue;
            auto dst = grad.element(v);
            for (std::size_t c = 0; c < d; ++c) dst[c] += wv * g[c];
        }
    }
    return grad;
}

inline Matrix conv_weight_grad(const DAryTensor& input, const DAryTensor& upstream) {
    if (input.d() != upstream.d()) throw ShapeError("conv_weight_grad: component mismatch");
    Matrix grad(upstream.n(), input.n());
    for (std::size_t u = 0; u < upstream.n(); ++u) {
        const auto g = upstream.element(u);
        for (std::size_t v = 0; v < input.n(); ++v) {
            const auto x = input.element(v);
            double acc = 0.0;
            for (std::size_t c = 0; c < input.d(); ++c) acc += g[c] * x[c];
            grad(u, v) = acc;
        }
    }
    return grad;
}

inline DAryTensor relu_backward(const DAryTensor& input, double clamp, const DAryTensor& upstream) {
    if (!input.same_shape(upstream)) throw ShapeError("relu_backward: shape mismatch");
    DAryTensor grad(input.n(), input.d());
    for (std::size_t v = 0; v < input.n(); ++v) {
        const double r = input.element_norm(v);
        const auto x = input.element(v);
        const auto g = upstream.element(v);
        auto dst = grad.element(v);
        if (r >= clamp) {
            for (std::size_t c = 0; c < input.d(); ++c) dst[c] = g[c];
        } else if (r > 0.0) {
            // d/dx [ (||x||/C) x ] = (||x|| I + x x^T / ||x||) / C
            double xg = 0.0;
            for (std::size_t c = 0; c < input.d(); ++c) xg += x[c] * g[c];
            for (std::size_t c = 0; c < input.d(); ++c)
                dst[c] = (r * g[c] + (xg / r) * x[c]) / clamp;
        } // r == 0: gradient of ||x|| x / C vanishes
    }
    return grad;
}

inline BatchOfDAry batchnorm_backward(const BatchOfDAry& input, double eps,
                                      const BatchOfDAry& upstream) {
    if (input.size() != upstream.size() || input.n() != upstream.n() || input.d() != upstream.d())
        throw ShapeError("batchnorm_backward: shape mismatch");
    const std::size_t k = input.size();
    const std::size_t d = input.d();
    BatchOfDAry grad = input;
    for (auto& t : grad.tensors)
        for (double& x : t.data()) x = 0.0;
    for (std::size_t v = 0; v < input.n(); ++v) {
        double mean_sq = 0.0;
        for (std::size_t s = 0; s < k; ++s) {
            const double r = input.tensors[s].element_norm(v);
            mean_sq += r * r;
        }
        mean_sq /= static_cast<double>(k);
        const double div_sq = mean_sq + eps;
        if (div_sq <= 0.0) continue;
        const double div = std::sqrt(div_sq);
        double gs = 0.0; // sum over batch of <g_s, x_s>
        for (std::size_t s = 0; s < k; ++s) {
            const auto x = input.tensors[s].element(v);
            const auto g = upstream.tensors[s].element(v);
            for (std::size_t c = 0; c < d; ++c) gs += g[c] * x[c];
        }
        const double coupling = gs / (static_cast<double>(k) * div * div * div);
        for (std::size_t s = 0; s < k; ++s) {
            const auto x = input.tensors[s].element(v);
            const auto g = upstream.tensors[s].element(v);
            auto dst = grad.tensors[s].element(v);
            for (std::size_t c = 0; c < d; ++c) dst[c] = g[c] / div - coupling * x[c];
        }
    }
    return grad;
}

inline DAryTensor avgpool_backward(std::size_t window, std::size_t n_in, const DAryTensor& upstream) {
    if (window == 0 || n_in != upstream.n() * window)
        throw ShapeError("avgpool_backward: shape mismatch");
    DAryTensor grad(n_in, upstream.d());
    const double inv = 1.0 / static_cast<double>(window);
    for (std::size_t u = 0; u < upstream.n(); ++u) {
        const auto g = upstream.element(u);
        for (std::size_t i = 0; i < window; ++i) {
            auto dst = grad.element(u * window + i);
            for (std::size_t c = 0; c < upstream.d(); ++c) dst[c] = g[c] * inv;
        }
    }
    return grad;
}

inline DAryTensor maxpool_backward(const std::vector<std::uint32_t>& selected, std::size_t n_in,
                                   const DAryTensor& upstream) {
    if (selected.size() != upstream.n()) throw ShapeError("maxpool_backward: mask size mismatch");
    DAryTensor grad(n_in, upstream.d());
    for (std::size_t u = 0; u < upstream.n(); ++u) {
        if (selected[u] >= n_in) throw ShapeError("maxpool_backward: mask index out of range");
        auto dst = grad.element(selected[u]);
        const auto g = upstream.element(u);
        for (std::size_t c = 0; c < upstream.d(); ++c) dst[c] = g[c];
    }
    return grad;
}

inline DAryTensor dropout_backward(const std::vector<std::uint8_t>& keep, double rate, bool training,
                                   const DAryTensor& upstream) {
    if (!training || rate == 0.0) return upstream;
    if (keep.size() != upstream.n()) throw ShapeError("dropout_backward: mask size mismatch");
    DAryTensor grad = upstream;
    const double scale = 1.0 / (1.0 - rate);
    for (std::size_t v = 0; v < upstream.n(); ++v) {
        auto e = grad.element(v);
        for (double& x : e) x = keep[v] ? x * scale : 0.0;
    }
    return grad;
}

// Single-entry dispatcher matching the per-op contract.  Mask-dependent
// ops (maxpool, training-mode dropout) require the forward's mask.
struct LayerBackwardResult {
    DAryTensor input_grad;
    std::optional<Matrix> weight_grad; // conv only
};

struct ForwardMask {
    std::vector<std::uint32_t> selected; // maxpool
    std::vector<std::uint8_t> keep;      // dropout
};

inline LayerBackwardResult layer_backward(const Layer& layer, const DAryTensor& input,
                                          const DAryTensor& upstream,
                                          const ForwardMask* mask = nullptr) {
    switch (layer.kind) {
        case LayerKind::Conv:
            return {conv_backward_input(layer.weights, upstream),
                    conv_weight_grad(input, upstream)};
        case LayerKind::Relu:
            return {relu_backward(input, layer.clamp, upstream), std::nullopt};
        case LayerKind::BatchNorm: {
            BatchOfDAry in(std::vector<DAryTensor>{input});
            BatchOfDAry up(std::vector<DAryTensor>{upstream});
            return {batchnorm_backward(in, layer.eps, up).tensors.front(), std::nullopt};
        }
        case LayerKind::AvgPool:
            return {avgpool_backward(layer.window, input.n(), upstream), std::nullopt};
        case LayerKind::MaxPool:
            if (!mask || mask->selected.size() != upstream.n())
                throw ShapeError("layer_backward: maxpool requires the forward selection mask");
            return {maxpool_backward(mask->selected, input.n(), upstream), std::nullopt};
        case LayerKind::Dropout:
            if (layer.rate > 0.0 && (!mask || mask->keep.size() != input.n()))
                throw ShapeError("layer_backward: dropout requires the forward keep mask");
            return {dropout_backward(mask ? mask->keep : std::vector<std::uint8_t>(input.n(), 1),
                                     layer.rate, true, upstream),
                    std::nullopt};
        case LayerKind::Skip:
            throw ShapeError("layer_backward: use stack_backward for skip layers");
    }
    throw ShapeError("layer_backward: unknown layer kind");
}

// ---------------------------------------------------------------------------
// Stack backward
// ---------------------------------------------------------------------------

namespace detail {

inline BatchOfDAry stack_backward_impl(const std::vector<Layer>& stack,
                                       const std::vector<LayerTrace>& trace,
                                       BatchOfDAry upstream, StackGrads& grads) {
    if (trace.size() != stack.size()) throw ShapeError("stack_backward: trace does not match stack");
    for (std::size_t idx = stack.size(); idx-- > 0;) {
        const Layer& layer = stack[idx];
        const LayerTrace& t = trace[idx];
        const std::size_t k = upstream.size();
        switch (layer.kind) {
            case LayerKind::Conv: {
                std::vector<DAryTensor> down;
                down.reserve(k);
                for (std::size_t s = 0; s < k; ++s) {
                    const Matrix wg = conv_weight_grad(t.input.tensors[s], upstream.tensors[s]);
                    for (std::size_t i = 0; i < wg.data().size(); ++i)
                        grads.weight[idx].data()[i] += wg.data()[i];
                    down.push_back(conv_backward_input(layer.weights, upstream.tensors[s]));
                }
                upstream = BatchOfDAry(std::move(down));
                break;
            }
            case LayerKind::Relu: {
                std::vector<DAryTensor> down;
                down.reserve(k);
                for (std::size_t s = 0; s < k; ++s)
                    down.push_back(relu_backward(t.input.tensors[s], layer.clamp, upstream.tensors[s]));
                upstream = BatchOfDAry(std::move(down));
                break;
            }
            case LayerKind::BatchNorm:
                upstream = batchnorm_backward(t.input, layer.eps, upstream);
                break;
            case LayerKind::AvgPool: {
                std::vector<DAryTensor> down;
                down.reserve(k);
                for (std::size_t s = 0; s < k; ++s)
                    down.push_back(avgpool_backward(layer.window, t.input.n(), upstream.tensors[s]));
                upstream = BatchOfDAry(std::move(down));
                break;
            }
            case LayerKind::MaxPool: {
                std::vector<DAryTensor> down;
                down.reserve(k);
                for (std::size_t s = 0; s < k; ++s)
                    down.push_back(maxpool_backward(t.selected[s], t.input.n(), upstream.tensors[s]));
                upstream = BatchOfDAry(std::move(down));
                break;
            }
            case LayerKind::Dropout: {
                std::vector<DAryTensor> down;
                down.reserve(k);
                for (std::size_t s = 0; s < k; ++s) {
                    const bool masked = !t.keep.empty();
                    down.push_back(dropout_backward(
                        masked ? t.keep[s] : std::vector<std::uint8_t>(t.input.n(), 1), layer.rate,
                        masked, upstream.tensors[s]));
                }
                upstream = BatchOfDAry(std::move(down));
                break;
            }
            case LayerKind::Skip: {
                BatchOfDAry branch_grad =
                    stack_backward_impl(layer.inner, t.inner, upstream, grads.inner[idx]);
                for (std::size_t s = 0; s < k; ++s)
                    for (std::size_t i = 0; i < upstream.tensors[s].data().size(); ++i)
                        upstream.tensors[s].data()[i] += branch_grad.tensors[s].data()[i];
                break;
            }
        }
    }
    return upstream;
}

} // namespace detail

inline BatchOfDAry stack_backward(const std::vector<Layer>& stack,
                                  const std::vector<LayerTrace>& trace, const BatchOfDAry& upstream,
                                  StackGrads& grads) {
    return detail::stack_backward_impl(stack, trace, upstream, grads);
}

inline DAryTensor stack_backward(const std::vector<Layer>& stack,
                                 const std::vector<LayerTrace>& trace, const DAryTensor& upstream,
                                 StackGrads& grads) {
    BatchOfDAry up(std::vector<DAryTensor>{upstream});
    return stack_backward(stack, trace, up, grads).tensors.front();
}

// Output element count of a stack applied to n input elements.
inline std::size_t stack_output_elements(const std::vector<Layer>& stack, std::size_t n) {
    for (const auto& layer : stack) {
        switch (layer.kind) {
            case LayerKind::Conv: n = layer.weights.rows(); break;
            case LayerKind::AvgPool:
            case LayerKind::MaxPool:
                if (layer.window == 0 || n % layer.window != 0)
                    throw ShapeError("stack_output_elements: pooling window does not divide n");
                n /= layer.window;
                break;
            default: break;
        }
    }
    return n;
}

} // namespace renn
