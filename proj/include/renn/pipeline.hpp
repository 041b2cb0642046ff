// pipeline.hpp — encoder / processing module / decoder.
//
// encode:   a = g(input); x = [a, b_1..b_{d-1}]; f = R ∘ x
// process:  h = Φ(f), Φ built only from the certified equivariant ops
// decode:   scores = Ψ(Γ(R⁻¹ ∘ h)), Γ = extract component 0
//
// The key R lives only at the local-device boundary: encode and decode
// take it explicitly, nothing ever stores it next to a feature.

#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "renn/core.hpp"
#include "renn/layers.hpp"
#include "renn/mlp.hpp"
#include "renn/rotation.hpp"
#include "renn/tensor.hpp"

namespace renn {

struct ModelSpec {
    std::size_t d = 2;
    RealMlp encoder;                    // input -> a; heads branch at its penultimate activation
    std::vector<RealMlp> fooling_heads; // d-1 stacks: branch activation -> b_i
    std::vector<Layer> processing;      // equivariant stack
    RealMlp decoder;                    // component-0 feature -> class scores
    std::size_t class_count = 2;
    bool gaussian_fooling = false;      // ablation: b_i ~ N(0, rms(a)) instead of learned heads
    // WGAN critic trained alongside the encoder; kept with the model so
    // attack evaluation can score candidates with the discriminator.
    RealMlp critic;

    std::size_t feature_width() const { return encoder.output_size(); }

    void validate() const {
        if (d < 2) throw ShapeError("ModelSpec: d must be >= 2");
        if (fooling_heads.size() != d - 1)
            throw ShapeError("ModelSpec: need exactly d-1 fooling heads");
        const std::size_t n = encoder.output_size();
        for (const auto& head : fooling_heads)
            if (head.output_size() != n)
                throw ShapeError("ModelSpec: fooling head width differs from encoder output");
        const std::size_t n_out = stack_output_elements(processing, n);
        if (decoder.input_size() != n_out)
            throw ShapeError("ModelSpec: decoder input does not match processing output");
        if (decoder.output_size() != class_count)
            throw ShapeError("ModelSpec: decoder output does not match class count");
    }
};

struct Prediction {
    std::vector<double> scores;
    std::size_t label = 0;
};

inline std::size_t argmax_label(const std::vector<double>& scores) {
    if (scores.empty()) throw ShapeError("argmax_label: empty scores");
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

namespace detail {

inline double rms(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s / static_cast<double>(v.size()));
}

} // namespace detail

// Fooling counterparts for a given input.  Learned heads read the
// encoder's penultimate activation; the Gaussian ablation matches the
// scale of a instead.
inline std::vector<std::vector<double>> fooling_components(const ModelSpec& model,
                                                           const std::vector<double>& branch,
                                                           const std::vector<double>& a, Seed seed) {
    std::vector<std::vector<double>> b;
    b.reserve(model.d - 1);
    if (model.gaussian_fooling) {
        const double scale = detail::rms(a);
        for (std::size_t i = 0; i + 1 < model.d; ++i) {
            CounterRng rng(derive_seed(seed, i + 1));
            std::vector<double> bi(a.size());
            for (double& v : bi) v = rng.next_normal() * scale;
            b.push_back(std::move(bi));
        }
    } else {
        for (const auto& head : model.fooling_heads) b.push_back(head.forward(branch));
    }
    return b;
}

inline DAryTensor encode(const std::vector<double>& input, const ModelSpec& model,
                         const RotationMatrix& r, Seed seed = {}) {
    if (r.d() != model.d) throw ShapeError("encode: key dimension does not match model d");
    RealMlp::Trace trace;
    const std::vector<double> a = model.encoder.forward(input, &trace);
    const std::vector<double>& branch = trace.inputs.back();
    const auto b = fooling_components(model, branch, a, seed);
    std::vector<std::vector<double>> components;
    components.reserve(model.d);
    components.push_back(a);
    for (const auto& bi : b) components.push_back(bi);
    return rotate(DAryTensor::from_components(components), r);
}

inline DAryTensor process(const DAryTensor& f, const ModelSpec& model, Seed seed = {},
                          bool training = false) {
    if (f.d() != model.d) throw ShapeError("process: feature d does not match model d");
    return stack_forward(model.processing, f, EvalContext{seed, training});
}

inline Prediction decode(const DAryTensor& h, const RotationMatrix& r, const ModelSpec& model) {
    if (h.d() != model.d || r.d() != model.d) throw ShapeError("decode: dimension mismatch");
    const DAryTensor decrypted = rotate_inverse(h, r);
    const std::vector<double> extracted = decrypted.component(0);
    Prediction pred;
    pred.scores = model.decoder.forward(extracted);
    for (double s : pred.scores)
        if (!std::isfinite(s)) throw NumericError("decode: non-finite score");
    pred.label = argmax_label(pred.scores);
    return pred;
}

// Reference path with R = identity (the plain-DNN control).
inline Prediction forward_plain(const std::vector<double>& input, const ModelSpec& model,
                                Seed seed = {}) {
    const RotationMatrix id = RotationMatrix::identity(model.d);
    return decode(process(encode(input, model, id, seed), model, seed, false), id, model);
}

// Convenience single-call inference with an explicit key.
inline Prediction forward_encrypted(const std::vector<double>& input, const ModelSpec& model,
                                    const RotationMatrix& r, Seed seed = {}) {
    return decode(process(encode(input, model, r, seed), model, seed, false), r, model);
}

} // namespace renn
