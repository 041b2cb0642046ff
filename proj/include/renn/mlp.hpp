// mlp.hpp — plain real-valued dense stacks.
//
// Used for the encoder trunk, fooling heads, decoder and WGAN critic.
// Standard ReLU between layers, linear output, bias terms allowed: the
// real-valued side of the pipeline carries no equivariance constraint.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "renn/core.hpp"
#include "renn/linalg.hpp"

namespace renn {

struct DenseLayer {
    Matrix weight; // out x in
    std::vector<double> bias;
};

class RealMlp {
  public:
    RealMlp() = default;
    explicit RealMlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {}

    // He-initialized stack for the given widths, e.g. {2, 8, 4}.
    static RealMlp make(const std::vector<std::size_t>& widths, Seed seed) {
        if (widths.size() < 2) throw ShapeError("RealMlp: need at least input and output widths");
        std::vector<DenseLayer> layers;
        CounterRng rng(seed);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const double scale = std::sqrt(2.0 / static_cast<double>(widths[l]));
            DenseLayer layer;
            layer.weight = random_matrix(widths[l + 1], widths[l], rng, scale);
            layer.bias.assign(widths[l + 1], 0.0);
            layers.push_back(std::move(layer));
        }
        return RealMlp(std::move(layers));
    }

    std::size_t layer_count() const { return layers_.size(); }
    std::size_t input_size() const { return layers_.front().weight.cols(); }
    std::size_t output_size() const { return layers_.back().weight.rows(); }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }

    struct Trace {
        std::vector<std::vector<double>> inputs;  // input to each dense layer
        std::vector<std::vector<double>> pre_act; // pre-activation of each layer
    };

    std::vector<double> forward(const std::vector<double>& x, Trace* trace = nullptr) const {
        if (layers_.empty()) throw ShapeError("RealMlp: empty stack");
        std::vector<double> cur = x;
        if (trace) {
            trace->inputs.clear();
            trace->pre_act.clear();
        }
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            if (trace) trace->inputs.push_back(cur);
            std::vector<double> z = matvec(layers_[l].weight, cur);
            for (std::size_t i = 0; i < z.size(); ++i) z[i] += layers_[l].bias[i];
            if (trace) trace->pre_act.push_back(z);
            if (l + 1 < layers_.size())
                for (double& v : z) v = v > 0.0 ? v : 0.0;
            cur = std::move(z);
        }
        return cur;
    }

    // Activation feeding the last dense layer; fooling heads branch here.
    std::vector<double> penultimate(const std::vector<double>& x) const {
        Trace trace;
        forward(x, &trace);
        return trace.inputs.back();
    }

    struct Grads {
        std::vector<Matrix> weight;
        std::vector<std::vector<double>> bias;

        void zero() {
            for (auto& w : weight)
                for (double& v : w.data()) v = 0.0;
            for (auto& b : bias)
                for (double& v : b) v = 0.0;
        }
        void scale(double f) {
            for (auto& w : weight)
                for (double& v : w.data()) v *= f;
            for (auto& b : bias)
                for (double& v : b) v *= f;
        }
    };

    Grads make_grads() const {
        Grads g;
        for (const auto& l : layers_) {
            g.weight.emplace_back(l.weight.rows(), l.weight.cols());
            g.bias.emplace_back(l.bias.size(), 0.0);
        }
        return g;
    }

    // Accumulates parameter gradients into `grads`, returns gradient wrt
    // the input.  The trace must come from forward() on the same input.
    std::vector<double> backward(const Trace& trace, std::vector<double> grad_out,
                                 Grads& grads) const {
        for (std::size_t l = layers_.size(); l-- > 0;) {
            if (l + 1 < layers_.size()) // undo the ReLU of this layer's output
                for (std::size_t i = 0; i < grad_out.size(); ++i)
                    if (trace.pre_act[l][i] <= 0.0) grad_out[i] = 0.0;
            const auto& x = trace.inputs[l];
            for (std::size_t i = 0; i < grad_out.size(); ++i) {
                grads.bias[l][i] += grad_out[i];
                for (std::size_t j = 0; j < x.size(); ++j) grads.weight[l](i, j) += grad_out[i] * x[j];
            }
            std::vector<double> grad_in(x.size(), 0.0);
            for (std::size_t i = 0; i < grad_out.size(); ++i)
                for (std::size_t j = 0; j < x.size(); ++j)
                    grad_in[j] += layers_[l].weight(i, j) * grad_out[i];
            grad_out = std::move(grad_in);
        }
        return grad_out;
    }

    // Backward starting from the penultimate activation (head branch point):
    // runs only the last dense layer's parameter/input gradients.
    std::vector<double> backward_last_layer(const Trace& trace, const std::vector<double>& grad_out,
                                            Grads& grads) const {
        const std::size_t l = layers_.size() - 1;
        const auto& x = trace.inputs[l];
        for (std::size_t i = 0; i < grad_out.size(); ++i) {
            grads.bias[l][i] += grad_out[i];
            for (std::size_t j = 0; j < x.size(); ++j) grads.weight[l](i, j) += grad_out[i] * x[j];
        }
        std::vector<double> grad_in(x.size(), 0.0);
        for (std::size_t i = 0; i < grad_out.size(); ++i)
            for (std::size_t j = 0; j < x.size(); ++j)
                grad_in[j] += layers_[l].weight(i, j) * grad_out[i];
        return grad_in;
    }

    // Backward through layers [0, L-2] given the gradient at the
    // penultimate activation.
    std::vector<double> backward_trunk(const Trace& trace, std::vector<double> grad_branch,
                                       Grads& grads) const {
        for (std::size_t l = layers_.size() - 1; l-- > 0;) {
            for (std::size_t i = 0; i < grad_branch.size(); ++i)
                if (trace.pre_act[l][i] <= 0.0) grad_branch[i] = 0.0;
            const auto& x = trace.inputs[l];
            for (std::size_t i = 0; i < grad_branch.size(); ++i) {
                grads.bias[l][i] += grad_branch[i];
                for (std::size_t j = 0; j < x.size(); ++j)
                    grads.weight[l](i, j) += grad_branch[i] * x[j];
            }
            std::vector<double> grad_in(x.size(), 0.0);
            for (std::size_t i = 0; i < grad_branch.size(); ++i)
                for (std::size_t j = 0; j < x.size(); ++j)
                    grad_in[j] += layers_[l].weight(i, j) * grad_branch[i];
            grad_branch = std::move(grad_in);
        }
        return grad_branch;
    }

    void apply_sgd(const Grads& grads, double lr) {
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            for (std::size_t i = 0; i < layers_[l].weight.data().size(); ++i)
                layers_[l].weight.data()[i] -= lr * grads.weight[l].data()[i];
            for (std::size_t i = 0; i < layers_[l].bias.size(); ++i)
                layers_[l].bias[i] -= lr * grads.bias[l][i];
        }
    }

    void ascend_sgd(const Grads& grads, double lr) { apply_sgd(grads, -lr); }

    void clip_params(double c) {
        for (auto& l : layers_) {
            for (double& v : l.weight.data()) v = std::clamp(v, -c, c);
            for (double& v : l.bias) v = std::clamp(v, -c, c);
        }
    }

    std::vector<double*> param_ptrs() {
        std::vector<double*> out;
        for (auto& l : layers_) {
            for (double& v : l.weight.data()) out.push_back(&v);
            for (double& v : l.bias) out.push_back(&v);
        }
        return out;
    }

    std::vector<const double*> grad_ptrs(const Grads& grads) const {
        std::vector<const double*> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            for (const double& v : grads.weight[l].data()) out.push_back(&v);
            for (const double& v : grads.bias[l]) out.push_back(&v);
        }
        return out;
    }

  private:
    std::vector<DenseLayer> layers_;
};

} // namespace renn
