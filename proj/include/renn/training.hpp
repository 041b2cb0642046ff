// training.hpp — toy-scale optimization of an encrypted pipeline.
//
// The objective is task cross-entropy plus a WGAN term over the encoder:
//
//   L(g, D) = E[ D(a) - E_{R' != R}[ D(a') ] ],   a' = Γ(R'^{-1} ∘ f)
//   total   = max_D L(g, D) + L_task
//
// Alternation per batch: critic_steps ascent steps on L with weight
// clipping to [-c, c], then one descent step on the total loss.  The GAN
// term updates encoder-side parameters only (trunk and fooling heads);
// task gradients reach trunk, processing weights and decoder.  Fooling
// heads receive the task gradient only when joint_fooling_gradient is
// set.  Everything is deterministic per TrainConfig::seed; a fresh key R
// is drawn per sample per step.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "renn/core.hpp"
#include "renn/dataset.hpp"
#include "renn/layers.hpp"
#include "renn/mlp.hpp"
#include "renn/pipeline.hpp"
#include "renn/rotation.hpp"

namespace renn {

inline constexpr double kMinDistinctKeyAngle = 1e-6;

struct TrainConfig {
    double learning_rate = 0.05;
    double critic_learning_rate = 0.05;
    std::size_t batch_size = 32;
    std::size_t epochs = 100;
    std::size_t critic_steps = 5;  // critic updates per generator step
    double clip_c = 0.01;          // WGAN weight clip
    std::size_t attacker_samples = 4; // K in the E_{R' != R} estimate
    double gan_weight = 1.0;
    double momentum = 0.0;         // 0 = plain SGD
    bool joint_fooling_gradient = false;
    bool record_wall_seconds = false;
    Seed seed{0};

    void validate() const {
        if (!(learning_rate >= 0.0) || !(critic_learning_rate >= 0.0))
            throw ShapeError("TrainConfig: learning rates must be nonnegative");
        if (batch_size == 0 || epochs == 0 || critic_steps == 0)
            throw ShapeError("TrainConfig: sizes must be positive");
        if (!(clip_c > 0.0)) throw ShapeError("TrainConfig: clip_c must be positive");
        if (attacker_samples == 0) throw ShapeError("TrainConfig: attacker_samples must be >= 1");
        if (momentum < 0.0 || momentum >= 1.0) throw ShapeError("TrainConfig: momentum in [0,1)");
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct CrossEntropy {
    double loss;
    std::vector<double> grad; // d loss / d scores
};

inline CrossEntropy softmax_cross_entropy(const std::vector<double>& scores, std::size_t label) {
    if (label >= scores.size()) throw ShapeError("softmax_cross_entropy: label out of range");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericError("softmax_cross_entropy: non-finite score");
    const double m = *std::max_element(scores.begin(), scores.end());
    double sum = 0.0;
    for (double s : scores) sum += std::exp(s - m);
    const double log_z = m + std::log(sum);
    CrossEntropy ce;
    ce.loss = log_z - scores[label];
    ce.grad.resize(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        ce.grad[i] = std::exp(scores[i] - log_z);
        if (i == label) ce.grad[i] -= 1.0;
    }
    return ce;
}

// Overall objective value: cross-entropy plus the (already evaluated) GAN
// term with unit weighting.
inline double total_loss(const std::vector<double>& task_scores, std::size_t label, double gan_loss) {
    if (!std::isfinite(gan_loss)) throw NumericError("total_loss: non-finite gan loss");
    return softmax_cross_entropy(task_scores, label).loss + gan_loss;
}

inline double critic_score(const RealMlp& critic, const std::vector<double>& a,
                           RealMlp::Trace* trace = nullptr) {
    const auto out = critic.forward(a, trace);
    if (out.size() != 1) throw ShapeError("critic: output must be a single scalar");
    return out[0];
}

// K rotations distinct from the true key (difference angle >= 1e-6),
// deterministic per seed.
inline std::vector<RotationMatrix> sample_distinct_rotations(std::size_t d, const RotationMatrix& r,
                                                             std::size_t count, Seed seed) {
    std::vector<RotationMatrix> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const Seed stream = derive_seed(seed, k);
        for (std::uint64_t attempt = 0;; ++attempt) {
            if (attempt > 256) throw NumericError("sample_distinct_rotations: rejection stalled");
            RotationMatrix cand = sample_rotation(d, derive_seed(stream, attempt));
            if (angle_between(cand, r) >= kMinDistinctKeyAngle) {
                out.push_back(std::move(cand));
                break;
            }
        }
    }
    return out;
}

// Decryption of f under a wrong key R', restricted to the carrier slot:
// a'(v) = <phase(R'), f_v>.
inline std::vector<double> decrypt_component0(const DAryTensor& f, const RotationMatrix& r_prime) {
    return rotate_inverse(f, r_prime).component(0);
}

// Adversarial objective estimate: D(a) - mean_k D(a'_k) over K sampled wrong keys.
inline double wgan_loss(const RealMlp& critic, const std::vector<double>& a, const DAryTensor& f,
                        const RotationMatrix& r, std::size_t k_samples, Seed seed) {
    if (k_samples < 1) throw ShapeError("wgan_loss: need at least one attacker sample");
    if (f.d() != r.d()) throw ShapeError("wgan_loss: dimension mismatch");
    const double d_true = critic_score(critic, a);
    double mean_fake = 0.0;
    for (const auto& rp : sample_distinct_rotations(f.d(), r, k_samples, seed))
        mean_fake += critic_score(critic, decrypt_component0(f, rp));
    mean_fake /= static_cast<double>(k_samples);
    return d_true - mean_fake;
}

// ---------------------------------------------------------------------------
// Full-pipeline forward/backward for one sample
// ---------------------------------------------------------------------------

struct PipelineGrads {
    RealMlp::Grads encoder;
    std::vector<RealMlp::Grads> heads;
    StackGrads processing;
    RealMlp::Grads decoder;

    static PipelineGrads zeros_like(const ModelSpec& model) {
        PipelineGrads g;
        g.encoder = model.encoder.make_grads();
        for (const auto& h : model.fooling_heads) g.heads.push_back(h.make_grads());
        g.processing = StackGrads::zeros_like(model.processing);
        g.decoder = model.decoder.make_grads();
        return g;
    }
};

struct SampleLosses {
    double task = 0.0;
    double gan = 0.0;
};

namespace detail {

struct SampleSeeds {
    Seed dropout;  // processing-stack randomness
    Seed gan;      // R' draws for the adversarial estimate
};

// Forward pass with every cache needed for the backward pass.
struct PipelineForward {
    RealMlp::Trace encoder_trace;
    std::vector<RealMlp::Trace> head_traces;
    std::vector<double> a;
    DAryTensor x;
    DAryTensor f;
    std::vector<LayerTrace> proc_trace;
    DAryTensor h;
    std::vector<double> extracted;
    RealMlp::Trace decoder_trace;
    std::vector<double> scores;
};

inline PipelineForward pipeline_forward_traced(const ModelSpec& model,
                                               const std::vector<double>& input,
                                               const RotationMatrix& r, const SampleSeeds& seeds,
                                               bool training) {
    PipelineForward fw;
    fw.a = model.encoder.forward(input, &fw.encoder_trace);
    const std::vector<double>& branch = fw.encoder_trace.inputs.back();
    std::vector<std::vector<double>> components;
    components.push_back(fw.a);
    if (model.gaussian_fooling) {
        for (auto& b : fooling_components(model, branch, fw.a, seeds.gan)) components.push_back(std::move(b));
    } else {
        fw.head_traces.resize(model.fooling_heads.size());
        for (std::size_t i = 0; i < model.fooling_heads.size(); ++i)
            components.push_back(model.fooling_heads[i].forward(branch, &fw.head_traces[i]));
    }
    fw.x = DAryTensor::from_components(components);
    fw.f = rotate(fw.x, r);
    fw.h = stack_forward(model.processing, fw.f, EvalContext{seeds.dropout, training}, &fw.proc_trace);
    fw.extracted = rotate_inverse(fw.h, r).component(0);
    fw.scores = model.decoder.forward(fw.extracted, &fw.decoder_trace);
    return fw;
}

} // namespace detail

// Descent direction of the per-sample total loss.  Accumulates into
// `grads`; critic parameters are treated as constants.
inline SampleLosses generator_sample_backward(const ModelSpec& model,
                                              const std::vector<double>& input, std::size_t label,
                                              const RotationMatrix& r, std::size_t k_samples,
                                              Seed gan_seed, Seed dropout_seed, double gan_weight,
                                              bool joint_fooling, bool training,
                                              PipelineGrads& grads) {
    const auto fw = detail::pipeline_forward_traced(model, input, r,
                                                    {dropout_seed, gan_seed}, training);
    const std::size_t n = fw.x.n();
    const std::size_t d = model.d;

    SampleLosses losses;
    const CrossEntropy ce = softmax_cross_entropy(fw.scores, label);
    losses.task = ce.loss;

    // Task path: scores -> decoder -> component 0 -> R^T h -> stack -> f.
    const std::vector<double> grad_extracted =
        model.decoder.backward(fw.decoder_trace, ce.grad, grads.decoder);
    DAryTensor grad_decrypted(fw.h.n(), d);
    grad_decrypted.set_component(0, grad_extracted);
    const DAryTensor grad_h = rotate(grad_decrypted, r);
    const DAryTensor grad_f_task =
        stack_backward(model.processing, fw.proc_trace, grad_h, grads.processing);
    const DAryTensor grad_x_task = rotate_inverse(grad_f_task, r);

    // GAN path: attacks f directly, bypassing the processing module.
    std::vector<double> grad_a_gan(n, 0.0);
    DAryTensor grad_x_gan(n, d);
    if (gan_weight != 0.0) {
        RealMlp::Trace trace_a;
        const double d_true = critic_score(model.critic, fw.a, &trace_a);
        auto scratch = model.critic.make_grads();
        const std::vector<double> dd_da = model.critic.backward(trace_a, {1.0}, scratch);
        for (std::size_t v = 0; v < n; ++v) grad_a_gan[v] = gan_weight * dd_da[v];

        DAryTensor grad_f_gan(n, d);
        double mean_fake = 0.0;
        const auto wrong_keys =
            sample_distinct_rotations(d, r, k_samples, gan_seed);
        for (const auto& rp : wrong_keys) {
            const std::vector<double> a_prime = decrypt_component0(fw.f, rp);
            RealMlp::Trace trace_p;
            mean_fake += critic_score(model.critic, a_prime, &trace_p);
            auto scratch_p = model.critic.make_grads();
            const std::vector<double> dd_dap = model.critic.backward(trace_p, {1.0}, scratch_p);
            const PhaseVector phi = phase_of(rp);
            const double factor = -gan_weight / static_cast<double>(k_samples);
            for (std::size_t v = 0; v < n; ++v)
                for (std::size_t j = 0; j < d; ++j)
                    grad_f_gan.at(v, j) += factor * dd_dap[v] * phi.coords[j];
        }
        mean_fake /= static_cast<double>(k_samples);
        losses.gan = d_true - mean_fake;
        grad_x_gan = rotate_inverse(grad_f_gan, r);
    }

    // Combine at the d-ary assembly point.
    std::vector<double> grad_a(n, 0.0);
    for (std::size_t v = 0; v < n; ++v)
        grad_a[v] = grad_x_task.at(v, 0) + grad_x_gan.at(v, 0) + grad_a_gan[v];

    std::vector<double> grad_branch =
        model.encoder.backward_last_layer(fw.encoder_trace, grad_a, grads.encoder);
    if (!model.gaussian_fooling) {
        for (std::size_t i = 0; i < model.fooling_heads.size(); ++i) {
            std::vector<double> grad_b(n, 0.0);
            for (std::size_t v = 0; v < n; ++v) {
                grad_b[v] = grad_x_gan.at(v, i + 1);
                if (joint_fooling) grad_b[v] += grad_x_task.at(v, i + 1);
            }
            const std::vector<double> gb =
                model.fooling_heads[i].backward(fw.head_traces[i], grad_b, grads.heads[i]);
            for (std::size_t j = 0; j < grad_branch.size(); ++j) grad_branch[j] += gb[j];
        }
    }
    model.encoder.backward_trunk(fw.encoder_trace, grad_branch, grads.encoder);
    return losses;
}

// Forward-only value of the same objective; used by finite differences.
inline double generator_sample_loss(const ModelSpec& model, const std::vector<double>& input,
                                    std::size_t label, const RotationMatrix& r,
                                    std::size_t k_samples, Seed gan_seed, Seed dropout_seed,
                                    double gan_weight, bool training) {
    const auto fw = detail::pipeline_forward_traced(model, input, r, {dropout_seed, gan_seed}, training);
    double loss = softmax_cross_entropy(fw.scores, label).loss;
    if (gan_weight != 0.0)
        loss += gan_weight * wgan_loss(model.critic, fw.a, fw.f, r, k_samples, gan_seed);
    return loss;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    std::size_t epoch = 0;
    double task_loss = 0.0;
    double gan_loss = 0.0;
    double critic_loss = 0.0; // adversarial objective seen by the critic
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    // max |gradient| observed per trainable tensor, for the touch audit
    std::map<std::string, double> gradient_audit;
};

inline double evaluate_accuracy(const ModelSpec& model, const LabeledDataset& ds, Seed key_seed) {
    if (ds.size() == 0) throw ShapeError("evaluate_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const RotationMatrix r = sample_rotation(model.d, derive_seed(key_seed, i));
        const Prediction pred = forward_encrypted(ds.inputs[i], model, r);
        if (pred.label == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

// skip_last_bias: the critic's output bias cancels exactly in the
// D(a) - D(a') difference, so it structurally never receives gradient
// and is excluded from the touch audit.
inline void audit_mlp(const RealMlp& mlp, const RealMlp::Grads& grads, const std::string& prefix,
                      std::map<std::string, double>& audit, bool skip_last_bias = false) {
    for (std::size_t l = 0; l < mlp.layer_count(); ++l) {
        double w = 0.0;
        for (double v : grads.weight[l].data()) w = std::max(w, std::abs(v));
        auto& wslot = audit[prefix + ".weight" + std::to_string(l)];
        wslot = std::max(wslot, w);
        if (skip_last_bias && l + 1 == mlp.layer_count()) continue;
        double b = 0.0;
        for (double v : grads.bias[l]) b = std::max(b, std::abs(v));
        auto& bslot = audit[prefix + ".bias" + std::to_string(l)];
        bslot = std::max(bslot, b);
    }
}

inline void audit_stack(const std::vector<Layer>& stack, const StackGrads& grads,
                        const std::string& prefix, std::map<std::string, double>& audit) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
        if (stack[i].kind == LayerKind::Conv) {
            double w = 0.0;
            for (double v : grads.weight[i].data()) w = std::max(w, std::abs(v));
            auto& slot = audit[prefix + ".conv" + std::to_string(i)];
            slot = std::max(slot, w);
        }
        if (stack[i].kind == LayerKind::Skip)
            audit_stack(stack[i].inner, grads.inner[i], prefix + ".skip" + std::to_string(i), audit);
    }
}

struct MomentumState {
    PipelineGrads velocity;
};

inline void sgd_update_mlp(RealMlp& mlp, const RealMlp::Grads& grads, RealMlp::Grads& velocity,
                           double lr, double momentum) {
    if (momentum == 0.0) {
        mlp.apply_sgd(grads, lr);
        return;
    }
    for (std::size_t l = 0; l < mlp.layer_count(); ++l) {
        for (std::size_t i = 0; i < grads.weight[l].data().size(); ++i) {
            auto& v = velocity.weight[l].data()[i];
            v = momentum * v + grads.weight[l].data()[i];
            mlp.layers()[l].weight.data()[i] -= lr * v;
        }
        for (std::size_t i = 0; i < grads.bias[l].size(); ++i) {
            auto& v = velocity.bias[l][i];
            v = momentum * v + grads.bias[l][i];
            mlp.layers()[l].bias[i] -= lr * v;
        }
    }
}

inline void sgd_update_stack(std::vector<Layer>& stack, const StackGrads& grads, StackGrads& velocity,
                             double lr, double momentum) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
        if (stack[i].kind == LayerKind::Conv) {
            for (std::size_t j = 0; j < stack[i].weights.data().size(); ++j) {
                if (momentum == 0.0) {
                    stack[i].weights.data()[j] -= lr * grads.weight[i].data()[j];
                } else {
                    auto& v = velocity.weight[i].data()[j];
                    v = momentum * v + grads.weight[i].data()[j];
                    stack[i].weights.data()[j] -= lr * v;
                }
            }
        }
        if (stack[i].kind == LayerKind::Skip)
            sgd_update_stack(stack[i].inner, grads.inner[i], velocity.inner[i], lr, momentum);
    }
}

} // namespace detail

// Alternating WGAN/task optimization.  Mutates model (encoder, heads,
// processing, decoder, critic) in place and returns the per-epoch log.
inline TrainLog train_toy(const LabeledDataset& train, const LabeledDataset& test, ModelSpec& model,
                          const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    if (train.size() == 0 || test.size() == 0) throw ShapeError("train_toy: empty dataset");
    if (!model.gaussian_fooling && model.fooling_heads.empty())
        throw ShapeError("train_toy: model has no fooling heads");

    TrainLog log;
    detail::MomentumState mom;
    mom.velocity = PipelineGrads::zeros_like(model);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    const Seed root = cfg.seed;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const Seed epoch_seed = derive_seed(root, epoch);

        // Fisher-Yates with the epoch stream.
        CounterRng shuffle_rng(derive_seed(epoch_seed, 0));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.next_u64() % i;
            std::swap(order[i - 1], order[j]);
        }

        double task_sum = 0.0, gan_sum = 0.0, critic_sum = 0.0;
        std::size_t gen_steps = 0, critic_steps_done = 0;

        const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(begin + cfg.batch_size, train.size());
            const std::size_t bsize = end - begin;
            const Seed batch_seed = derive_seed(epoch_seed, 1 + b);

            // Critic ascent with weight clipping.
            if (cfg.critic_learning_rate > 0.0 && cfg.gan_weight != 0.0) {
                for (std::size_t t = 0; t < cfg.critic_steps; ++t) {
                    const Seed step_seed = derive_seed(batch_seed, t);
                    auto cgrads = model.critic.make_grads();
                    double objective = 0.0;
                    for (std::size_t s = begin; s < end; ++s) {
                        const std::size_t idx = order[s];
                        const Seed sample_seed = derive_seed(step_seed, s - begin);
                        const RotationMatrix r = sample_rotation(model.d, derive_seed(sample_seed, 0));
                        const auto fw = detail::pipeline_forward_traced(
                            model, train.inputs[idx], r,
                            {derive_seed(sample_seed, 1), derive_seed(sample_seed, 2)}, true);
                        RealMlp::Trace trace_a;
                        const double d_true = critic_score(model.critic, fw.a, &trace_a);
                        const double w_true = 1.0 / static_cast<double>(bsize);
                        std::vector<double> up{w_true};
                        model.critic.backward(trace_a, up, cgrads);
                        double mean_fake = 0.0;
                        const auto wrong = sample_distinct_rotations(
                            model.d, r, cfg.attacker_samples, derive_seed(sample_seed, 2));
                        for (const auto& rp : wrong) {
                            RealMlp::Trace trace_p;
                            const auto a_prime = decrypt_component0(fw.f, rp);
                            mean_fake += critic_score(model.critic, a_prime, &trace_p);
                            std::vector<double> down{-w_true / static_cast<double>(wrong.size())};
                            model.critic.backward(trace_p, down, cgrads);
                        }
                        mean_fake /= static_cast<double>(wrong.size());
                        objective += (d_true - mean_fake) * w_true;
                    }
                    detail::audit_mlp(model.critic, cgrads, "critic", log.gradient_audit,
                                      /*skip_last_bias=*/true);
                    model.critic.ascend_sgd(cgrads, cfg.critic_learning_rate);
                    model.critic.clip_params(cfg.clip_c);
                    critic_sum += objective;
                    ++critic_steps_done;
                }
            }

            // One generator/backbone descent step.
            if (cfg.learning_rate > 0.0) {
                const Seed step_seed = derive_seed(batch_seed, 0xA11CE);
                auto grads = PipelineGrads::zeros_like(model);
                double task = 0.0, gan = 0.0;
                for (std::size_t s = begin; s < end; ++s) {
                    const std::size_t idx = order[s];
                    const Seed sample_seed = derive_seed(step_seed, s - begin);
                    const RotationMatrix r = sample_rotation(model.d, derive_seed(sample_seed, 0));
                    const SampleLosses l = generator_sample_backward(
                        model, train.inputs[idx], train.labels[idx], r, cfg.attacker_samples,
                        derive_seed(sample_seed, 2), derive_seed(sample_seed, 1), cfg.gan_weight,
                        cfg.joint_fooling_gradient, true, grads);
                    task += l.task;
                    gan += l.gan;
                }
                const double inv = 1.0 / static_cast<double>(bsize);
                grads.encoder.scale(inv);
                for (auto& h : grads.heads) h.scale(inv);
                grads.decoder.scale(inv);
                {
                    StackGrads unit = grads.processing;
                    grads.processing = StackGrads::zeros_like(model.processing);
                    grads.processing.add_scaled(unit, inv);
                }
                if (!std::isfinite(task) || !std::isfinite(gan))
                    throw NumericError("train_toy: non-finite loss at epoch " + std::to_string(epoch));

                detail::audit_mlp(model.encoder, grads.encoder, "encoder", log.gradient_audit);
                for (std::size_t i = 0; i < grads.heads.size(); ++i)
                    detail::audit_mlp(model.fooling_heads[i], grads.heads[i],
                                      "fooling_head" + std::to_string(i), log.gradient_audit);
                detail::audit_stack(model.processing, grads.processing, "processing",
                                    log.gradient_audit);
                detail::audit_mlp(model.decoder, grads.decoder, "decoder", log.gradient_audit);

                detail::sgd_update_mlp(model.encoder, grads.encoder, mom.velocity.encoder,
                                       cfg.learning_rate, cfg.momentum);
                for (std::size_t i = 0; i < model.fooling_heads.size(); ++i)
                    detail::sgd_update_mlp(model.fooling_heads[i], grads.heads[i],
                                           mom.velocity.heads[i], cfg.learning_rate, cfg.momentum);
                detail::sgd_update_stack(model.processing, grads.processing,
                                         mom.velocity.processing, cfg.learning_rate, cfg.momentum);
                detail::sgd_update_mlp(model.decoder, grads.decoder, mom.velocity.decoder,
                                       cfg.learning_rate, cfg.momentum);
                task_sum += task * inv;
                gan_sum += gan * inv;
                ++gen_steps;
            }
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.task_loss = gen_steps ? task_sum / static_cast<double>(gen_steps) : 0.0;
        stats.gan_loss = gen_steps ? gan_sum / static_cast<double>(gen_steps) : 0.0;
        stats.critic_loss =
            critic_steps_done ? critic_sum / static_cast<double>(critic_steps_done) : 0.0;
        stats.train_accuracy = evaluate_accuracy(model, train, derive_seed(epoch_seed, 0xE7A1));
        stats.test_accuracy = evaluate_accuracy(model, test, derive_seed(epoch_seed, 0xE7A2));
        if (cfg.record_wall_seconds) {
            const auto dt = std::chrono::steady_clock::now() - epoch_start;
            stats.wall_seconds = std::chrono::duration<double>(dt).count();
        }
        if (!std::isfinite(stats.task_loss) || !std::isfinite(stats.gan_loss))
            throw NumericError("train_toy: diverged (non-finite epoch loss)");
        log.epochs.push_back(stats);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Gradient checking (central finite differences, h = 1e-5)
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
    std::string boundary; // nonempty when the point was rejected
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kBoundaryMargin = 1e-3;

namespace detail {

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

// Boundary scan for non-differentiable points of the equivariant ops.
inline std::string find_layer_boundary(const Layer& layer, const DAryTensor& input) {
    switch (layer.kind) {
        case LayerKind::Relu:
            for (std::size_t v = 0; v < input.n(); ++v) {
                const double r = input.element_norm(v);
                if (std::abs(r - layer.clamp) < kBoundaryMargin)
                    return "relu clamp boundary at element " + std::to_string(v);
                if (r != 0.0 && r < kBoundaryMargin)
                    return "relu zero-norm boundary at element " + std::to_string(v);
            }
            break;
        case LayerKind::MaxPool: {
            if (layer.window == 0 || input.n() % layer.window != 0) break;
            for (std::size_t u = 0; u < input.n() / layer.window; ++u) {
                double best = -1.0, second = -1.0;
                for (std::size_t i = 0; i < layer.window; ++i) {
                    const double r = input.element_norm(u * layer.window + i);
                    if (r > best) {
                        second = best;
                        best = r;
                    } else if (r > second) {
                        second = r;
                    }
                }
                if (layer.window > 1 && best - second < kBoundaryMargin)
                    return "maxpool tie boundary in window " + std::to_string(u);
            }
            break;
        }
        case LayerKind::Skip:
            for (const auto& l : layer.inner) {
                const std::string b = find_layer_boundary(l, input);
                if (!b.empty()) return b; // conservative: checked against the skip input
            }
            break;
        default:
            break;
    }
    return {};
}

} // namespace detail

// Checks one layer's analytic gradients (input, and weights for conv)
// against central finite differences of a fixed random projection of the
// output.  The probe point must sit away from non-differentiable
// boundaries by kBoundaryMargin.
inline GradCheckReport grad_check_layer(const Layer& layer, const DAryTensor& input, double tol,
                                        Seed probe_seed = Seed{17}) {
    GradCheckReport report;
    report.boundary = detail::find_layer_boundary(layer, input);
    if (!report.boundary.empty()) return report;

    const std::vector<Layer> stack{layer};
    const EvalContext ctx{probe_seed, true};
    std::vector<LayerTrace> trace;
    const DAryTensor out = stack_forward(stack, input, ctx, &trace);

    CounterRng rng(probe_seed);
    DAryTensor projection(out.n(), out.d());
    for (double& v : projection.data()) v = rng.next_normal();

    const auto scalar = [&](const DAryTensor& in) {
        const DAryTensor o = stack_forward(stack, in, ctx);
        double s = 0.0;
        for (std::size_t i = 0; i < o.data().size(); ++i) s += o.data()[i] * projection.data()[i];
        return s;
    };

    StackGrads grads = StackGrads::zeros_like(stack);
    const DAryTensor input_grad = stack_backward(stack, trace, projection, grads);

    DAryTensor probe = input;
    for (std::size_t i = 0; i < probe.data().size(); ++i) {
        const double save = probe.data()[i];
        probe.data()[i] = save + kGradCheckStep;
        const double up = scalar(probe);
        probe.data()[i] = save - kGradCheckStep;
        const double down = scalar(probe);
        probe.data()[i] = save;
        const double numeric = (up - down) / (2.0 * kGradCheckStep);
        report.max_rel_error =
            std::max(report.max_rel_error, detail::rel_error(input_grad.data()[i], numeric));
    }

    if (layer.kind == LayerKind::Conv) {
        Layer perturbed = layer;
        const auto weight_scalar = [&](const Layer& l) {
            const DAryTensor o = stack_forward({l}, input, ctx);
            double s = 0.0;
            for (std::size_t i = 0; i < o.data().size(); ++i) s += o.data()[i] * projection.data()[i];
            return s;
        };
        for (std::size_t i = 0; i < perturbed.weights.data().size(); ++i) {
            const double save = perturbed.weights.data()[i];
            perturbed.weights.data()[i] = save + kGradCheckStep;
            const double up = weight_scalar(perturbed);
            perturbed.weights.data()[i] = save - kGradCheckStep;
            const double down = weight_scalar(perturbed);
            perturbed.weights.data()[i] = save;
            const double numeric = (up - down) / (2.0 * kGradCheckStep);
            report.max_rel_error =
                std::max(report.max_rel_error, detail::rel_error(grads.weight[0].data()[i], numeric));
        }
    }

    report.pass = report.max_rel_error <= tol;
    return report;
}

// Checks the analytic gradient of the full per-sample objective against
// finite differences over every trainable parameter.  Runs with the
// joint fooling-head gradient so the analytic path is the complete
// derivative of the loss.
inline GradCheckReport grad_check_pipeline(ModelSpec model, const std::vector<double>& input,
                                           std::size_t label, const RotationMatrix& r,
                                           std::size_t k_samples, Seed seed, double tol,
                                           double gan_weight = 1.0) {
    GradCheckReport report;
    const Seed gan_seed = derive_seed(seed, 1);
    const Seed dropout_seed = derive_seed(seed, 2);

    auto grads = PipelineGrads::zeros_like(model);
    generator_sample_backward(model, input, label, r, k_samples, gan_seed, dropout_seed, gan_weight,
                              /*joint_fooling=*/true, /*training=*/true, grads);

    const auto loss_value = [&](ModelSpec& m) {
        return generator_sample_loss(m, input, label, r, k_samples, gan_seed, dropout_seed,
                                     gan_weight, true);
    };

    std::vector<double*> params;
    std::vector<const double*> analytic;

    const auto add_mlp = [&](RealMlp& mlp, const RealMlp::Grads& g) {
        auto p = mlp.param_ptrs();
        auto a = mlp.grad_ptrs(g);
        params.insert(params.end(), p.begin(), p.end());
        analytic.insert(analytic.end(), a.begin(), a.end());
    };
    add_mlp(model.encoder, grads.encoder);
    for (std::size_t i = 0; i < model.fooling_heads.size(); ++i)
        add_mlp(model.fooling_heads[i], grads.heads[i]);
    add_mlp(model.decoder, grads.decoder);

    std::vector<std::pair<Layer*, Matrix*>> convs;
    const std::function<void(std::vector<Layer>&, StackGrads&)> collect =
        [&](std::vector<Layer>& stack, StackGrads& g) {
            for (std::size_t i = 0; i < stack.size(); ++i) {
                if (stack[i].kind == LayerKind::Conv) {
                    for (std::size_t j = 0; j < stack[i].weights.data().size(); ++j) {
                        params.push_back(&stack[i].weights.data()[j]);
                        analytic.push_back(&g.weight[i].data()[j]);
                    }
                }
                if (stack[i].kind == LayerKind::Skip) collect(stack[i].inner, g.inner[i]);
            }
        };
    collect(model.processing, grads.processing);

    for (std::size_t i = 0; i < params.size(); ++i) {
        const double save = *params[i];
        *params[i] = save + kGradCheckStep;
        const double up = loss_value(model);
        *params[i] = save - kGradCheckStep;
        const double down = loss_value(model);
        *params[i] = save;
        const double numeric = (up - down) / (2.0 * kGradCheckStep);
        report.max_rel_error = std::max(report.max_rel_error, detail::rel_error(*analytic[i], numeric));
    }
    report.pass = report.max_rel_error <= tol;
    return report;
}

} // namespace renn
