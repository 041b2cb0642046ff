// attack.hpp — attacker simulations and privacy metrics.
//
// Inversion attack: sample N candidate keys, decrypt the carrier slot
// with each, keep the candidate a pluggable scorer likes best.  Metrics:
//
//   delta_theta  arccos <R rho, R' rho>, in [0, pi]
//   rank         spherical-cap measure within delta_theta of the target
//                phase, divided by the measure of the pi/36 "same entity"
//                cap; closed forms for d in {2,3,5}, Monte Carlo otherwise
//   recon error  mean absolute per-coordinate deviation
//
// An uninformed attacker under Haar-uniform keys lands at delta_theta
// around pi/2 on average; the closed forms grow monotonically from 1 at
// delta_theta = pi/36.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "renn/core.hpp"
#include "renn/dataset.hpp"
#include "renn/pipeline.hpp"
#include "renn/rotation.hpp"
#include "renn/tensor.hpp"

namespace renn {

inline constexpr double kSameEntityAngle = std::numbers::pi / 36.0;

// Scores a candidate decrypted component; higher is better for the
// attacker.
using ComponentScorer = std::function<double(const std::vector<double>&)>;

inline ComponentScorer constant_scorer() {
    return [](const std::vector<double>&) { return 0.0; };
}

// Testing oracle: negative distance to the true component.
inline ComponentScorer cheating_scorer(std::vector<double> a_true) {
    return [a = std::move(a_true)](const std::vector<double>& candidate) {
        if (candidate.size() != a.size()) throw ShapeError("cheating_scorer: length mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double diff = candidate[i] - a[i];
            s += diff * diff;
        }
        return -std::sqrt(s);
    };
}

// The deployed attacker: scores candidates with the trained WGAN critic.
inline ComponentScorer critic_scorer(const RealMlp& critic) {
    return [&critic](const std::vector<double>& candidate) {
        return critic.forward(candidate)[0];
    };
}

struct InversionResult {
    RotationMatrix best_key;
    std::vector<double> best_component;
    std::size_t best_index = 0;
    std::size_t samples_used = 0;
};

// Samples N rotations, decrypts component 0 under each, returns the
// highest-scoring candidate (first wins on ties).
inline InversionResult inversion_attack(const DAryTensor& f, const ComponentScorer& scorer,
                                        std::size_t n_samples, std::size_t d, Seed seed) {
    if (n_samples < 1) throw ShapeError("inversion_attack: need at least one sample");
    if (f.d() != d) throw ShapeError("inversion_attack: dimension mismatch");
    InversionResult result;
    double best_score = 0.0;
    for (std::size_t j = 0; j < n_samples; ++j) {
        RotationMatrix candidate_key = sample_rotation(d, derive_seed(seed, j));
        std::vector<double> candidate = rotate_inverse(f, candidate_key).component(0);
        const double score = scorer(candidate);
        if (j == 0 || score > best_score) {
            best_score = score;
            result.best_key = std::move(candidate_key);
            result.best_component = std::move(candidate);
            result.best_index = j;
        }
    }
    result.samples_used = n_samples;
    return result;
}

// Majority label among the k nearest neighbors by L2 distance; distance
// ties resolved toward the lower training index, label ties toward the
// smaller label.
inline std::size_t knn_infer(const std::vector<std::vector<double>>& train_feats,
                             const std::vector<std::size_t>& train_attrs,
                             const std::vector<double>& query, std::size_t k) {
    if (train_feats.empty()) throw ShapeError("knn_infer: empty training set");
    if (train_feats.size() != train_attrs.size()) throw ShapeError("knn_infer: feature/label mismatch");
    if (k == 0 || k > train_feats.size()) throw ShapeError("knn_infer: k out of range");
    if (k % 2 == 0) throw ShapeError("knn_infer: k must be odd");

    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(train_feats.size());
    for (std::size_t i = 0; i < train_feats.size(); ++i) {
        if (train_feats[i].size() != query.size()) throw ShapeError("knn_infer: feature length mismatch");
        double s = 0.0;
        for (std::size_t j = 0; j < query.size(); ++j) {
            const double diff = train_feats[i][j] - query[j];
            s += diff * diff;
        }
        dist.emplace_back(s, i);
    }
    std::sort(dist.begin(), dist.end()); // pair ordering breaks ties by index

    std::vector<std::size_t> votes;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t label = train_attrs[dist[i].second];
        if (label >= votes.size()) votes.resize(label + 1, 0);
        ++votes[label];
    }
    std::size_t best = 0;
    for (std::size_t l = 1; l < votes.size(); ++l)
        if (votes[l] > votes[best]) best = l;
    return best;
}

// Mean absolute per-coordinate deviation.
inline double reconstruction_error(const std::vector<double>& estimate,
                                   const std::vector<double>& truth) {
    if (estimate.size() != truth.size()) throw ShapeError("reconstruction_error: length mismatch");
    if (estimate.empty()) throw ShapeError("reconstruction_error: empty vectors");
    double s = 0.0;
    for (std::size_t i = 0; i < estimate.size(); ++i) s += std::abs(estimate[i] - truth[i]);
    return s / static_cast<double>(estimate.size());
}

// Monte Carlo cap-measure ratio: uniform points on S^{d-1} via normalized
// Gaussians; rank = frac(angle <= delta_theta) / frac(angle <= pi/36),
// both fractions over the same sample set.
inline double rank_monte_carlo(double delta_theta, std::size_t d, std::size_t samples, Seed seed) {
    if (d < 2) throw ShapeError("rank_monte_carlo: d must be >= 2");
    if (delta_theta < 0.0 || delta_theta > std::numbers::pi + 1e-12)
        throw ShapeError("rank_monte_carlo: delta_theta must be in [0, pi]");
    if (samples < 10000) throw ShapeError("rank_monte_carlo: need at least 1e4 samples");

    const double cos_num = std::cos(delta_theta);
    const double cos_den = std::cos(kSameEntityAngle);
    CounterRng rng(seed);
    std::vector<double> point(d);
    std::size_t hits_num = 0, hits_den = 0;
    for (std::size_t i = 0; i < samples; ++i) {
        double norm_sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            point[j] = rng.next_normal();
            norm_sq += point[j] * point[j];
        }
        const double cos_angle = point[0] / std::sqrt(norm_sq); // pole = e_0
        if (cos_angle >= cos_num) ++hits_num;
        if (cos_angle >= cos_den) ++hits_den;
    }
    if (hits_den == 0)
        throw NumericError("rank_monte_carlo: no sample fell in the pi/36 cap; increase samples");
    return static_cast<double>(hits_num) / static_cast<double>(hits_den);
}

// Closed-form rank for the supported dimensions; other d falls back to
// the Monte Carlo estimate.
inline double rank_of_estimate(double delta_theta, std::size_t d,
                               std::size_t fallback_samples = 1000000,
                               Seed fallback_seed = Seed{2024}) {
    if (delta_theta < 0.0 || delta_theta > std::numbers::pi + 1e-12)
        throw ShapeError("rank_of_estimate: delta_theta must be in [0, pi]");
    const double c = std::cos(delta_theta);
    const double c0 = std::cos(kSameEntityAngle);
    switch (d) {
        case 2:
            return 36.0 * delta_theta / std::numbers::pi;
        case 3:
            return (1.0 - c) / (1.0 - c0);
        case 5:
            return (2.0 - 3.0 * c + c * c * c) / (2.0 - 3.0 * c0 + c0 * c0 * c0);
        default:
            return rank_monte_carlo(delta_theta, d, fallback_samples, fallback_seed);
    }
}

// a + gamma * standard normal noise, per coordinate.
inline std::vector<double> noisy_baseline(const std::vector<double>& a, double gamma, Seed seed) {
    if (gamma < 0.0) throw ShapeError("noisy_baseline: gamma must be nonnegative");
    std::vector<double> out = a;
    if (gamma == 0.0) return out;
    CounterRng rng(seed);
    for (double& v : out) v += gamma * rng.next_normal();
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

enum class AttackerKind { InversionConstant, InversionCritic, InversionCheating, Knn, NoisyBaseline };

inline std::string attacker_name(AttackerKind kind) {
    switch (kind) {
        case AttackerKind::InversionConstant: return "inversion_constant";
        case AttackerKind::InversionCritic: return "inversion_critic";
        case AttackerKind::InversionCheating: return "inversion_cheating";
        case AttackerKind::Knn: return "knn";
        case AttackerKind::NoisyBaseline: return "noisy_baseline";
    }
    return "unknown";
}

struct AttackConfig {
    AttackerKind kind = AttackerKind::InversionCritic;
    std::size_t rotation_samples = 1000; // N
    std::size_t knn_k = 3;
    double noise_gamma = 0.5; // noisy-baseline defense strength
    Seed seed{0};
};

struct AttackReport {
    std::size_t sample_id = 0;
    std::string attacker;
    double delta_theta = 0.0;
    double rank = 0.0;
    double reconstruction = 0.0;
    std::size_t samples_used = 0;
    std::uint64_t seed = 0;
    // knn only
    bool has_inferred_label = false;
    std::size_t inferred_label = 0;
    std::size_t true_label = 0;
};

struct AttackSummary {
    std::string attacker;
    std::size_t count = 0;
    double mean_delta_theta = 0.0;
    double std_delta_theta = 0.0;
    double mean_rank = 0.0;
    double mean_reconstruction = 0.0;
    double knn_accuracy = -1.0; // -1 when not applicable
};

namespace detail {

// Encrypted feature plus ground truth for one dataset entry.
struct EncryptedSample {
    RotationMatrix key;
    DAryTensor f;
    std::vector<double> a;
};

inline EncryptedSample encrypt_sample(const ModelSpec& model, const std::vector<double>& input,
                                      Seed seed) {
    EncryptedSample s;
    s.key = sample_rotation(model.d, derive_seed(seed, 0));
    s.a = model.encoder.forward(input);
    s.f = encode(input, model, s.key, derive_seed(seed, 1));
    return s;
}

} // namespace detail

inline AttackSummary summarize_reports(const std::vector<AttackReport>& reports) {
    if (reports.empty()) throw ShapeError("summarize_reports: no reports");
    AttackSummary s;
    s.attacker = reports.front().attacker;
    s.count = reports.size();
    double knn_correct = 0.0;
    bool any_knn = false;
    for (const auto& r : reports) {
        s.mean_delta_theta += r.delta_theta;
        s.mean_rank += r.rank;
        s.mean_reconstruction += r.reconstruction;
        if (r.has_inferred_label) {
            any_knn = true;
            if (r.inferred_label == r.true_label) knn_correct += 1.0;
        }
    }
    const double n = static_cast<double>(s.count);
    s.mean_delta_theta /= n;
    s.mean_rank /= n;
    s.mean_reconstruction /= n;
    for (const auto& r : reports) {
        const double diff = r.delta_theta - s.mean_delta_theta;
        s.std_delta_theta += diff * diff;
    }
    s.std_delta_theta = std::sqrt(s.std_delta_theta / n);
    if (any_knn) s.knn_accuracy = knn_correct / n;
    return s;
}

// Runs the configured attacker over every dataset entry.  Each sample
// gets a fresh key and its own derived random stream, so serial and
// parallel schedules report identical numbers.
inline std::vector<AttackReport> evaluate_privacy(const ModelSpec& model, const LabeledDataset& data,
                                                  const AttackConfig& cfg) {
    if (data.size() == 0) throw ShapeError("evaluate_privacy: empty dataset");
    model.validate();
    std::vector<AttackReport> reports;
    reports.reserve(data.size());

    // knn attacker: build the attacker's training gallery once, from the
    // first half of the dataset, and query with the second half.
    if (cfg.kind == AttackerKind::Knn) {
        const std::size_t split = data.size() / 2;
        if (split == 0 || split == data.size())
            throw ShapeError("evaluate_privacy: knn needs at least two samples");
        std::vector<std::vector<double>> gallery;
        std::vector<std::size_t> gallery_labels;
        for (std::size_t i = 0; i < split; ++i) {
            const Seed ss = derive_seed(cfg.seed, i);
            const auto enc = detail::encrypt_sample(model, data.inputs[i], ss);
            const auto inv = inversion_attack(enc.f, critic_scorer(model.critic),
                                              cfg.rotation_samples, model.d, derive_seed(ss, 2));
            gallery.push_back(inv.best_component);
            gallery_labels.push_back(data.labels[i]);
        }
        for (std::size_t i = split; i < data.size(); ++i) {
            const Seed ss = derive_seed(cfg.seed, i);
            const auto enc = detail::encrypt_sample(model, data.inputs[i], ss);
            const auto inv = inversion_attack(enc.f, critic_scorer(model.critic),
                                              cfg.rotation_samples, model.d, derive_seed(ss, 2));
            AttackReport rep;
            rep.sample_id = i;
            rep.attacker = attacker_name(cfg.kind);
            rep.delta_theta = angle_between(enc.key, inv.best_key);
            rep.rank = rank_of_estimate(rep.delta_theta, model.d);
            rep.reconstruction = reconstruction_error(inv.best_component, enc.a);
            rep.samples_used = inv.samples_used;
            rep.seed = ss.value;
            rep.has_inferred_label = true;
            rep.inferred_label = knn_infer(gallery, gallery_labels, inv.best_component, cfg.knn_k);
            rep.true_label = data.labels[i];
            reports.push_back(std::move(rep));
        }
        return reports;
    }

    for (std::size_t i = 0; i < data.size(); ++i) {
        const Seed ss = derive_seed(cfg.seed, i);
        AttackReport rep;
        rep.sample_id = i;
        rep.attacker = attacker_name(cfg.kind);
        rep.seed = ss.value;
        if (cfg.kind == AttackerKind::NoisyBaseline) {
            // Defense baseline: the plain feature plus gamma-scaled noise
            // is exposed directly; there is no phase to search.
            const std::vector<double> a = model.encoder.forward(data.inputs[i]);
            const std::vector<double> leaked = noisy_baseline(a, cfg.noise_gamma, derive_seed(ss, 3));
            rep.delta_theta = 0.0;
            rep.rank = 0.0; // not applicable
            rep.reconstruction = reconstruction_error(leaked, a);
            rep.samples_used = 1;
        } else {
            const auto enc = detail::encrypt_sample(model, data.inputs[i], ss);
            ComponentScorer scorer;
            switch (cfg.kind) {
                case AttackerKind::InversionConstant: scorer = constant_scorer(); break;
                case AttackerKind::InversionCheating: scorer = cheating_scorer(enc.a); break;
                default: scorer = critic_scorer(model.critic); break;
            }
            const auto inv =
                inversion_attack(enc.f, scorer, cfg.rotation_samples, model.d, derive_seed(ss, 2));
            rep.delta_theta = angle_between(enc.key, inv.best_key);
            rep.rank = rank_of_estimate(rep.delta_theta, model.d);
            rep.reconstruction = reconstruction_error(inv.best_component, enc.a);
            rep.samples_used = inv.samples_used;
        }
        reports.push_back(std::move(rep));
    }
    return reports;
}

} // namespace renn
