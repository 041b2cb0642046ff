#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "renn/pipeline.hpp"

using namespace renn;

namespace {

// Small model with learned heads; shapes 2 -> 6 -> 4 features, 2 classes.
ModelSpec toy_model(Seed seed, std::size_t d = 3) {
    ModelSpec m;
    m.d = d;
    m.class_count = 2;
    m.encoder = RealMlp::make({2, 6, 4}, derive_seed(seed, 1));
    for (std::size_t i = 0; i + 1 < d; ++i)
        m.fooling_heads.push_back(RealMlp::make({6, 4}, derive_seed(seed, 10 + i)));
    CounterRng rng(derive_seed(seed, 2));
    Matrix w1(6, 4), w2(4, 6);
    for (double& v : w1.data()) v = rng.next_normal() * 0.5;
    for (double& v : w2.data()) v = rng.next_normal() * 0.5;
    m.processing = {Layer::conv(w1), Layer::relu(1.0), Layer::conv(w2), Layer::dropout(0.2)};
    m.decoder = RealMlp::make({4, 2}, derive_seed(seed, 3));
    m.critic = RealMlp::make({4, 8, 1}, derive_seed(seed, 4));
    return m;
}

ModelSpec zero_head_model(Seed seed, std::size_t d = 2) {
    ModelSpec m = toy_model(seed, d);
    for (auto& head : m.fooling_heads)
        for (auto& layer : head.layers()) {
            for (double& v : layer.weight.data()) v = 0.0;
            for (double& v : layer.bias) v = 0.0;
        }
    return m;
}

} // namespace

TEST_CASE("encode: identity key with zero heads puts g(input) in component 0") {
    const ModelSpec m = zero_head_model(Seed{50});
    const std::vector<double> input{0.4, -1.1};
    const DAryTensor f = encode(input, m, RotationMatrix::identity(m.d));
    const std::vector<double> a = m.encoder.forward(input);
    const auto c0 = f.component(0);
    for (std::size_t v = 0; v < a.size(); ++v) {
        CHECK(c0[v] == doctest::Approx(a[v]).epsilon(1e-12));
        CHECK(f.at(v, 1) == 0.0);
    }
}

TEST_CASE("encode: hand case a=1, b=0, 90-degree key gives element (0,1)") {
    // bypass the learned encoder: rotate the assembled tensor directly
    const DAryTensor x(1, 2, {1.0, 0.0});
    const DAryTensor f = rotate(x, RotationMatrix::planar(2, std::numbers::pi / 2));
    CHECK(f.at(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(f.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("encode: per-element norms match the unencrypted assembly") {
    const ModelSpec m = toy_model(Seed{51});
    const std::vector<double> input{1.2, 0.3};
    const DAryTensor plain = encode(input, m, RotationMatrix::identity(m.d));
    for (std::uint64_t s = 0; s < 50; ++s) {
        const DAryTensor f = encode(input, m, sample_rotation(m.d, Seed{s}));
        for (std::size_t v = 0; v < f.n(); ++v)
            CHECK(f.element_norm(v) == doctest::Approx(plain.element_norm(v)).epsilon(1e-12));
    }
}

TEST_CASE("encode: key dimension must match the model") {
    const ModelSpec m = toy_model(Seed{52});
    CHECK_THROWS_AS(encode({1.0, 2.0}, m, RotationMatrix::identity(m.d + 1)), ShapeError);
}

TEST_CASE("process: empty stack and identity conv act as identity") {
    ModelSpec m = toy_model(Seed{53});
    CounterRng rng(Seed{54});
    const auto f = testutil::random_tensor(4, m.d, rng);

    m.processing.clear();
    CHECK(max_abs_difference(process(f, m), f) == 0.0);

    m.processing = {Layer::conv(Matrix::identity(4))};
    CHECK(max_abs_difference(process(f, m), f) == 0.0);
}

TEST_CASE("process: module-level equivariance with masks fixed") {
    const ModelSpec m = toy_model(Seed{55});
    CounterRng rng(Seed{56});
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = testutil::random_tensor(4, m.d, rng);
        const auto r = sample_rotation(m.d, Seed{static_cast<std::uint64_t>(900 + trial)});
        const Seed seed{static_cast<std::uint64_t>(trial)};
        const auto lhs = process(rotate(x, r), m, seed, true);
        const auto rhs = rotate(process(x, m, seed, true), r);
        CHECK(max_abs_difference(lhs, rhs) <= 1e-6);
    }
}

TEST_CASE("decode with the matching key recovers the carrier exactly") {
    // empty processing stack + identity decoder: round trip of component 0
    ModelSpec m = toy_model(Seed{57});
    m.processing.clear();
    m.decoder = RealMlp({DenseLayer{Matrix::identity(4), std::vector<double>(4, 0.0)}});
    m.class_count = 4;
    const std::vector<double> input{0.9, -0.4};
    const std::vector<double> a = m.encoder.forward(input);
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto r = sample_rotation(m.d, Seed{s});
        const Prediction pred = decode(encode(input, m, r), r, m);
        for (std::size_t v = 0; v < a.size(); ++v)
            CHECK(pred.scores[v] == doctest::Approx(a[v]).epsilon(1e-10));
    }
}

TEST_CASE("decode with the wrong key mixes in fooling components") {
    ModelSpec m = toy_model(Seed{58});
    m.processing.clear();
    const std::vector<double> input{0.5, 0.8};
    const std::vector<double> a = m.encoder.forward(input);
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto r = sample_rotation(m.d, Seed{2 * s});
        const auto r_wrong = sample_rotation(m.d, Seed{2 * s + 1});
        if (angle_between(r, r_wrong) <= 1e-6) continue;
        const DAryTensor f = encode(input, m, r);
        const auto extracted = rotate_inverse(f, r_wrong).component(0);
        double max_diff = 0.0;
        for (std::size_t v = 0; v < a.size(); ++v)
            max_diff = std::max(max_diff, std::abs(extracted[v] - a[v]));
        CHECK(max_diff > 0.0);
    }
}

TEST_CASE("full pipeline scores are invariant to the key") {
    const ModelSpec m = toy_model(Seed{59});
    const std::vector<double> input{-0.7, 1.4};
    const Prediction base = forward_plain(input, m);
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto r = sample_rotation(m.d, Seed{s});
        const Prediction pred = forward_encrypted(input, m, r);
        REQUIRE(pred.scores.size() == base.scores.size());
        for (std::size_t i = 0; i < pred.scores.size(); ++i)
            CHECK(std::abs(pred.scores[i] - base.scores[i]) <= 1e-6);
        CHECK(pred.label == base.label);
    }
}

TEST_CASE("forward_plain equals the R-keyed path and stays finite") {
    const ModelSpec m = toy_model(Seed{60}, 5);
    CounterRng rng(Seed{61});
    for (int trial = 0; trial < 20; ++trial) {
        const std::vector<double> input{rng.next_normal(), rng.next_normal()};
        const Prediction plain = forward_plain(input, m);
        const auto r = sample_rotation(m.d, Seed{static_cast<std::uint64_t>(trial)});
        const Prediction keyed = forward_encrypted(input, m, r);
        for (std::size_t i = 0; i < plain.scores.size(); ++i) {
            CHECK(std::isfinite(plain.scores[i]));
            CHECK(std::abs(plain.scores[i] - keyed.scores[i]) <= 1e-6);
        }
    }
}

TEST_CASE("model validation catches shape breaks") {
    ModelSpec m = toy_model(Seed{62});
    m.fooling_heads.pop_back();
    CHECK_THROWS_AS(m.validate(), ShapeError);

    ModelSpec m2 = toy_model(Seed{63});
    m2.decoder = RealMlp::make({5, 2}, Seed{1});
    CHECK_THROWS_AS(m2.validate(), ShapeError);
}

TEST_CASE("lower-d model embedded into higher d gives identical outputs") {
    // d'=2 model lifted to d=5: same weights, zero-padded features,
    // block-embedded keys; component-0 outputs must agree.
    const ModelSpec m2 = toy_model(Seed{64}, 2);
    CounterRng rng(Seed{65});
    for (int trial = 0; trial < 100; ++trial) {
        const std::vector<double> input{rng.next_normal(), rng.next_normal()};
        const auto r2 = sample_rotation(2, Seed{static_cast<std::uint64_t>(7000 + trial)});
        const DAryTensor f2 = encode(input, m2, r2);
        const DAryTensor h2 = stack_forward(m2.processing, f2, EvalContext{Seed{1}, false});
        const auto out2 = rotate_inverse(h2, r2).component(0);

        const auto r5 = embed_rotation(r2, 5);
        const DAryTensor f5 = rotate(embed_feature(rotate_inverse(f2, r2), 5), r5);
        const DAryTensor h5 = stack_forward(m2.processing, f5, EvalContext{Seed{1}, false});
        const auto out5 = rotate_inverse(h5, r5).component(0);

        for (std::size_t v = 0; v < out2.size(); ++v)
            CHECK(std::abs(out5[v] - out2[v]) <= 1e-9);
    }
}
