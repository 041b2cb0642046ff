#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "renn/layers.hpp"
#include "renn/rotation.hpp"

using namespace renn;

TEST_CASE("conv: identity weights, hand case, shape errors") {
    CounterRng rng(Seed{31});
    const auto f = testutil::random_tensor(6, 3, rng);
    CHECK(max_abs_difference(conv_forward(f, Matrix::identity(6)), f) == 0.0);

    // W = [[1,1]] sums the two elements componentwise
    const DAryTensor g(2, 2, {1, 0, 0, 1});
    const DAryTensor out = conv_forward(g, Matrix(1, 2, {1.0, 1.0}));
    CHECK(out.n() == 1);
    CHECK(out.at(0, 0) == 1.0);
    CHECK(out.at(0, 1) == 1.0);

    CHECK_THROWS_AS(conv_forward(g, Matrix(1, 3, {1, 1, 1})), ShapeError);
}

TEST_CASE("relu: zero element, shrink branch, pass-through branch") {
    const DAryTensor zero(1, 3);
    CHECK(max_abs_difference(relu_forward(zero, 1.0), zero) == 0.0);

    // norm 0.5 < C=1: scaled by 0.5
    const DAryTensor small(1, 2, {0.3, 0.4});
    const DAryTensor out = relu_forward(small, 1.0);
    CHECK(out.at(0, 0) == doctest::Approx(0.15));
    CHECK(out.at(0, 1) == doctest::Approx(0.2));

    // norm 5 >= C=1: unchanged
    const DAryTensor big(1, 2, {3.0, 4.0});
    CHECK(max_abs_difference(relu_forward(big, 1.0), big) == 0.0);

    CHECK_THROWS_AS(relu_forward(big, 0.0), ShapeError);
    CHECK_THROWS_AS(relu_forward(big, -1.0), ShapeError);
}

TEST_CASE("relu: output norm is min(|f|^2/C, |f|)") {
    CounterRng rng(Seed{32});
    for (int trial = 0; trial < 100; ++trial) {
        const auto f = testutil::random_tensor(10, 3, rng);
        const double c = 0.5 + rng.next_unit() * 2.0;
        const auto out = relu_forward(f, c);
        for (std::size_t v = 0; v < f.n(); ++v) {
            const double r = f.element_norm(v);
            const double expected = r >= c ? r : r * r / c;
            CHECK(out.element_norm(v) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("batchnorm: hand cases") {
    // mean squared norm = 1 -> unchanged
    const BatchOfDAry unit({DAryTensor(1, 2, {1, 0}), DAryTensor(1, 2, {0, 1})});
    CHECK(max_abs_difference(batchnorm_forward(unit, 0.0), unit) <= 1e-15);

    // norms^2 = {4, 0}, mean 2, divisor sqrt(2)
    const BatchOfDAry pair({DAryTensor(1, 2, {2, 0}), DAryTensor(1, 2, {0, 0})});
    const auto out = batchnorm_forward(pair, 0.0);
    CHECK(out.tensors[0].at(0, 0) == doctest::Approx(std::sqrt(2.0)));
    CHECK(out.tensors[0].at(0, 1) == 0.0);
    CHECK(out.tensors[1].at(0, 0) == 0.0);

    // all-zero batch stays zero
    const BatchOfDAry zeros({DAryTensor(2, 2), DAryTensor(2, 2)});
    CHECK(max_abs_difference(batchnorm_forward(zeros, 1e-5), zeros) == 0.0);

    CHECK_THROWS_AS(batchnorm_forward(unit, -1.0), ShapeError);
}

TEST_CASE("batchnorm: unit mean squared norm after normalization") {
    CounterRng rng(Seed{33});
    std::vector<DAryTensor> ts;
    for (int s = 0; s < 6; ++s) ts.push_back(testutil::random_tensor(8, 3, rng));
    const auto out = batchnorm_forward(BatchOfDAry(ts), 0.0);
    for (std::size_t v = 0; v < 8; ++v) {
        double mean_sq = 0.0;
        for (const auto& t : out.tensors) {
            const double r = t.element_norm(v);
            mean_sq += r * r;
        }
        mean_sq /= static_cast<double>(out.size());
        CHECK(mean_sq == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("pooling: norm-max selection, componentwise average, tie break") {
    // norms sqrt(2) vs 2: the (2,0) element wins
    const DAryTensor f(2, 2, {1, 1, 2, 0});
    const DAryTensor mx = pool_forward(f, 2, PoolMode::Max);
    CHECK(mx.n() == 1);
    CHECK(mx.at(0, 0) == 2.0);
    CHECK(mx.at(0, 1) == 0.0);

    const DAryTensor av = pool_forward(f, 2, PoolMode::Avg);
    CHECK(av.at(0, 0) == doctest::Approx(1.5));
    CHECK(av.at(0, 1) == doctest::Approx(0.5));

    // equal norms: lowest index selected
    const DAryTensor tie(2, 2, {1, 0, 0, 1});
    const auto res = maxpool_forward_masked(tie, 2);
    CHECK(res.selected[0] == 0);
    CHECK(res.output.at(0, 0) == 1.0);
    CHECK(res.output.at(0, 1) == 0.0);

    CHECK_THROWS_AS(pool_forward(DAryTensor(3, 2), 2, PoolMode::Avg), ShapeError);
}

TEST_CASE("dropout: identity cases and determinism") {
    CounterRng rng(Seed{34});
    const auto f = testutil::random_tensor(64, 3, rng);
    CHECK(max_abs_difference(dropout_forward(f, 0.0, Seed{1}, true), f) == 0.0);
    CHECK(max_abs_difference(dropout_forward(f, 0.7, Seed{1}, false), f) == 0.0);

    const auto a = dropout_forward_masked(f, 0.5, Seed{9}, true);
    const auto b = dropout_forward_masked(f, 0.5, Seed{9}, true);
    CHECK(a.keep == b.keep);
    CHECK(max_abs_difference(a.output, b.output) == 0.0);

    // whole elements dropped; survivors scaled by 1/(1-rate)
    for (std::size_t v = 0; v < f.n(); ++v) {
        if (a.keep[v]) {
            for (std::size_t k = 0; k < 3; ++k)
                CHECK(a.output.at(v, k) == doctest::Approx(f.at(v, k) * 2.0));
        } else {
            for (std::size_t k = 0; k < 3; ++k) CHECK(a.output.at(v, k) == 0.0);
        }
    }
    CHECK_THROWS_AS(dropout_forward(f, 1.0, Seed{1}, true), ShapeError);
    CHECK_THROWS_AS(dropout_forward(f, -0.1, Seed{1}, true), ShapeError);
}

TEST_CASE("skip: empty inner doubles, zero conv passes through, shape change rejected") {
    CounterRng rng(Seed{35});
    const auto f = testutil::random_tensor(4, 2, rng);

    const DAryTensor doubled = skip_forward(f, {});
    for (std::size_t i = 0; i < f.data().size(); ++i)
        CHECK(doubled.data()[i] == doctest::Approx(2.0 * f.data()[i]));

    const DAryTensor same = skip_forward(f, {Layer::conv(Matrix(4, 4))});
    CHECK(max_abs_difference(same, f) == 0.0);

    CHECK_THROWS_AS(skip_forward(f, {Layer::conv(Matrix(3, 4))}), ShapeError);
}

// --------------------------------------------------------------------------
// Equivariance: O(R ∘ f) == R ∘ O(f), single layers at 1e-10 and random
// stacks at 1e-6, masks and seeds fixed across the two paths.
// --------------------------------------------------------------------------

namespace {

// Masks and seeds are held fixed across the two paths: dropout masks are
// pinned by the shared seed, pooling selections by trace replay.
double equivariance_gap(const std::vector<Layer>& stack, const BatchOfDAry& f,
                        const RotationMatrix& r, Seed seed) {
    const EvalContext ctx{seed, true};
    std::vector<LayerTrace> trace;
    const BatchOfDAry plain = stack_forward(stack, f, ctx, &trace);
    const BatchOfDAry lhs = stack_forward(stack, rotate(f, r), ctx, nullptr, &trace);
    return max_abs_difference(lhs, rotate(plain, r));
}

BatchOfDAry random_batch(std::size_t k, std::size_t n, std::size_t d, CounterRng& rng) {
    std::vector<DAryTensor> ts;
    for (std::size_t s = 0; s < k; ++s) ts.push_back(testutil::random_tensor(n, d, rng));
    return BatchOfDAry(std::move(ts));
}

} // namespace

TEST_CASE("equivariance: each single layer within 1e-10") {
    CounterRng rng(Seed{36});
    for (const std::size_t d : {2u, 3u, 5u}) {
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t n = 4 + (rng.next_u64() % 7) * 4; // multiples of 4 up to 28
            const auto f = random_batch(1 + rng.next_u64() % 3, n, d, rng);
            const auto r = sample_rotation(d, Seed{rng.next_u64()});
            const Seed seed{rng.next_u64()};

            Matrix w(3 + rng.next_u64() % 8, n);
            for (double& v : w.data()) v = rng.next_normal() / std::sqrt(static_cast<double>(n));

            CHECK(equivariance_gap({Layer::conv(w)}, f, r, seed) <= 1e-10);
            CHECK(equivariance_gap({Layer::relu(0.5 + rng.next_unit())}, f, r, seed) <= 1e-10);
            CHECK(equivariance_gap({Layer::batchnorm(1e-5)}, f, r, seed) <= 1e-10);
            CHECK(equivariance_gap({Layer::avgpool(2)}, f, r, seed) <= 1e-10);
            CHECK(equivariance_gap({Layer::maxpool(2)}, f, r, seed) <= 1e-10);
            CHECK(equivariance_gap({Layer::dropout(0.3)}, f, r, seed) <= 1e-12);
            CHECK(equivariance_gap({Layer::skip({Layer::relu(1.0)})}, f, r, seed) <= 1e-10);
        }
    }
}

TEST_CASE("equivariance: random stacks of 2-8 layers within 1e-6") {
    CounterRng rng(Seed{37});
    for (const std::size_t d : {2u, 3u, 5u}) {
        for (int trial = 0; trial < 200; ++trial) {
            std::size_t n = 8 + (rng.next_u64() % 16) * 4;
            const auto f = random_batch(1 + rng.next_u64() % 2, n, d, rng);
            const auto stack = testutil::random_stack(2 + rng.next_u64() % 7, n, rng);
            const auto r = sample_rotation(d, Seed{rng.next_u64()});
            CHECK(equivariance_gap(stack, f, r, Seed{rng.next_u64()}) <= 1e-6);
        }
    }
}
