// helpers.hpp — shared generators and independent oracles for the suite.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "renn/layers.hpp"
#include "renn/rotation.hpp"
#include "renn/tensor.hpp"

namespace testutil {

inline renn::DAryTensor random_tensor(std::size_t n, std::size_t d, renn::CounterRng& rng,
                                      double scale = 1.0) {
    renn::DAryTensor t(n, d);
    for (double& v : t.data()) v = rng.next_normal() * scale;
    return t;
}

inline std::vector<double> random_vector(std::size_t n, renn::CounterRng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_normal() * scale;
    return v;
}

// Random stack of valid equivariant layers; n tracks the element count
// through conv/pool shape changes.
inline std::vector<renn::Layer> random_stack(std::size_t depth, std::size_t& n,
                                             renn::CounterRng& rng) {
    std::vector<renn::Layer> stack;
    for (std::size_t i = 0; i < depth; ++i) {
        switch (rng.next_u64() % 7) {
            case 0: {
                const std::size_t out = 2 + rng.next_u64() % 24;
                renn::Matrix w(out, n);
                const double scale = 1.0 / std::sqrt(static_cast<double>(n));
                for (double& v : w.data()) v = rng.next_normal() * scale;
                stack.push_back(renn::Layer::conv(std::move(w)));
                n = out;
                break;
            }
            case 1:
                stack.push_back(renn::Layer::relu(0.5 + rng.next_unit() * 1.5));
                break;
            case 2:
                stack.push_back(renn::Layer::batchnorm(1e-5));
                break;
            case 3:
            case 4: {
                std::size_t window = 0;
                for (std::size_t w = 2; w <= 4; ++w)
                    if (n % w == 0 && n / w >= 2) {
                        window = w;
                        break;
                    }
                if (window == 0) {
                    stack.push_back(renn::Layer::relu(1.0));
                    break;
                }
                if (rng.next_u64() % 2 == 0)
                    stack.push_back(renn::Layer::avgpool(window));
                else
                    stack.push_back(renn::Layer::maxpool(window));
                n /= window;
                break;
            }
            case 5:
                stack.push_back(renn::Layer::dropout(rng.next_unit() * 0.4));
                break;
            case 6: {
                renn::Matrix w(n, n);
                const double scale = 1.0 / std::sqrt(static_cast<double>(n));
                for (double& v : w.data()) v = rng.next_normal() * scale;
                std::vector<renn::Layer> inner;
                inner.push_back(renn::Layer::conv(std::move(w)));
                inner.push_back(renn::Layer::relu(1.0));
                stack.push_back(renn::Layer::skip(std::move(inner)));
                break;
            }
        }
    }
    return stack;
}

// Composite-Simpson quadrature of the spherical-cap integral
// int_0^alpha sin^{d-2}(t) dt — the defining geometry behind the rank
// closed forms, evaluated numerically and independently of them.
inline double cap_integral(double alpha, std::size_t d, std::size_t intervals = 20000) {
    if (intervals % 2 == 1) ++intervals;
    const double h = alpha / static_cast<double>(intervals);
    const auto f = [d](double t) { return std::pow(std::sin(t), static_cast<double>(d) - 2.0); };
    double sum = f(0.0) + f(alpha);
    for (std::size_t i = 1; i < intervals; ++i) sum += f(h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
    return sum * h / 3.0;
}

inline double rank_quadrature(double delta_theta, std::size_t d) {
    return cap_integral(delta_theta, d) / cap_integral(std::numbers::pi / 36.0, d);
}

} // namespace testutil
