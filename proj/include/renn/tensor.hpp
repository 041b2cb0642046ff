// tensor.hpp — d-ary feature tensors.
//
// A DAryTensor holds n elements, each a d-component real vector, stored
// element-major (the d components of one element are contiguous).
// Component 0 is the slot that carries the input information before
// encryption; components 1..d-1 carry the fooling counterparts.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "renn/core.hpp"

namespace renn {

class DAryTensor {
  public:
    DAryTensor() = default;

    DAryTensor(std::size_t n, std::size_t d) : n_(n), d_(d), data_(n * d, 0.0) { check_shape(); }

    DAryTensor(std::size_t n, std::size_t d, std::vector<double> data)
        : n_(n), d_(d), data_(std::move(data)) {
        check_shape();
        if (data_.size() != n_ * d_) throw ShapeError("DAryTensor: data length must be n*d");
        for (double v : data_)
            if (!std::isfinite(v)) throw ShapeError("DAryTensor: non-finite value");
    }

    // Assembles a tensor from d component vectors of equal length.
    static DAryTensor from_components(const std::vector<std::vector<double>>& components) {
        if (components.empty()) throw ShapeError("from_components: need at least one component");
        const std::size_t d = components.size();
        const std::size_t n = components[0].size();
        for (const auto& c : components)
            if (c.size() != n) throw ShapeError("from_components: component lengths differ");
        DAryTensor t(n, d);
        for (std::size_t v = 0; v < n; ++v)
            for (std::size_t k = 0; k < d; ++k) t.at(v, k) = components[k][v];
        return t;
    }

    std::size_t n() const { return n_; }
    std::size_t d() const { return d_; }

    double& at(std::size_t element, std::size_t component) { return data_[element * d_ + component]; }
    double at(std::size_t element, std::size_t component) const { return data_[element * d_ + component]; }

    std::span<double> element(std::size_t v) { return {data_.data() + v * d_, d_}; }
    std::span<const double> element(std::size_t v) const { return {data_.data() + v * d_, d_}; }

    double element_norm(std::size_t v) const {
        double s = 0.0;
        for (double x : element(v)) s += x * x;
        return std::sqrt(s);
    }

    // Copy of component k across all elements (a real vector of length n).
    std::vector<double> component(std::size_t k) const {
        if (k >= d_) throw ShapeError("component: index out of range");
        std::vector<double> out(n_);
        for (std::size_t v = 0; v < n_; ++v) out[v] = at(v, k);
        return out;
    }

    void set_component(std::size_t k, const std::vector<double>& values) {
        if (k >= d_) throw ShapeError("set_component: index out of range");
        if (values.size() != n_) throw ShapeError("set_component: length mismatch");
        for (std::size_t v = 0; v < n_; ++v) at(v, k) = values[v];
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const DAryTensor& other) const { return n_ == other.n_ && d_ == other.d_; }

  private:
    void check_shape() const {
        if (n_ == 0) throw ShapeError("DAryTensor: element count must be positive");
        if (d_ < 2) throw ShapeError("DAryTensor: component count must be >= 2");
    }

    std::size_t n_ = 0;
    std::size_t d_ = 0;
    std::vector<double> data_;
};

// A batch of k tensors of identical shape (batch-normalization statistics
// are taken across this axis).
struct BatchOfDAry {
    std::vector<DAryTensor> tensors;

    BatchOfDAry() = default;
    explicit BatchOfDAry(std::vector<DAryTensor> ts) : tensors(std::move(ts)) {
        if (tensors.empty()) throw ShapeError("BatchOfDAry: empty batch");
        for (const auto& t : tensors)
            if (!t.same_shape(tensors.front())) throw ShapeError("BatchOfDAry: shapes not uniform");
    }

    std::size_t size() const { return tensors.size(); }
    std::size_t n() const { return tensors.front().n(); }
    std::size_t d() const { return tensors.front().d(); }
};

inline double max_abs_difference(const DAryTensor& a, const DAryTensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_difference: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

inline double max_abs_difference(const BatchOfDAry& a, const BatchOfDAry& b) {
    if (a.size() != b.size()) throw ShapeError("max_abs_difference: batch size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, max_abs_difference(a.tensors[i], b.tensors[i]));
    return m;
}

} // namespace renn
