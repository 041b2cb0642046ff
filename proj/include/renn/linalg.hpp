// linalg.hpp — small dense real matrices and vector helpers.
//
// Everything in this project is desk-scale (d in {2,3,5}, feature widths
// of a few dozen), so the matrix type is a plain row-major buffer with
// unblocked kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "renn/core.hpp"

namespace renn {

class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) throw ShapeError("Matrix: data size does not match rows*cols");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

inline std::vector<double> matvec(const Matrix& a, const std::vector<double>& x) {
    if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
    std::vector<double> y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) acc += a(i, j) * x[j];
        y[i] = acc;
    }
    return y;
}

// Determinant by LU with partial pivoting.  Fine for the tiny square
// matrices used here.
inline double determinant(const Matrix& m) {
    if (m.rows() != m.cols()) throw ShapeError("determinant: matrix not square");
    const std::size_t n = m.rows();
    Matrix lu = m;
    double det = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(lu(r, col)) > std::abs(lu(pivot, col))) pivot = r;
        if (lu(pivot, col) == 0.0) return 0.0;
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(lu(pivot, c), lu(col, c));
            det = -det;
        }
        det *= lu(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = lu(r, col) / lu(col, col);
            for (std::size_t c = col; c < n; ++c) lu(r, c) -= f * lu(col, c);
        }
    }
    return det;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline Matrix random_matrix(std::size_t rows, std::size_t cols, CounterRng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = rng.next_normal() * scale;
    return m;
}

} // namespace renn
