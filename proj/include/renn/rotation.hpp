// rotation.hpp — SO(d) keys, Haar sampling, rotation of d-ary features,
// and phase geometry.
//
// A rotation matrix R acts on a feature by multiplying every element's
// d-vector: (R ∘ f)_v = R f_v, column convention v' = R v.  The phase of
// a key is the image of the canonical axis rho = [1,0,...,0]^T, i.e. the
// first column of R: it identifies which direction of each element's
// d-vector carries the true feature.
//
// Haar sampling: fill d x d with standard normals, orthonormalize columns
// by modified Gram-Schmidt (the triangular factor's diagonal is then
// positive, which makes the factorization unique and the Q factor
// Haar-distributed on O(d)), and flip the last column when det = -1 to
// land in SO(d).  Deterministic per (d, seed).

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "renn/core.hpp"
#include "renn/linalg.hpp"
#include "renn/tensor.hpp"

namespace renn {

class RotationMatrix {
  public:
    RotationMatrix() = default;

    static RotationMatrix identity(std::size_t d) {
        if (d < 2) throw ShapeError("RotationMatrix: dimension must be >= 2");
        return RotationMatrix(Matrix::identity(d));
    }

    // Shape and finiteness are enforced here; orthogonality is not, so
    // that validate_rotation can be exercised on non-rotations.
    static RotationMatrix from_entries(std::size_t d, std::vector<double> entries) {
        if (d < 2) throw ShapeError("RotationMatrix: dimension must be >= 2");
        Matrix m(d, d, std::move(entries));
        if (!m.all_finite()) throw ShapeError("RotationMatrix: non-finite entry");
        return RotationMatrix(std::move(m));
    }

    static RotationMatrix from_matrix(Matrix m) {
        if (m.rows() != m.cols()) throw ShapeError("RotationMatrix: matrix not square");
        if (m.rows() < 2) throw ShapeError("RotationMatrix: dimension must be >= 2");
        if (!m.all_finite()) throw ShapeError("RotationMatrix: non-finite entry");
        return RotationMatrix(std::move(m));
    }

    // Planar rotation by angle in the (0,1) coordinate plane, identity
    // elsewhere.  Handy for hand-built test cases at any d.
    static RotationMatrix planar(std::size_t d, double angle) {
        Matrix m = Matrix::identity(d);
        m(0, 0) = std::cos(angle);
        m(0, 1) = -std::sin(angle);
        m(1, 0) = std::sin(angle);
        m(1, 1) = std::cos(angle);
        return RotationMatrix(std::move(m));
    }

    std::size_t d() const { return matrix_.rows(); }
    double operator()(std::size_t r, std::size_t c) const { return matrix_(r, c); }
    const Matrix& matrix() const { return matrix_; }

    RotationMatrix transposed() const { return RotationMatrix(matrix_.transposed()); }

    // Group composition: (a * b) acts as "apply b, then a".
    friend RotationMatrix operator*(const RotationMatrix& a, const RotationMatrix& b) {
        if (a.d() != b.d()) throw ShapeError("RotationMatrix: dimension mismatch in product");
        return RotationMatrix(matmul(a.matrix_, b.matrix_));
    }

  private:
    explicit RotationMatrix(Matrix m) : matrix_(std::move(m)) {}
    Matrix matrix_;
};

// Unit direction on S^{d-1}; the private key theta = R * rho.
struct PhaseVector {
    std::vector<double> coords;

    std::size_t d() const { return coords.size(); }
};

struct RotationCheck {
    double max_orthogonality_deviation = 0.0; // max-abs entry of R^T R - I
    double determinant_deviation = 0.0;       // |det(R) - 1|
    bool pass = false;
};

inline constexpr double kRotationTolerance = 1e-10;

// Report-only check of the SO(d) invariants.
inline RotationCheck validate_rotation(const RotationMatrix& r) {
    const std::size_t d = r.d();
    RotationCheck check;
    const Matrix rtr = matmul(r.matrix().transposed(), r.matrix());
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double target = (i == j) ? 1.0 : 0.0;
            check.max_orthogonality_deviation =
                std::max(check.max_orthogonality_deviation, std::abs(rtr(i, j) - target));
        }
    check.determinant_deviation = std::abs(determinant(r.matrix()) - 1.0);
    check.pass = check.max_orthogonality_deviation <= kRotationTolerance &&
                 check.determinant_deviation <= kRotationTolerance;
    return check;
}

// Applies R to every element of f.
inline DAryTensor rotate(const DAryTensor& f, const RotationMatrix& r) {
    if (f.d() != r.d()) throw ShapeError("rotate: tensor d does not match rotation d");
    const std::size_t n = f.n();
    const std::size_t d = f.d();
    DAryTensor out(n, d);
    for (std::size_t v = 0; v < n; ++v) {
        const auto in = f.element(v);
        auto dst = out.element(v);
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += r(i, j) * in[j];
            dst[i] = acc;
        }
    }
    return out;
}

// Applies R^{-1} = R^T to every element (decryption direction).
inline DAryTensor rotate_inverse(const DAryTensor& f, const RotationMatrix& r) {
    return rotate(f, r.transposed());
}

inline BatchOfDAry rotate(const BatchOfDAry& batch, const RotationMatrix& r) {
    std::vector<DAryTensor> out;
    out.reserve(batch.size());
    for (const auto& t : batch.tensors) out.push_back(rotate(t, r));
    return BatchOfDAry(std::move(out));
}

// Haar-uniform sample from SO(d).  Deterministic per (d, seed).
inline RotationMatrix sample_rotation(std::size_t d, Seed seed) {
    if (d < 2) throw ShapeError("sample_rotation: dimension must be >= 2");
    CounterRng rng(seed);
    for (int attempt = 0; attempt < 64; ++attempt) {
        Matrix g(d, d);
        for (auto& v : g.data()) v = rng.next_normal();

        // Modified Gram-Schmidt over columns, one re-orthogonalization
        // pass.  Residual norms (the triangular diagonal) stay positive.
        bool degenerate = false;
        for (std::size_t j = 0; j < d && !degenerate; ++j) {
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t k = 0; k < j; ++k) {
                    double proj = 0.0;
                    for (std::size_t i = 0; i < d; ++i) proj += g(i, k) * g(i, j);
                    for (std::size_t i = 0; i < d; ++i) g(i, j) -= proj * g(i, k);
                }
            }
            double norm = 0.0;
            for (std::size_t i = 0; i < d; ++i) norm += g(i, j) * g(i, j);
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                degenerate = true;
                break;
            }
            for (std::size_t i = 0; i < d; ++i) g(i, j) /= norm;
        }
        if (degenerate) continue; // resample; the rng stream moves on

        if (determinant(g) < 0.0)
            for (std::size_t i = 0; i < d; ++i) g(i, d - 1) = -g(i, d - 1);
        return RotationMatrix::from_matrix(std::move(g));
    }
    throw NumericError("sample_rotation: repeated degenerate Gaussian draws");
}

// theta = R * rho with rho = [1,0,...,0]^T, i.e. the first column of R.
inline PhaseVector phase_of(const RotationMatrix& r) {
    PhaseVector phase;
    phase.coords.resize(r.d());
    for (std::size_t i = 0; i < r.d(); ++i) phase.coords[i] = r(i, 0);
    return phase;
}

// arccos of the (clamped) inner product, evaluated through atan2 of the
// chord and anti-chord lengths: the same function, but exact at 0 and pi
// and first-order accurate everywhere, where acos alone loses half the
// significant digits near +-1.
inline double angle_between(const PhaseVector& a, const PhaseVector& b) {
    if (a.d() != b.d()) throw ShapeError("angle_between: dimension mismatch");
    double diff_sq = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < a.coords.size(); ++i) {
        const double d1 = a.coords[i] - b.coords[i];
        const double d2 = a.coords[i] + b.coords[i];
        diff_sq += d1 * d1;
        sum_sq += d2 * d2;
    }
    return 2.0 * std::atan2(std::sqrt(diff_sq), std::sqrt(sum_sq));
}

// Difference angle between two keys' phases, in [0, pi].
inline double angle_between(const RotationMatrix& r1, const RotationMatrix& r2) {
    if (r1.d() != r2.d()) throw ShapeError("angle_between: dimension mismatch");
    return angle_between(phase_of(r1), phase_of(r2));
}

// Embeds a d'-dimensional rotation into dimension d > d': R_low in the
// top-left block, identity in the bottom-right block.  The identity block
// keeps the result in SO(d) while acting as R_low on the first d'
// components and leaving the zero-padded components untouched.
inline RotationMatrix embed_rotation(const RotationMatrix& r_low, std::size_t d) {
    if (d <= r_low.d()) throw ShapeError("embed_rotation: target dimension must exceed source");
    Matrix m = Matrix::identity(d);
    for (std::size_t i = 0; i < r_low.d(); ++i)
        for (std::size_t j = 0; j < r_low.d(); ++j) m(i, j) = r_low(i, j);
    return RotationMatrix::from_matrix(std::move(m));
}

// Zero-pads every element of a d'-ary feature up to d components.
inline DAryTensor embed_feature(const DAryTensor& x_low, std::size_t d) {
    if (d <= x_low.d()) throw ShapeError("embed_feature: target dimension must exceed source");
    DAryTensor out(x_low.n(), d);
    for (std::size_t v = 0; v < x_low.n(); ++v)
        for (std::size_t k = 0; k < x_low.d(); ++k) out.at(v, k) = x_low.at(v, k);
    return out;
}

} // namespace renn
