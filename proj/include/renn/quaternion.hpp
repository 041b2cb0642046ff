// quaternion.hpp — unit quaternions and the d=3 special case.
//
// A 3-ary feature element (a,b,c) is read as the pure quaternion
// ai + bj + ck.  Rotation about a unit axis o by angle t is the sandwich
// product q p q̄ with q = e^{o t/2} = cos(t/2) + sin(t/2)(o1 i + o2 j + o3 k).
// Basis products: i² = j² = k² = ijk = −1, ij = k, jk = i, ki = j.

#pragma once

#include <array>
#include <cmath>

#include "renn/core.hpp"
#include "renn/rotation.hpp"
#include "renn/tensor.hpp"

namespace renn {

struct UnitQuaternion {
    double w = 1.0; // real part
    double x = 0.0; // i
    double y = 0.0; // j
    double z = 0.0; // k

    static UnitQuaternion identity() { return {}; }

    // e^{o * angle/2} for a (not necessarily normalized) axis.
    static UnitQuaternion from_axis_angle(std::array<double, 3> axis, double angle) {
        const double len = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
        if (len < 1e-300) throw ShapeError("from_axis_angle: zero axis");
        const double s = std::sin(angle / 2.0) / len;
        return {std::cos(angle / 2.0), s * axis[0], s * axis[1], s * axis[2]};
    }

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    bool is_unit(double tol = 1e-10) const { return std::abs(norm() - 1.0) <= tol; }

    UnitQuaternion conjugate() const { return {w, -x, -y, -z}; }
};

// Hamilton product.
inline UnitQuaternion quat_multiply(const UnitQuaternion& a, const UnitQuaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

// Sandwich product q (ai+bj+ck) q̄ applied to every element of a 3-ary
// feature.
inline DAryTensor quat_rotate(const DAryTensor& f, const UnitQuaternion& q) {
    if (f.d() != 3) throw ShapeError("quat_rotate: feature must be 3-ary");
    if (!q.is_unit()) throw ShapeError("quat_rotate: quaternion is not unit");
    DAryTensor out(f.n(), 3);
    for (std::size_t v = 0; v < f.n(); ++v) {
        const auto e = f.element(v);
        const UnitQuaternion p{0.0, e[0], e[1], e[2]};
        const UnitQuaternion r = quat_multiply(quat_multiply(q, p), q.conjugate());
        out.at(v, 0) = r.x;
        out.at(v, 1) = r.y;
        out.at(v, 2) = r.z;
    }
    return out;
}

// The 3x3 rotation matrix M with rotate(f, M) == quat_rotate(f, q).
inline RotationMatrix quat_to_matrix(const UnitQuaternion& q) {
    if (!q.is_unit()) throw ShapeError("quat_to_matrix: quaternion is not unit");
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    return RotationMatrix::from_entries(
        3, {1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)});
}

} // namespace renn
