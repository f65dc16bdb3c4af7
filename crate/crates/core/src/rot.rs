//! Axis-angle rotation utilities (plain `f64`, no tape involvement).
//!
//! Conventions used across the crate:
//! * a rotation is an axis-angle vector `ω ∈ R³`: direction = axis,
//!   magnitude = angle in radians;
//! * the canonical representation keeps the angle in `[0, π]`
//!   (see [`canonicalize`]) so every rotation has one encoding;
//! * quaternions are `[w, x, y, z]` with `w ≥ 0` after canonicalization.

/// Machine guard for near-zero angles where the exact Rodrigues
/// coefficients are replaced by their series limits.
const TINY_ANGLE: f64 = 1e-9;

/// Rotation matrix (row-major 3x3) for an axis-angle vector via the
/// Rodrigues formula `R = I + sin(θ)·K + (1-cos(θ))·K²` with `K` the unit
/// cross-product matrix. Near θ=0 the coefficients degrade gracefully to
/// their limits (1 and 1/2).
pub fn rodrigues(omega: [f64; 3]) -> [[f64; 3]; 3] {
    let theta2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let theta = theta2.sqrt();
    // a = sin θ / θ, b = (1 - cos θ) / θ² applied to the *unnormalized* ω.
    let (a, b) = if theta < TINY_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let (wx, wy, wz) = (omega[0], omega[1], omega[2]);
    // K (unnormalized cross matrix) and K² entries expanded by hand.
    [
        [
            1.0 + b * (-wz * wz - wy * wy),
            -a * wz + b * wx * wy,
            a * wy + b * wx * wz,
        ],
        [
            a * wz + b * wx * wy,
            1.0 + b * (-wz * wz - wx * wx),
            -a * wx + b * wy * wz,
        ],
        [
            -a * wy + b * wx * wz,
            a * wx + b * wy * wz,
            1.0 + b * (-wy * wy - wx * wx),
        ],
    ]
}

/// 3x3 matrix product.
pub fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Matrix-vector product `R·v`.
pub fn matvec3(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Maps any axis-angle vector to the equivalent one with angle in
/// `[0, π]`: the angle is wrapped mod 2π and, if it lands above π, the
/// axis is flipped. The rotation is unchanged.
pub fn canonicalize(omega: [f64; 3]) -> [f64; 3] {
    let theta = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    if theta < TINY_ANGLE {
        return omega;
    }
    let axis = [omega[0] / theta, omega[1] / theta, omega[2] / theta];
    let two_pi = 2.0 * std::f64::consts::PI;
    let wrapped = theta.rem_euclid(two_pi);
    let (angle, sign) = if wrapped <= std::f64::consts::PI {
        (wrapped, 1.0)
    } else {
        (two_pi - wrapped, -1.0)
    };
    [
        sign * angle * axis[0],
        sign * angle * axis[1],
        sign * angle * axis[2],
    ]
}

/// Unit quaternion `[w,x,y,z]` for an axis-angle vector.
pub fn quat_from_axis_angle(omega: [f64; 3]) -> [f64; 4] {
    let theta = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    if theta < TINY_ANGLE {
        // sin(θ/2)/θ ≈ 1/2 - θ²/48.
        let half = 0.5 - theta * theta / 48.0;
        return normalize4([1.0, half * omega[0], half * omega[1], half * omega[2]]);
    }
    let half = theta / 2.0;
    let s = half.sin() / theta;
    [half.cos(), s * omega[0], s * omega[1], s * omega[2]]
}

/// Axis-angle vector for a unit quaternion; result is canonical
/// (angle in `[0, π]`).
pub fn axis_angle_from_quat(q: [f64; 4]) -> [f64; 3] {
    // Force w >= 0 so the recovered angle lands in [0, π].
    let q = if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    };
    let sin_half = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if sin_half < TINY_ANGLE {
        // θ ≈ 2 sin(θ/2); scale = θ / sin(θ/2) ≈ 2.
        return [2.0 * q[1], 2.0 * q[2], 2.0 * q[3]];
    }
    let angle = 2.0 * sin_half.atan2(q[0]);
    let scale = angle / sin_half;
    [scale * q[1], scale * q[2], scale * q[3]]
}

/// Hamilton product `a ⊗ b` (apply `b`'s rotation, then `a`'s).
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn normalize4(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Spherical linear interpolation between unit quaternions along the
/// shorter arc. Falls back to normalized lerp when the quaternions are
/// nearly parallel.
pub fn slerp(q0: [f64; 4], q1: [f64; 4], t: f64) -> [f64; 4] {
    let mut dot = q0[0] * q1[0] + q0[1] * q1[1] + q0[2] * q1[2] + q0[3] * q1[3];
    let q1 = if dot < 0.0 {
        dot = -dot;
        [-q1[0], -q1[1], -q1[2], -q1[3]]
    } else {
        q1
    };
    if dot > 1.0 - 1e-10 {
        let mix = [
            q0[0] + t * (q1[0] - q0[0]),
            q0[1] + t * (q1[1] - q0[1]),
            q0[2] + t * (q1[2] - q0[2]),
            q0[3] + t * (q1[3] - q0[3]),
        ];
        return normalize4(mix);
    }
    let omega = dot.clamp(-1.0, 1.0).acos();
    let so = omega.sin();
    let (c0, c1) = (((1.0 - t) * omega).sin() / so, (t * omega).sin() / so);
    [
        c0 * q0[0] + c1 * q1[0],
        c0 * q0[1] + c1 * q1[1],
        c0 * q0[2] + c1 * q1[2],
        c0 * q0[3] + c1 * q1[3],
    ]
}

/// Slerp expressed directly on axis-angle vectors; endpoints are hit
/// exactly (up to canonicalization) at t=0 and t=1.
pub fn slerp_axis_angle(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let q = slerp(quat_from_axis_angle(a), quat_from_axis_angle(b), t);
    axis_angle_from_quat(q)
}

/// Relative rotation angle between two axis-angle vectors, in radians.
pub fn rotation_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let qa = quat_from_axis_angle(a);
    let qb = quat_from_axis_angle(b);
    let dot = (qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3]).abs();
    2.0 * dot.clamp(-1.0, 1.0).acos()
}
