//! Quaternion and small-matrix kernels shared by both filter stages.
//!
//! ## Conventions
//! - [`UnitQuat`] stores `ᴵ_G q̄` scalar-first as `(q0, q1, q2, q3)`. Numerically this is the
//!   Hamilton quaternion of the body→global rotation, so EuRoC ground-truth quaternions
//!   (`q_RS_w, q_RS_x, q_RS_y, q_RS_z`) can be stored without conversion.
//! - [`quat_to_rotmat`] returns `C(q) = R_n^b`, the matrix taking global-frame vectors into
//!   the body frame.
//! - [`quat_multiply`] composes frames so that `C(a ⊗ b) = C(a) · C(b)`.
//! - Attitude errors are local: `C_true = (I − ⌊δθ×⌋) · C_est`.

use nalgebra::{DMatrix, Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat = DMatrix<f64>;

/// Unit quaternion, scalar first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuat {
    pub const fn identity() -> Self {
        Self {
            q0: 1.0,
            q1: 0.0,
            q2: 0.0,
            q3: 0.0,
        }
    }

    /// Builds a quaternion from raw components and normalizes it. The sign is chosen so
    /// that `q0 >= 0`.
    pub fn new_normalize(q0: f64, q1: f64, q2: f64, q3: f64) -> Self {
        Self::from_vec4(&Vector4::new(q0, q1, q2, q3))
    }

    pub fn from_vec4(v: &Vector4<f64>) -> Self {
        let n = v.norm();
        let s = if v[0] < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            q0: v[0] * s,
            q1: v[1] * s,
            q2: v[2] * s,
            q3: v[3] * s,
        }
    }

    pub fn as_vec4(&self) -> Vector4<f64> {
        Vector4::new(self.q0, self.q1, self.q2, self.q3)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.q0, self.q1, self.q2, self.q3]
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.q1, self.q2, self.q3)
    }

    pub fn norm(&self) -> f64 {
        self.as_vec4().norm()
    }

    pub fn inverse(&self) -> Self {
        Self {
            q0: self.q0,
            q1: -self.q1,
            q2: -self.q2,
            q3: -self.q3,
        }
    }

    /// `C(q)`, see [`quat_to_rotmat`].
    pub fn rotmat(&self) -> Mat3 {
        quat_to_rotmat(self)
    }

    /// Quaternion whose `C(q)` equals `c` (a global→body rotation matrix).
    pub fn from_rotmat(c: &Mat3) -> Self {
        let r = Rotation3::from_matrix_unchecked(c.transpose());
        let h = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
        Self::new_normalize(h.w, h.i, h.j, h.k)
    }

    /// Attitude of a body rotated by `angle` about the global-frame `axis`. The resulting
    /// `C(q)` is the transpose of the active rotation about `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new_normalize(c, s * n.x, s * n.y, s * n.z)
    }

    /// Attitude from Z-Y-X Euler angles (yaw, then pitch, then roll; body→global is
    /// `Rz(yaw) Ry(pitch) Rx(roll)`).
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self::from_rotmat(&r.matrix().transpose())
    }

    /// Inverse of [`UnitQuat::from_euler_zyx`]: returns `(roll, pitch, yaw)`.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        let r = Rotation3::from_matrix_unchecked(self.rotmat().transpose());
        r.euler_angles()
    }

    /// Rotation angle (rad) of `self ⊗ other⁻¹`, in `[0, π]`.
    pub fn angle_to(&self, other: &UnitQuat) -> f64 {
        let d = quat_multiply(self, &other.inverse());
        2.0 * d.vector().norm().atan2(d.q0.abs())
    }
}

/// Cross-product matrix: `skew(a) · b = a × b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `Ω(ω) = [[−⌊ω×⌋, ω], [−ωᵀ, 0]]`, laid out for vector-first quaternion components
/// `(q1, q2, q3, q0)`.
pub fn omega_matrix(w: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

/// [`omega_matrix`] permuted to act on scalar-first components `(q0, q1, q2, q3)`, so that
/// `q̇ = ½ · quat_rate_matrix(ω) · q`.
pub fn quat_rate_matrix(w: &Vec3) -> Matrix4<f64> {
    Matrix4::new(
        0.0, -w.x, -w.y, -w.z, //
        w.x, 0.0, w.z, -w.y, //
        w.y, -w.z, 0.0, w.x, //
        w.z, w.y, -w.x, 0.0,
    )
}

/// `R_n^b`, the global→body rotation matrix of `q`.
pub fn quat_to_rotmat(q: &UnitQuat) -> Mat3 {
    let UnitQuat { q0, q1, q2, q3 } = *q;
    Mat3::new(
        q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3,
        2.0 * (q1 * q2 + q0 * q3),
        2.0 * (q1 * q3 - q0 * q2),
        2.0 * (q1 * q2 - q0 * q3),
        q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3,
        2.0 * (q2 * q3 + q0 * q1),
        2.0 * (q1 * q3 + q0 * q2),
        2.0 * (q2 * q3 - q0 * q1),
        q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3,
    )
}

/// Frame composition `a ⊗ b` with `C(a ⊗ b) = C(a) C(b)`, renormalized.
///
/// In terms of the Hamilton product this is `b · a`.
pub fn quat_multiply(a: &UnitQuat, b: &UnitQuat) -> UnitQuat {
    let (wa, va) = (a.q0, a.vector());
    let (wb, vb) = (b.q0, b.vector());
    let w = wb * wa - vb.dot(&va);
    let v = wb * va + wa * vb + vb.cross(&va);
    UnitQuat::new_normalize(w, v.x, v.y, v.z)
}

/// Error quaternion for a small rotation `δθ`: `(1, δθ/2)` normalized, so that
/// `C(small_angle_quat(δθ)) ≈ I − ⌊δθ×⌋`.
pub fn small_angle_quat(dtheta: &Vec3) -> UnitQuat {
    let h = 0.5 * dtheta;
    UnitQuat::new_normalize(1.0, h.x, h.y, h.z)
}

/// Inverse of [`small_angle_quat`] to first order: the `δθ` with
/// `a = small_angle_quat(δθ) ⊗ b`.
pub fn attitude_error(a: &UnitQuat, b: &UnitQuat) -> Vec3 {
    let d = quat_multiply(a, &b.inverse());
    let d = if d.q0 < 0.0 {
        -d.vector()
    } else {
        d.vector()
    };
    2.0 * d
}

/// `(P + Pᵀ) / 2` in place.
pub fn symmetrize(p: &mut Mat) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Largest `|P_ij − P_ji|` divided by `max(1, max |P_ij|)`.
pub fn symmetry_error(p: &Mat) -> f64 {
    let scale = p.amax().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..p.nrows() {
        for j in (i + 1)..p.ncols() {
            worst = worst.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Smallest eigenvalue of the symmetric part of `p`, divided by its trace.
pub fn min_eigen_ratio(p: &Mat) -> f64 {
    let sym = 0.5 * (p + p.transpose());
    let trace = sym.trace();
    let eig = sym.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if trace > 0.0 {
        min / trace
    } else {
        min
    }
}

/// `true` when `p` is symmetric within `1e-9` and its smallest eigenvalue is at least
/// `−1e-9 · trace`.
///
/// The eigenvalue bound is checked with a Cholesky factorization of `P + 1e-9 · trace · I`.
pub fn covariance_is_healthy(p: &Mat) -> bool {
    if symmetry_error(p) > 1e-9 || !p.iter().all(|v| v.is_finite()) {
        return false;
    }
    let n = p.nrows();
    let shifted = p + Mat::identity(n, n) * (1e-9 * p.trace().abs().max(f64::MIN_POSITIVE));
    shifted.cholesky().is_some()
}

/// Full QR factorization `a = Q R` with `Q` square orthonormal (`m × m`).
pub fn full_qr(a: &Mat) -> (Mat, Mat) {
    let m = a.nrows();
    let qr = a.clone().qr();
    let mut qt = Mat::identity(m, m);
    qr.q_tr_mul(&mut qt);
    let r = &qt * a;
    (qt.transpose(), r)
}
