//! Quaternion and small numeric helpers shared across the crate.
//!
//! Quaternions use the Hamilton convention with scalar-first storage
//! `(w, x, y, z)`. Rotation matrices act on column vectors.

use nalgebra::{Matrix3, Vector3};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Inverse of `sigmoid`. Input is clamped away from {0, 1} so the result is finite.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quat::new(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Extract the quaternion of a rotation matrix (Shepperd's branch method).
    /// Sign convention: `w >= 0`.
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Quat {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let q = q.normalized();
        if q.w < 0.0 {
            Quat::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        }
    }
}

/// Rotation matrix of a quaternion assumed to already be unit length.
pub fn rot_from_unit_quat(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of an arbitrary (possibly non-unit) quaternion: normalizes first.
pub fn rot_from_quat(q: &Quat) -> Matrix3<f64> {
    rot_from_unit_quat(&q.normalized())
}

/// Rotation matrix together with its Jacobian w.r.t. the *raw* quaternion
/// components (w, x, y, z), i.e. including the normalization step.
pub struct RotGrad {
    pub r: Matrix3<f64>,
    /// dR/dq_k for k = w, x, y, z.
    pub dr: [Matrix3<f64>; 4],
}

pub fn rot_from_quat_with_grad(q: &Quat) -> RotGrad {
    let n = q.norm();
    let u = q.normalized();
    let r = rot_from_unit_quat(&u);
    let (w, x, y, z) = (u.w, u.x, u.y, u.z);

    // dR/du_k at the unit quaternion u.
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let du = [dw, dx, dy, dz];

    // Chain through u = q / |q|: du_k/dq_j = (δ_kj − u_k u_j) / |q|.
    let uv = [w, x, y, z];
    let mut dr = [Matrix3::zeros(); 4];
    for (j, slot) in dr.iter_mut().enumerate() {
        let mut m = Matrix3::zeros();
        for k in 0..4 {
            let dudq = (if k == j { 1.0 } else { 0.0 } - uv[k] * uv[j]) / n;
            m += du[k] * dudq;
        }
        *slot = m;
    }
    RotGrad { r, dr }
}

/// Left-multiplication matrix L(a) with a ⊗ b = L(a) · b (scalar-first 4-vectors).
/// Returned row-major as [[f64; 4]; 4].
pub fn quat_left_matrix(a: &Quat) -> [[f64; 4]; 4] {
    let (w, x, y, z) = (a.w, a.x, a.y, a.z);
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

/// Backward through y = u / |u|: given dL/dy, returns dL/du.
pub fn normalize4_backward(u: [f64; 4], grad_y: [f64; 4]) -> [f64; 4] {
    let n = (u.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let y: Vec<f64> = u.iter().map(|a| a / n).collect();
    let dot: f64 = y.iter().zip(grad_y.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_y[i] - y[i] * dot) / n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quat_identity_rotation() {
        let r = rot_from_quat(&Quat::IDENTITY);
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quat_roundtrip_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let q = Quat::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalized();
            let r = rot_from_unit_quat(&q);
            let q2 = Quat::from_rotation_matrix(&r);
            // Same rotation up to sign; convention forces w >= 0.
            let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
            assert_relative_eq!(q.w * sign, q2.w, epsilon = 1e-12);
            assert_relative_eq!(q.x * sign, q2.x, epsilon = 1e-12);
            assert_relative_eq!(q.y * sign, q2.y, epsilon = 1e-12);
            assert_relative_eq!(q.z * sign, q2.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_mul_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = Quat::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalized();
            let b = Quat::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalized();
            let rab = rot_from_unit_quat(&a.mul(&b));
            let ra_rb = rot_from_unit_quat(&a) * rot_from_unit_quat(&b);
            assert_relative_eq!(rab, ra_rb, epsilon = 1e-12);
        }
    }

    #[test]
    fn left_matrix_matches_product() {
        let a = Quat::new(0.3, -0.4, 0.1, 0.85).normalized();
        let b = Quat::new(-0.2, 0.7, 0.5, 0.1).normalized();
        let l = quat_left_matrix(&a);
        let prod = a.mul(&b);
        let bv = b.to_array();
        let pv = prod.to_array();
        for i in 0..4 {
            let v: f64 = (0..4).map(|j| l[i][j] * bv[j]).sum();
            assert_relative_eq!(v, pv[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..20 {
            // Deliberately non-unit to exercise the normalization chain.
            let q = Quat::new(
                rng.gen::<f64>() + 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let g = rot_from_quat_with_grad(&q);
            let mut qa = q.to_array();
            for k in 0..4 {
                let orig = qa[k];
                qa[k] = orig + h;
                let rp = rot_from_quat(&Quat::from_array(qa));
                qa[k] = orig - h;
                let rm = rot_from_quat(&Quat::from_array(qa));
                qa[k] = orig;
                let fd = (rp - rm) / (2.0 * h);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!(
                            (fd[(i, j)] - g.dr[k][(i, j)]).abs() < 1e-7,
                            "dR/dq{k} [{i},{j}]: fd {} vs analytic {}",
                            fd[(i, j)],
                            g.dr[k][(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[1e-6, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_relative_eq!(sigmoid(logit(p)), p, epsilon = 1e-12);
        }
    }
}
