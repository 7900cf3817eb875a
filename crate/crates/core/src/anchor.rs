//! Carrying billboards with the deforming mesh through per-polygon frames.
//!
//! Posing maps local parameters (mu, s, q) into world space:
//!   mu_w = k R mu + T,   s_w = k s,   q_w = quat(R) ⊗ q  (renormalized).
//! The backward pass is the exact transpose of that map, including the
//! quaternion renormalization.

use crate::billboard::BillboardsView;
use crate::error::{Error, Result};
use crate::math::{normalize4_backward, quat_left_matrix, Quat};
use crate::mesh::PolygonFrame;
use nalgebra::{Vector2, Vector3};

#[derive(Clone, Copy, Debug)]
pub struct PosedBillboard {
    pub mu_w: Vector3<f64>,
    pub s_w: Vector2<f64>,
    pub q_w: Quat,
    /// Index of the billboard supplying textures.
    pub source: usize,
}

/// Gradients w.r.t. world-space billboard parameters.
#[derive(Clone, Debug)]
pub struct PosedGrads {
    pub d_mu_w: Vec<Vector3<f64>>,
    pub d_s_w: Vec<Vector2<f64>>,
    pub d_q_w: Vec<[f64; 4]>,
}

impl PosedGrads {
    pub fn zeros(n: usize) -> Self {
        PosedGrads {
            d_mu_w: vec![Vector3::zeros(); n],
            d_s_w: vec![Vector2::zeros(); n],
            d_q_w: vec![[0.0; 4]; n],
        }
    }

    pub fn add(&mut self, other: &PosedGrads, scale: f64) {
        for i in 0..self.d_mu_w.len() {
            self.d_mu_w[i] += other.d_mu_w[i] * scale;
            self.d_s_w[i] += other.d_s_w[i] * scale;
            for k in 0..4 {
                self.d_q_w[i][k] += other.d_q_w[i][k] * scale;
            }
        }
    }
}

/// Gradients w.r.t. local billboard parameters, flat buffers matching the
/// optimizer's parameter groups.
#[derive(Clone, Debug)]
pub struct LocalGrads {
    pub d_mu: Vec<f64>,
    pub d_s: Vec<f64>,
    pub d_q: Vec<f64>,
}

pub fn pose_billboards(
    billboards: &BillboardsView,
    frames: &[PolygonFrame],
) -> Result<Vec<PosedBillboard>> {
    let mut out = Vec::with_capacity(billboards.n);
    for i in 0..billboards.n {
        let anchor = billboards.anchor[i] as usize;
        if anchor >= frames.len() {
            return Err(Error::AnchorOutOfRange {
                billboard: i,
                anchor,
                frames: frames.len(),
            });
        }
        let f = &frames[anchor];
        let q_frame = Quat::from_rotation_matrix(&f.r);
        let q_raw = q_frame.mul(&billboards.q_of(i));
        out.push(PosedBillboard {
            mu_w: f.r * billboards.mu_of(i) * f.k + f.t,
            s_w: billboards.s_of(i) * f.k,
            q_w: q_raw.normalized(),
            source: i,
        });
    }
    Ok(out)
}

/// Chain rule through the posing map: d mu = k Rᵀ d mu_w, d s = k d s_w, and
/// the quaternion path goes through the normalization Jacobian followed by
/// the transpose of the left-multiplication matrix of quat(R).
pub fn backward_pose(
    grads: &PosedGrads,
    billboards: &BillboardsView,
    frames: &[PolygonFrame],
) -> Result<LocalGrads> {
    let n = billboards.n;
    if grads.d_mu_w.len() != n || grads.d_s_w.len() != n || grads.d_q_w.len() != n {
        return Err(Error::ShapeError(format!(
            "posed gradients for {} billboards, expected {n}",
            grads.d_mu_w.len()
        )));
    }
    let mut out = LocalGrads {
        d_mu: vec![0.0; n * 3],
        d_s: vec![0.0; n * 2],
        d_q: vec![0.0; n * 4],
    };
    for i in 0..n {
        let anchor = billboards.anchor[i] as usize;
        if anchor >= frames.len() {
            return Err(Error::AnchorOutOfRange {
                billboard: i,
                anchor,
                frames: frames.len(),
            });
        }
        let f = &frames[anchor];
        let d_mu = f.r.transpose() * grads.d_mu_w[i] * f.k;
        out.d_mu[3 * i] = d_mu.x;
        out.d_mu[3 * i + 1] = d_mu.y;
        out.d_mu[3 * i + 2] = d_mu.z;
        out.d_s[2 * i] = f.k * grads.d_s_w[i].x;
        out.d_s[2 * i + 1] = f.k * grads.d_s_w[i].y;

        let q_frame = Quat::from_rotation_matrix(&f.r);
        let q_raw = q_frame.mul(&billboards.q_of(i));
        let d_raw = normalize4_backward(q_raw.to_array(), grads.d_q_w[i]);
        let l = quat_left_matrix(&q_frame);
        for col in 0..4 {
            let mut acc = 0.0;
            for row in 0..4 {
                acc += l[row][col] * d_raw[row];
            }
            out.d_q[4 * i + col] = acc;
        }
    }
    Ok(out)
}
