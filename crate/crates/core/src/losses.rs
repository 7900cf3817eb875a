//! Training objectives: RGB reconstruction, billboard-stage silhouette Dice,
//! KNN regularization over neighboring billboards, and the position
//! regularizer pulling offsets back to the surface.

use crate::anchor::{PosedBillboard, PosedGrads};
use crate::billboard::BillboardsView;
use crate::error::{Error, Result};
use crate::raster::FeatureImage;
use nalgebra::Vector3;

pub const DICE_EPS: f64 = 1e-6;
/// Keeps std/distance terms differentiable at exactly coincident billboards.
const VAR_EPS: f64 = 1e-12;
const DIST_EPS: f64 = 1e-24;

/// Loss weights; defaults carry the reference training configuration.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_nb: f64,
    pub lambda_knn: f64,
    pub lambda_delta: f64,
    /// Accepted for config compatibility; must be zero (no perceptual
    /// network in this build).
    pub lambda_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_nb: 0.1,
            lambda_knn: 0.1,
            lambda_delta: 0.001,
            lambda_lpips: 0.0,
        }
    }
}

/// Mean squared error over all pixels and channels; gradient 2(a-b)/N.
pub fn mse_loss(a: &FeatureImage, b: &FeatureImage) -> Result<(f64, FeatureImage)> {
    if !a.same_shape(b) {
        return Err(Error::ShapeError(format!(
            "mse shapes {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let n = a.data.len() as f64;
    let mut grad = FeatureImage::zeros(a.width, a.height, a.channels);
    let mut loss = 0.0;
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        loss += d * d;
        grad.data[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Soft Dice loss 1 - (2 Σ p g + ε) / (Σ p + Σ g + ε) with analytic gradient.
pub fn dice_loss(pred: &FeatureImage, gt: &FeatureImage) -> Result<(f64, FeatureImage)> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeError(format!(
            "dice shapes {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..pred.data.len() {
        inter += pred.data[i] * gt.data[i];
        total += pred.data[i] + gt.data[i];
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = total + DICE_EPS;
    let loss = 1.0 - num / den;
    let mut grad = FeatureImage::zeros(pred.width, pred.height, pred.channels);
    for i in 0..pred.data.len() {
        grad.data[i] = -(2.0 * gt.data[i] * den - num) / (den * den);
    }
    Ok((loss, grad))
}

/// Overlap coefficient 2 Σ p g / (Σ p + Σ g + ε); 1 is a perfect match.
pub fn dice_coefficient(pred: &FeatureImage, gt: &FeatureImage) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..pred.data.len() {
        inter += pred.data[i] * gt.data[i];
        total += pred.data[i] + gt.data[i];
    }
    2.0 * inter / (total + DICE_EPS)
}

/// K nearest neighbors of every billboard by center distance, via a uniform
/// grid with expanding shell search. Ties break on billboard index.
pub fn knn_neighbors(posed: &[PosedBillboard], k: usize) -> Result<Vec<Vec<u32>>> {
    let n = posed.len();
    if n < k + 1 {
        return Err(Error::TooFewBillboards { need: k + 1, got: n, k });
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in posed {
        lo = lo.inf(&p.mu_w);
        hi = hi.sup(&p.mu_w);
    }
    let extent = (hi - lo).max().max(1e-12);
    let cells_per_axis = ((n as f64).cbrt().ceil() as usize).clamp(1, 64);
    let cell = extent / cells_per_axis as f64;
    let grid_coord = |p: &Vector3<f64>| -> [i64; 3] {
        [
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        ]
    };
    let mut grid: std::collections::HashMap<[i64; 3], Vec<u32>> = std::collections::HashMap::new();
    for (i, p) in posed.iter().enumerate() {
        grid.entry(grid_coord(&p.mu_w)).or_default().push(i as u32);
    }

    let mut out = Vec::with_capacity(n);
    for (i, p) in posed.iter().enumerate() {
        let home = grid_coord(&p.mu_w);
        // Best-k by (squared distance, index); shell search stops once the
        // kth best is closer than anything the next shell could hold.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        let mut shell = 0i64;
        loop {
            for dx in -shell..=shell {
                for dy in -shell..=shell {
                    for dz in -shell..=shell {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != shell {
                            continue;
                        }
                        let key = [home[0] + dx, home[1] + dy, home[2] + dz];
                        let Some(ids) = grid.get(&key) else { continue };
                        for &j in ids {
                            if j as usize == i {
                                continue;
                            }
                            let d2 = (posed[j as usize].mu_w - p.mu_w).norm_squared();
                            let cand = (d2, j);
                            let pos = best
                                .binary_search_by(|probe| probe.partial_cmp(&cand).unwrap())
                                .unwrap_or_else(|e| e);
                            if pos < k {
                                best.insert(pos, cand);
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            let kth = best.last().map(|b| b.0.sqrt()).unwrap_or(f64::INFINITY);
            let shell_min_dist = shell as f64 * cell;
            if best.len() == k && kth <= shell_min_dist {
                break;
            }
            shell += 1;
            if shell > 3 * cells_per_axis as i64 {
                break; // everything scanned
            }
        }
        out.push(best.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// KNN regularizer with a frozen neighbor assignment: mean over billboards of
/// (per-component std of neighbor orientations + per-component std of
/// neighbor scales + mean distance to the neighbors). Neighbor quaternions
/// are sign-aligned to the center billboard first.
pub fn knn_reg_with_neighbors(
    posed: &[PosedBillboard],
    neighbors: &[Vec<u32>],
) -> (f64, PosedGrads) {
    let n = posed.len();
    let mut grads = PosedGrads::zeros(n);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, nbrs) in neighbors.iter().enumerate() {
        let k = nbrs.len();
        let inv_k = 1.0 / k as f64;
        let qi = posed[i].q_w;

        // Orientation: component-wise std after hemisphere alignment.
        let signs: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                if posed[j as usize].q_w.dot(&qi) < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            })
            .collect();
        for c in 0..4 {
            let vals: Vec<f64> = nbrs
                .iter()
                .zip(signs.iter())
                .map(|(&j, &s)| s * posed[j as usize].q_w.to_array()[c])
                .collect();
            let mean = vals.iter().sum::<f64>() * inv_k;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_k;
            let std = (var + VAR_EPS).sqrt();
            loss += std / 4.0 * inv_n;
            let scale = inv_n / (4.0 * k as f64 * std);
            for ((&j, &s), &v) in nbrs.iter().zip(signs.iter()).zip(vals.iter()) {
                grads.d_q_w[j as usize][c] += scale * (v - mean) * s;
            }
        }

        // Scale: component-wise std.
        for c in 0..2 {
            let vals: Vec<f64> = nbrs
                .iter()
                .map(|&j| posed[j as usize].s_w[c])
                .collect();
            let mean = vals.iter().sum::<f64>() * inv_k;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_k;
            let std = (var + VAR_EPS).sqrt();
            loss += std / 2.0 * inv_n;
            let scale = inv_n / (2.0 * k as f64 * std);
            for (&j, &v) in nbrs.iter().zip(vals.iter()) {
                grads.d_s_w[j as usize][c] += scale * (v - mean);
            }
        }

        // Mean distance to the neighbors.
        for &j in nbrs {
            let d = posed[i].mu_w - posed[j as usize].mu_w;
            let dist = (d.norm_squared() + DIST_EPS).sqrt();
            loss += dist * inv_k * inv_n;
            let g = d * (inv_k * inv_n / dist);
            grads.d_mu_w[i] += g;
            grads.d_mu_w[j as usize] -= g;
        }
    }
    (loss, grads)
}

/// KNN regularizer; the neighbor sets are recomputed on every call and the
/// assignment is treated as piecewise constant by the gradient.
pub fn knn_reg(posed: &[PosedBillboard], k: usize) -> Result<(f64, PosedGrads)> {
    let neighbors = knn_neighbors(posed, k)?;
    Ok(knn_reg_with_neighbors(posed, &neighbors))
}

/// Mean of ‖mu_i‖² over billboards; gradient 2 mu_i / N.
pub fn delta_reg(billboards: &BillboardsView) -> (f64, Vec<f64>) {
    let n = billboards.n;
    let mut grad = vec![0.0; n * 3];
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n * 3 {
        loss += billboards.mu[i] * billboards.mu[i];
        grad[i] = 2.0 * billboards.mu[i] * inv_n;
    }
    (loss * inv_n, grad)
}

/// Everything `total_loss` hands back: per-term values and the direct
/// gradients each term produces (already scaled by its λ).
#[derive(Debug)]
pub struct TotalLoss {
    pub total: f64,
    pub mse: f64,
    pub dice: f64,
    pub knn: f64,
    pub delta: f64,
    /// dL/dI_RGB from the reconstruction term.
    pub d_i_rgb: FeatureImage,
    /// λ_NB · dL/dI_alpha of the billboard opacity map.
    pub d_i_alpha_nb: FeatureImage,
    /// λ_KNN-scaled gradients w.r.t. posed billboard parameters.
    pub d_posed: PosedGrads,
    /// λ_Δ · dL/dmu for the local position offsets, flat n×3.
    pub d_mu: Vec<f64>,
}

/// L = mse + λ_NB·dice + λ_KNN·knn + λ_Δ·delta. The λ_lpips hook is
/// accepted but must be zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    i_rgb: &FeatureImage,
    gt_rgb: &FeatureImage,
    i_alpha_nb: &FeatureImage,
    gt_mask: &FeatureImage,
    billboards: &BillboardsView,
    posed: &[PosedBillboard],
    weights: &LossWeights,
    knn_k: usize,
) -> Result<TotalLoss> {
    if weights.lambda_lpips != 0.0 {
        return Err(Error::UnsupportedLoss(
            "lambda_lpips must be 0: no perceptual network in this build".into(),
        ));
    }
    let (mse, d_i_rgb) = mse_loss(i_rgb, gt_rgb)?;
    let (dice, mut d_alpha) = dice_loss(i_alpha_nb, gt_mask)?;
    for g in d_alpha.data.iter_mut() {
        *g *= weights.lambda_nb;
    }
    let (knn, mut d_posed) = if weights.lambda_knn != 0.0 {
        knn_reg(posed, knn_k)?
    } else {
        (0.0, PosedGrads::zeros(posed.len()))
    };
    if weights.lambda_knn != 0.0 {
        let z = PosedGrads::zeros(posed.len());
        let mut scaled = z;
        scaled.add(&d_posed, weights.lambda_knn);
        d_posed = scaled;
    }
    let (delta, mut d_mu) = delta_reg(billboards);
    for g in d_mu.iter_mut() {
        *g *= weights.lambda_delta;
    }
    Ok(TotalLoss {
        total: mse
            + weights.lambda_nb * dice
            + weights.lambda_knn * knn
            + weights.lambda_delta * delta,
        mse,
        dice,
        knn,
        delta,
        d_i_rgb,
        d_i_alpha_nb: d_alpha,
        d_posed,
        d_mu,
    })
}
