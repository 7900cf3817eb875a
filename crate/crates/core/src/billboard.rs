//! Neural billboard primitives: parameter storage, texture sampling, and
//! mesh-driven initialization.
//!
//! Storage is struct-of-arrays so the optimizer can treat each field as one
//! flat buffer. Alpha texels are kept as unconstrained logits and squashed
//! through a sigmoid at sampling time, which keeps sampled opacity in [0,1]
//! under arbitrary gradient steps.

use crate::error::{Error, Result};
use crate::math::{logit, sigmoid};
use crate::mesh::{canonical_frame, TriMesh};
use crate::spectral::SpectralCoords;
use nalgebra::{Vector2, Vector3};

use crate::math::Quat;

pub const DEFAULT_TEXTURE_SIZE: usize = 16;
pub const DEFAULT_CHANNELS: usize = 6;
pub const MIN_SCALE: f64 = 1e-6;
/// Width of the initial opacity bump on the [-1,1]² texture domain.
pub const ALPHA_INIT_SIGMA: f64 = 0.5;

/// All billboards of an avatar, struct-of-arrays.
#[derive(Clone, Debug)]
pub struct BillboardSet {
    pub n: usize,
    pub texture_size: usize,
    pub channels: usize,
    /// Position offsets in the anchor polygon's rest frame, n×3.
    pub mu: Vec<f64>,
    /// In-plane anisotropic scales, n×2, always > MIN_SCALE.
    pub s: Vec<f64>,
    /// Local orientations, n×4 scalar-first unit quaternions.
    pub q: Vec<f64>,
    /// Feature textures, n × S×S × C, row-major with v as rows, channel-last.
    pub nt: Vec<f64>,
    /// Opacity texture logits, n × S×S.
    pub alpha_logit: Vec<f64>,
    /// Anchor triangle per billboard.
    pub anchor: Vec<u32>,
}

/// Borrowed view used by the pose/render pipeline.
#[derive(Clone, Copy)]
pub struct BillboardsView<'a> {
    pub n: usize,
    pub texture_size: usize,
    pub channels: usize,
    pub mu: &'a [f64],
    pub s: &'a [f64],
    pub q: &'a [f64],
    pub nt: &'a [f64],
    pub alpha_logit: &'a [f64],
    pub anchor: &'a [u32],
}

impl BillboardSet {
    pub fn view(&self) -> BillboardsView<'_> {
        BillboardsView {
            n: self.n,
            texture_size: self.texture_size,
            channels: self.channels,
            mu: &self.mu,
            s: &self.s,
            q: &self.q,
            nt: &self.nt,
            alpha_logit: &self.alpha_logit,
            anchor: &self.anchor,
        }
    }
}

impl<'a> BillboardsView<'a> {
    pub fn mu_of(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.mu[3 * i], self.mu[3 * i + 1], self.mu[3 * i + 2])
    }

    pub fn s_of(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.s[2 * i], self.s[2 * i + 1])
    }

    pub fn q_of(&self, i: usize) -> Quat {
        Quat::new(
            self.q[4 * i],
            self.q[4 * i + 1],
            self.q[4 * i + 2],
            self.q[4 * i + 3],
        )
    }

    pub fn texels(&self) -> usize {
        self.texture_size * self.texture_size
    }

    /// Feature texture of billboard `i` (S×S×C).
    pub fn nt_of(&self, i: usize) -> &'a [f64] {
        let len = self.texels() * self.channels;
        &self.nt[i * len..(i + 1) * len]
    }

    /// Alpha logits of billboard `i` (S×S).
    pub fn alpha_of(&self, i: usize) -> &'a [f64] {
        let len = self.texels();
        &self.alpha_logit[i * len..(i + 1) * len]
    }
}

/// Bilinear texture footprint: the four texel corners of the sampling cell
/// and their interpolation weights.
#[derive(Clone, Copy, Debug)]
pub struct Footprint {
    /// Linear texel ids (v * size + u), order (00, 10, 01, 11).
    pub texel: [usize; 4],
    pub weight: [f64; 4],
    /// d(weight)/du and d(weight)/dv for each corner.
    pub dw_du: [f64; 4],
    pub dw_dv: [f64; 4],
}

/// Maps (u, v) ∈ [-1,1]² onto the S×S texel grid and returns the bilinear
/// footprint. Exact texel values are reproduced at grid points.
pub fn texture_footprint(size: usize, u: f64, v: f64) -> Result<Footprint> {
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return Err(Error::OutOfDomain { u, v });
    }
    debug_assert!(size >= 2);
    let scale = (size - 1) as f64 / 2.0;
    let pu = (u + 1.0) * scale;
    let pv = (v + 1.0) * scale;
    let iu = (pu.floor() as usize).min(size - 2);
    let iv = (pv.floor() as usize).min(size - 2);
    let fu = pu - iu as f64;
    let fv = pv - iv as f64;
    let base = iv * size + iu;
    Ok(Footprint {
        texel: [base, base + 1, base + size, base + size + 1],
        weight: [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ],
        dw_du: [
            -(1.0 - fv) * scale,
            (1.0 - fv) * scale,
            -fv * scale,
            fv * scale,
        ],
        dw_dv: [
            -(1.0 - fu) * scale,
            -fu * scale,
            (1.0 - fu) * scale,
            fu * scale,
        ],
    })
}

/// Bilinear sample of a multi-channel texture (channel-last texels) at a
/// precomputed footprint.
pub fn sample_with_footprint(tex: &[f64], channels: usize, fp: &Footprint, out: &mut [f64]) {
    debug_assert_eq!(out.len(), channels);
    out.fill(0.0);
    for k in 0..4 {
        let base = fp.texel[k] * channels;
        let w = fp.weight[k];
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * tex[base + c];
        }
    }
}

/// Single-channel convenience wrapper: returns the interpolated value and
/// the footprint needed for the backward pass.
pub fn sample_texture(tex: &[f64], size: usize, u: f64, v: f64) -> Result<(f64, Footprint)> {
    let fp = texture_footprint(size, u, v)?;
    let mut out = [0.0];
    sample_with_footprint(tex, 1, &fp, &mut out);
    Ok((out[0], fp))
}

/// Sampled opacity: per-texel sigmoid of the stored logits, then bilinear
/// interpolation, so the result is a convex combination of values in [0,1].
pub fn sample_alpha(logits: &[f64], fp: &Footprint) -> f64 {
    let mut a = 0.0;
    for k in 0..4 {
        a += fp.weight[k] * sigmoid(logits[fp.texel[k]]);
    }
    a
}

/// One billboard per mesh triangle: centered on the polygon (mu = 0),
/// aligned with it (q = identity), square scale of half the mean rest edge
/// length, Gaussian opacity bump, and feature texels filled with the anchor
/// triangle's interpolated spectral coordinates.
pub fn init_billboards(
    mesh: &TriMesh,
    coords: &SpectralCoords,
    texture_size: usize,
    channels: usize,
) -> Result<BillboardSet> {
    if channels != coords.m {
        return Err(Error::ChannelMismatch {
            got: channels,
            expected: coords.m,
        });
    }
    assert!(texture_size >= 2, "texture size must be at least 2");
    let n = mesh.n_triangles();
    let texels = texture_size * texture_size;
    let mut set = BillboardSet {
        n,
        texture_size,
        channels,
        mu: vec![0.0; n * 3],
        s: vec![0.0; n * 2],
        q: vec![0.0; n * 4],
        nt: vec![0.0; n * texels * channels],
        alpha_logit: vec![0.0; n * texels],
        anchor: (0..n as u32).collect(),
    };

    let two_sigma_sq = 2.0 * ALPHA_INIT_SIGMA * ALPHA_INIT_SIGMA;
    for i in 0..n {
        let e = 0.5 * mesh.rest_mean_edge(i);
        set.s[2 * i] = e;
        set.s[2 * i + 1] = e;
        set.q[4 * i] = 1.0; // identity quaternion, mu stays zero

        let [ia, ib, ic] = mesh.triangles[i];
        let (va, vb, vc) = (
            mesh.rest_vertices[ia],
            mesh.rest_vertices[ib],
            mesh.rest_vertices[ic],
        );
        let frame = canonical_frame(va, vb, vc);
        let center = mesh.rest_centroid(i);
        let ax = frame.column(0).into_owned();
        let ay = frame.column(1).into_owned();
        let (ca, cb, cc) = (coords.vertex(ia), coords.vertex(ib), coords.vertex(ic));

        for tv in 0..texture_size {
            for tu in 0..texture_size {
                let u = 2.0 * tu as f64 / (texture_size - 1) as f64 - 1.0;
                let v = 2.0 * tv as f64 / (texture_size - 1) as f64 - 1.0;
                let texel = tv * texture_size + tu;
                let g = (-(u * u + v * v) / two_sigma_sq).exp();
                set.alpha_logit[i * texels + texel] = logit(g);

                // In-plane texel position; billboards start coplanar with
                // their triangle, so this lies in the triangle's plane.
                let p = center + ax * (u * e) + ay * (v * e);
                let bary = closest_point_barycentric(p, va, vb, vc);
                let dst =
                    &mut set.nt[(i * texels + texel) * channels..][..channels];
                for c in 0..channels {
                    dst[c] = bary.x * ca[c] + bary.y * cb[c] + bary.z * cc[c];
                }
            }
        }
    }
    Ok(set)
}

/// Barycentric coordinates of the point of the triangle closest to `p`
/// (Ericson, Real-Time Collision Detection §5.1.5).
fn closest_point_barycentric(
    p: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return Vector3::new(1.0, 0.0, 0.0);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return Vector3::new(0.0, 1.0, 0.0);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return Vector3::new(1.0 - t, t, 0.0);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return Vector3::new(0.0, 0.0, 1.0);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return Vector3::new(1.0 - t, 0.0, t);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return Vector3::new(0.0, 1.0 - t, t);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    Vector3::new(1.0 - v - w, v, w)
}
