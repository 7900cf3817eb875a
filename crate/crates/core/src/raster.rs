//! Differentiable tiled rasterizer for posed billboards.
//!
//! Geometry follows the explicit ray–plane route: each billboard is the
//! [-1,1]² patch of the plane through `mu_w` spanned by its quaternion
//! frame's x/y axes scaled by `s_w`. Pixels gather candidate billboards from
//! 16×16 tile bins, intersect, sort exactly by depth (billboard index breaks
//! ties), and composite front to back. A brute-force all-pairs compositor
//! doubles as the correctness oracle for the tiling path.
//!
//! The backward pass replays the cached per-pixel hit lists in a fixed order
//! (tile-major, pixel-major, depth order) and merges per-tile partial sums
//! sequentially, so gradients are bit-reproducible for any thread count.

use crate::anchor::{PosedBillboard, PosedGrads};
use crate::billboard::{sample_alpha, texture_footprint, BillboardsView, Footprint};
use crate::camera::{Camera, Ray, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::math::{rot_from_quat, rot_from_quat_with_grad, sigmoid, sigmoid_deriv};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use smallvec::SmallVec;
use std::io::{Read, Write};
use std::path::Path;

pub const TILE_SIZE: usize = 16;
/// Contributions below this sampled opacity are skipped outright.
pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Front-to-back accumulation stops once transmittance falls below this.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// |ray · normal| below this counts as back-parallel (miss).
pub const PARALLEL_EPS: f64 = 1e-9;

/// Screen buffer, row-major, channel-last.
#[derive(Clone, Debug)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y);
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, o: &FeatureImage) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    pub fn max_abs_diff(&self, o: &FeatureImage) -> f64 {
        self.data
            .iter()
            .zip(o.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Debug dump: 16-byte header (magic "NBIM", u32 w/h/c little-endian)
    /// followed by the buffer as f32.
    pub fn write_nbim(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"NBIM")?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        f.write_all(&(self.channels as u32).to_le_bytes())?;
        for &v in &self.data {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_nbim(path: &Path) -> Result<FeatureImage> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"NBIM" {
            return Err(Error::DataError("bad NBIM magic".into()));
        }
        let mut word = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            f.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let mut img = FeatureImage::zeros(dims[0], dims[1], dims[2]);
        for v in &mut img.data {
            f.read_exact(&mut word)?;
            *v = f32::from_le_bytes(word) as f64;
        }
        Ok(img)
    }
}

/// Orthonormal world axes of a billboard plane.
#[derive(Clone, Copy, Debug)]
pub struct PlaneAxes {
    pub rx: Vector3<f64>,
    pub ry: Vector3<f64>,
    pub n: Vector3<f64>,
}

pub fn plane_axes(posed: &PosedBillboard) -> PlaneAxes {
    let r = rot_from_quat(&posed.q_w);
    PlaneAxes {
        rx: r.column(0).into_owned(),
        ry: r.column(1).into_owned(),
        n: r.column(2).into_owned(),
    }
}

/// Bare ray–billboard intersection: depth along the ray and in-plane
/// normalized coordinates.
#[derive(Clone, Copy, Debug)]
pub struct RawHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

#[inline]
fn intersect_with_axes(ray: &Ray, posed: &PosedBillboard, axes: &PlaneAxes) -> Option<RawHit> {
    let denom = ray.dir.dot(&axes.n);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (posed.mu_w - ray.origin).dot(&axes.n) / denom;
    if t <= NEAR_PLANE {
        return None;
    }
    let p = ray.origin + ray.dir * t - posed.mu_w;
    let u = p.dot(&axes.rx) / posed.s_w.x;
    if u.abs() > 1.0 {
        return None;
    }
    let v = p.dot(&axes.ry) / posed.s_w.y;
    if v.abs() > 1.0 {
        return None;
    }
    Some(RawHit { t, u, v })
}

/// Ray–billboard intersection. Misses (back-parallel plane, behind the near
/// plane, or outside the [-1,1]² patch) are values, not errors.
pub fn intersect(ray: &Ray, posed: &PosedBillboard) -> Option<RawHit> {
    intersect_with_axes(ray, posed, &plane_axes(posed))
}

/// One ray-billboard intersection with everything the compositor needs.
#[derive(Clone, Debug)]
pub struct Intersection {
    pub billboard: usize,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub footprint: Footprint,
    pub alpha: f64,
    pub feature: SmallVec<[f64; 8]>,
}

pub fn make_intersection(
    bb: &BillboardsView,
    billboard: usize,
    hit: &RawHit,
) -> Result<Intersection> {
    let fp = texture_footprint(bb.texture_size, hit.u, hit.v)?;
    let alpha = sample_alpha(bb.alpha_of(billboard), &fp);
    let nt = bb.nt_of(billboard);
    let mut feature: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, bb.channels);
    for k in 0..4 {
        let base = fp.texel[k] * bb.channels;
        let w = fp.weight[k];
        for (c, f) in feature.iter_mut().enumerate() {
            *f += w * nt[base + c];
        }
    }
    Ok(Intersection {
        billboard,
        t: hit.t,
        u: hit.u,
        v: hit.v,
        footprint: fp,
        alpha,
        feature,
    })
}

/// Front-to-back compositing of a depth-sorted intersection list:
/// c = Σ f_i α_i Π_{j<i}(1-α_j), alpha = 1 - Π_i (1-α_i).
/// Contributions with α below `ALPHA_CUTOFF` are skipped; when
/// `early_termination` is set, accumulation stops once transmittance drops
/// below `TRANSMITTANCE_FLOOR`.
pub fn composite_pixel(
    hits: &[Intersection],
    channels: usize,
    early_termination: bool,
) -> (SmallVec<[f64; 8]>, f64) {
    debug_assert!(
        hits.windows(2)
            .all(|w| (w[0].t, w[0].billboard) <= (w[1].t, w[1].billboard)),
        "composite_pixel requires input sorted by (t, billboard)"
    );
    let mut feature: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, channels);
    let mut transmittance = 1.0;
    for h in hits {
        if h.alpha < ALPHA_CUTOFF {
            continue;
        }
        let w = h.alpha * transmittance;
        for (c, f) in feature.iter_mut().enumerate() {
            *f += w * h.feature[c];
        }
        transmittance *= 1.0 - h.alpha;
        if early_termination && transmittance < TRANSMITTANCE_FLOOR {
            break;
        }
    }
    (feature, 1.0 - transmittance)
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOpts {
    pub early_termination: bool,
}

impl Default for RenderOpts {
    fn default() -> Self {
        RenderOpts {
            early_termination: true,
        }
    }
}

/// One contributing hit retained for the backward pass. Footprints, opacities
/// and features are recomputed from (u, v) when replayed.
#[derive(Clone, Copy, Debug)]
pub struct CachedHit {
    pub billboard: u32,
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug)]
pub struct TileCache {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// CSR offsets into `hits`, row-major within the tile, length w*h+1.
    pub offsets: Vec<u32>,
    pub hits: Vec<CachedHit>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub width: usize,
    pub height: usize,
    pub n_billboards: usize,
    pub tiles: Vec<TileCache>,
}

pub struct RenderOutput {
    pub features: FeatureImage,
    pub alpha: FeatureImage,
    pub cache: ForwardCache,
}

/// Conservative tile bins from the screen AABB of the four projected
/// billboard corners. Entirely-behind-camera billboards are culled; anything
/// straddling the camera plane is binned everywhere.
fn bin_billboards(
    posed: &[PosedBillboard],
    axes: &[PlaneAxes],
    cam: &Camera,
    tiles_x: usize,
    tiles_y: usize,
) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let full = |bins: &mut Vec<Vec<u32>>, idx: u32| {
        for b in bins.iter_mut() {
            b.push(idx);
        }
    };
    for (i, (p, ax)) in posed.iter().zip(axes.iter()).enumerate() {
        let corners = [
            p.mu_w + ax.rx * p.s_w.x + ax.ry * p.s_w.y,
            p.mu_w + ax.rx * p.s_w.x - ax.ry * p.s_w.y,
            p.mu_w - ax.rx * p.s_w.x + ax.ry * p.s_w.y,
            p.mu_w - ax.rx * p.s_w.x - ax.ry * p.s_w.y,
        ];
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        let mut any_near = false;
        let mut all_behind = true;
        for c in corners {
            let pc = cam.rot * c + cam.trans;
            if pc.z > 0.0 {
                all_behind = false;
            }
            if pc.z <= 1e-6 {
                any_near = true;
                continue;
            }
            let sx = cam.fx * pc.x / pc.z + cam.cx;
            let sy = cam.fy * pc.y / pc.z + cam.cy;
            min_x = min_x.min(sx);
            max_x = max_x.max(sx);
            min_y = min_y.min(sy);
            max_y = max_y.max(sy);
        }
        if all_behind {
            continue;
        }
        if any_near {
            full(&mut bins, i as u32);
            continue;
        }
        // Pixel centers sit at +0.5; expand one pixel for safety.
        let px_lo = ((min_x - 1.5).floor().max(0.0)) as i64;
        let px_hi = ((max_x + 0.5).ceil()) as i64;
        let py_lo = ((min_y - 1.5).floor().max(0.0)) as i64;
        let py_hi = ((max_y + 0.5).ceil()) as i64;
        if px_hi < 0 || py_hi < 0 || px_lo >= cam.width as i64 || py_lo >= cam.height as i64 {
            continue;
        }
        let tx_lo = px_lo.max(0) as usize / TILE_SIZE;
        let tx_hi = (px_hi.min(cam.width as i64 - 1) as usize) / TILE_SIZE;
        let ty_lo = py_lo.max(0) as usize / TILE_SIZE;
        let ty_hi = (py_hi.min(cam.height as i64 - 1) as usize) / TILE_SIZE;
        for ty in ty_lo..=ty_hi {
            for tx in tx_lo..=tx_hi {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    bins
}

struct TileForward {
    cache: TileCache,
    /// w*h*channels features then w*h alphas, row-major within the tile.
    features: Vec<f64>,
    alphas: Vec<f64>,
}

/// Tiled rasterization into a C-channel feature image and an opacity map.
pub fn render(
    bb: &BillboardsView,
    posed: &[PosedBillboard],
    cam: &Camera,
    opts: &RenderOpts,
) -> RenderOutput {
    assert_eq!(bb.n, posed.len(), "billboard/pose count mismatch");
    let (w, h, c) = (cam.width, cam.height, bb.channels);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let axes: Vec<PlaneAxes> = posed.iter().map(plane_axes).collect();
    let bins = bin_billboards(posed, &axes, cam, tiles_x, tiles_y);

    let tiles: Vec<TileForward> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tid| {
            let tx = tid % tiles_x;
            let ty = tid / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = TILE_SIZE.min(w - x0);
            let th = TILE_SIZE.min(h - y0);
            let candidates = &bins[tid];

            let mut features = vec![0.0; tw * th * c];
            let mut alphas = vec![0.0; tw * th];
            let mut offsets = Vec::with_capacity(tw * th + 1);
            offsets.push(0u32);
            let mut hits: Vec<CachedHit> = Vec::new();
            let mut raw: Vec<(f64, u32, f64, f64)> = Vec::new();

            for py in 0..th {
                for px in 0..tw {
                    let ray = cam.ray((x0 + px) as f64 + 0.5, (y0 + py) as f64 + 0.5);
                    raw.clear();
                    for &bi in candidates {
                        if let Some(hit) =
                            intersect_with_axes(&ray, &posed[bi as usize], &axes[bi as usize])
                        {
                            raw.push((hit.t, bi, hit.u, hit.v));
                        }
                    }
                    raw.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

                    let pix = py * tw + px;
                    let fpx = &mut features[pix * c..(pix + 1) * c];
                    let mut transmittance = 1.0;
                    for &(t, bi, u, v) in &raw {
                        let fp = texture_footprint(bb.texture_size, u, v)
                            .expect("hit inside domain");
                        let alpha = sample_alpha(bb.alpha_of(bi as usize), &fp);
                        if alpha < ALPHA_CUTOFF {
                            continue;
                        }
                        let nt = bb.nt_of(bi as usize);
                        let wgt = alpha * transmittance;
                        for k in 0..4 {
                            let base = fp.texel[k] * c;
                            let wk = wgt * fp.weight[k];
                            for (ch, f) in fpx.iter_mut().enumerate() {
                                *f += wk * nt[base + ch];
                            }
                        }
                        hits.push(CachedHit {
                            billboard: bi,
                            t,
                            u,
                            v,
                        });
                        transmittance *= 1.0 - alpha;
                        if opts.early_termination && transmittance < TRANSMITTANCE_FLOOR {
                            break;
                        }
                    }
                    alphas[pix] = 1.0 - transmittance;
                    offsets.push(hits.len() as u32);
                }
            }
            TileForward {
                cache: TileCache {
                    x0,
                    y0,
                    w: tw,
                    h: th,
                    offsets,
                    hits,
                },
                features,
                alphas,
            }
        })
        .collect();

    let mut features = FeatureImage::zeros(w, h, c);
    let mut alpha = FeatureImage::zeros(w, h, 1);
    let mut cache_tiles = Vec::with_capacity(tiles.len());
    for tile in tiles {
        let tc = &tile.cache;
        for py in 0..tc.h {
            for px in 0..tc.w {
                let src = py * tc.w + px;
                let dst = features.index(tc.x0 + px, tc.y0 + py);
                features.data[dst..dst + c].copy_from_slice(&tile.features[src * c..(src + 1) * c]);
                alpha.data[(tc.y0 + py) * w + tc.x0 + px] = tile.alphas[src];
            }
        }
        cache_tiles.push(tile.cache);
    }
    RenderOutput {
        features,
        alpha,
        cache: ForwardCache {
            width: w,
            height: h,
            n_billboards: posed.len(),
            tiles: cache_tiles,
        },
    }
}

/// All-pairs reference compositor: every pixel tests every billboard, with
/// early termination off. The tiled renderer must match it to 1e-5.
pub fn render_brute_force(
    bb: &BillboardsView,
    posed: &[PosedBillboard],
    cam: &Camera,
) -> (FeatureImage, FeatureImage) {
    let (w, h, c) = (cam.width, cam.height, bb.channels);
    let mut features = FeatureImage::zeros(w, h, c);
    let mut alpha = FeatureImage::zeros(w, h, 1);
    for py in 0..h {
        for px in 0..w {
            let ray = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
            let mut hits: Vec<Intersection> = Vec::new();
            for (i, p) in posed.iter().enumerate() {
                if let Some(hit) = intersect(&ray, p) {
                    hits.push(make_intersection(bb, i, &hit).expect("hit inside domain"));
                }
            }
            hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.billboard.cmp(&b.billboard)));
            let (f, a) = composite_pixel(&hits, c, false);
            features.pixel_mut(px, py).copy_from_slice(&f);
            alpha.pixel_mut(px, py)[0] = a;
        }
    }
    (features, alpha)
}

/// Gradients the rasterizer hands back: per-texel texture gradients and
/// world-space geometry gradients.
#[derive(Clone, Debug)]
pub struct RasterGrads {
    pub d_nt: Vec<f64>,
    pub d_alpha_logit: Vec<f64>,
    pub geo: PosedGrads,
}

struct GeomPre {
    rx: Vector3<f64>,
    ry: Vector3<f64>,
    n: Vector3<f64>,
    drx: [Vector3<f64>; 4],
    dry: [Vector3<f64>; 4],
    dn: [Vector3<f64>; 4],
}

struct TileGrads {
    ids: Vec<u32>,
    d_mu_w: Vec<Vector3<f64>>,
    d_s_w: Vec<Vector2<f64>>,
    d_q_w: Vec<[f64; 4]>,
    d_nt: Vec<f64>,
    d_alpha_logit: Vec<f64>,
}

/// Exact reverse of the forward compositing. Texture and opacity gradients
/// scatter through the bilinear footprints; geometry gradients chain through
/// the intersection solve. Hits skipped in the forward pass receive exactly
/// zero gradient.
pub fn render_backward(
    bb: &BillboardsView,
    posed: &[PosedBillboard],
    cam: &Camera,
    cache: &ForwardCache,
    d_features: &FeatureImage,
    d_alpha: &FeatureImage,
) -> Result<RasterGrads> {
    if cache.width != cam.width || cache.height != cam.height {
        return Err(Error::MissingForwardCache(format!(
            "cache is {}x{}, camera is {}x{}",
            cache.width, cache.height, cam.width, cam.height
        )));
    }
    if cache.n_billboards != posed.len() {
        return Err(Error::MissingForwardCache(format!(
            "cache for {} billboards, scene has {}",
            cache.n_billboards,
            posed.len()
        )));
    }
    if d_features.width != cam.width
        || d_features.height != cam.height
        || d_features.channels != bb.channels
        || d_alpha.width != cam.width
        || d_alpha.height != cam.height
        || d_alpha.channels != 1
    {
        return Err(Error::ShapeError(
            "gradient image shape does not match render".into(),
        ));
    }

    let c = bb.channels;
    let texels = bb.texels();
    let geo_pre: Vec<GeomPre> = posed
        .iter()
        .map(|p| {
            let rg = rot_from_quat_with_grad(&p.q_w);
            GeomPre {
                rx: rg.r.column(0).into_owned(),
                ry: rg.r.column(1).into_owned(),
                n: rg.r.column(2).into_owned(),
                drx: std::array::from_fn(|k| rg.dr[k].column(0).into_owned()),
                dry: std::array::from_fn(|k| rg.dr[k].column(1).into_owned()),
                dn: std::array::from_fn(|k| rg.dr[k].column(2).into_owned()),
            }
        })
        .collect();

    let tile_grads: Vec<TileGrads> = cache
        .tiles
        .par_iter()
        .map(|tile| {
            let mut ids: Vec<u32> = tile.hits.iter().map(|h| h.billboard).collect();
            ids.sort_unstable();
            ids.dedup();
            let nb = ids.len();
            let mut tg = TileGrads {
                d_mu_w: vec![Vector3::zeros(); nb],
                d_s_w: vec![Vector2::zeros(); nb],
                d_q_w: vec![[0.0; 4]; nb],
                d_nt: vec![0.0; nb * texels * c],
                d_alpha_logit: vec![0.0; nb * texels],
                ids,
            };
            let mut alphas: Vec<f64> = Vec::new();
            let mut trans: Vec<f64> = Vec::new();
            let mut feats: Vec<f64> = Vec::new();
            let mut fps: Vec<Footprint> = Vec::new();

            for py in 0..tile.h {
                for px in 0..tile.w {
                    let pix = py * tile.w + px;
                    let lo = tile.offsets[pix] as usize;
                    let hi = tile.offsets[pix + 1] as usize;
                    if lo == hi {
                        continue;
                    }
                    let hits = &tile.hits[lo..hi];
                    let gx = tile.x0 + px;
                    let gy = tile.y0 + py;
                    let dc = d_features.pixel(gx, gy);
                    let da = d_alpha.pixel(gx, gy)[0];

                    // Replay the forward scan over the contributing hits.
                    alphas.clear();
                    trans.clear();
                    feats.clear();
                    fps.clear();
                    let mut t_run = 1.0;
                    for hit in hits {
                        let bi = hit.billboard as usize;
                        let fp = texture_footprint(bb.texture_size, hit.u, hit.v)
                            .expect("cached hit inside domain");
                        let alpha = sample_alpha(bb.alpha_of(bi), &fp);
                        let nt = bb.nt_of(bi);
                        let base = feats.len();
                        feats.resize(base + c, 0.0);
                        for k in 0..4 {
                            let tb = fp.texel[k] * c;
                            let wk = fp.weight[k];
                            for ch in 0..c {
                                feats[base + ch] += wk * nt[tb + ch];
                            }
                        }
                        fps.push(fp);
                        alphas.push(alpha);
                        trans.push(t_run);
                        t_run *= 1.0 - alpha;
                    }

                    let ray = cam.ray(gx as f64 + 0.5, gy as f64 + 0.5);
                    // Reverse scan: g_t carries dL/dT_i, seeded by the alpha
                    // map's dependence on the final transmittance.
                    let mut g_t = -da;
                    for i in (0..hits.len()).rev() {
                        let hit = &hits[i];
                        let bi = hit.billboard as usize;
                        let slot = tg.ids.binary_search(&hit.billboard).unwrap();
                        let a_i = alphas[i];
                        let t_i = trans[i];
                        let f_i = &feats[i * c..(i + 1) * c];
                        let fp = &fps[i];

                        let dot_cf: f64 = dc.iter().zip(f_i.iter()).map(|(x, y)| x * y).sum();
                        let d_alpha_i = dot_cf * t_i - g_t * t_i;
                        let w_feat = t_i * a_i;
                        g_t = dot_cf * a_i + g_t * (1.0 - a_i);

                        // Texture gradients through the bilinear weights.
                        let logits = bb.alpha_of(bi);
                        for k in 0..4 {
                            let texel = fp.texel[k];
                            let wk = fp.weight[k];
                            let nt_base = (slot * texels + texel) * c;
                            for ch in 0..c {
                                tg.d_nt[nt_base + ch] += dc[ch] * w_feat * wk;
                            }
                            tg.d_alpha_logit[slot * texels + texel] +=
                                d_alpha_i * wk * sigmoid_deriv(logits[texel]);
                        }

                        // In-plane coordinate gradients.
                        let nt = bb.nt_of(bi);
                        let mut d_u = 0.0;
                        let mut d_v = 0.0;
                        for k in 0..4 {
                            let tb = fp.texel[k] * c;
                            let mut feat_dot = 0.0;
                            for ch in 0..c {
                                feat_dot += dc[ch] * nt[tb + ch];
                            }
                            let sig = sigmoid(logits[fp.texel[k]]);
                            d_u += fp.dw_du[k] * (feat_dot * w_feat + d_alpha_i * sig);
                            d_v += fp.dw_dv[k] * (feat_dot * w_feat + d_alpha_i * sig);
                        }

                        // Geometry gradients via the intersection solve.
                        let g = &geo_pre[bi];
                        let p_bb = &posed[bi];
                        let denom = ray.dir.dot(&g.n);
                        let p_rel = ray.origin + ray.dir * hit.t - p_bb.mu_w;
                        let (sx, sy) = (p_bb.s_w.x, p_bb.s_w.y);
                        let d_rx = ray.dir.dot(&g.rx);
                        let d_ry = ray.dir.dot(&g.ry);

                        let du_dmu = (g.n * (d_rx / denom) - g.rx) / sx;
                        let dv_dmu = (g.n * (d_ry / denom) - g.ry) / sy;
                        tg.d_mu_w[slot] += du_dmu * d_u + dv_dmu * d_v;
                        tg.d_s_w[slot].x += d_u * (-hit.u / sx);
                        tg.d_s_w[slot].y += d_v * (-hit.v / sy);
                        for k in 0..4 {
                            let dt = -p_rel.dot(&g.dn[k]) / denom;
                            let du_q = (dt * d_rx + p_rel.dot(&g.drx[k])) / sx;
                            let dv_q = (dt * d_ry + p_rel.dot(&g.dry[k])) / sy;
                            tg.d_q_w[slot][k] += d_u * du_q + d_v * dv_q;
                        }
                    }
                }
            }
            tg
        })
        .collect();

    // Fixed-order merge: tile-major, billboards in sorted-id order.
    let n = posed.len();
    let mut out = RasterGrads {
        d_nt: vec![0.0; n * texels * c],
        d_alpha_logit: vec![0.0; n * texels],
        geo: PosedGrads::zeros(n),
    };
    for tg in &tile_grads {
        for (slot, &id) in tg.ids.iter().enumerate() {
            let bi = id as usize;
            out.geo.d_mu_w[bi] += tg.d_mu_w[slot];
            out.geo.d_s_w[bi] += tg.d_s_w[slot];
            for k in 0..4 {
                out.geo.d_q_w[bi][k] += tg.d_q_w[slot][k];
            }
            let src = &tg.d_nt[slot * texels * c..(slot + 1) * texels * c];
            let dst = &mut out.d_nt[bi * texels * c..(bi + 1) * texels * c];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
            let src = &tg.d_alpha_logit[slot * texels..(slot + 1) * texels];
            let dst = &mut out.d_alpha_logit[bi * texels..(bi + 1) * texels];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }
    Ok(out)
}
