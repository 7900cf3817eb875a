//! Self-contained validation suites: tiled-vs-brute-force oracle equivalence
//! and the finite-difference gradient checks across every parameter family.
//! Shared by the command-line `oracle-check` / `gradcheck` subcommands and
//! the acceptance tests.

use crate::anchor::{backward_pose, pose_billboards, PosedBillboard, PosedGrads};
use crate::billboard::{sample_alpha, texture_footprint, BillboardSet};
use crate::camera::{Camera, NEAR_PLANE};
use crate::decoder::{self, decode, decode_backward, ActivationCache, DecoderArch, Tensor};
use crate::math::Quat;
use crate::mesh::PolygonFrame;
use crate::raster::{
    plane_axes, render, render_backward, render_brute_force, FeatureImage, RenderOpts,
    ALPHA_CUTOFF,
};
use crate::rng::{SeedRng, STREAM_CHECK};
use nalgebra::{Matrix3, Vector2, Vector3};
use std::time::Instant;

fn random_quat(rng: &mut SeedRng) -> Quat {
    Quat::new(
        rng.uniform() - 0.5,
        rng.uniform() - 0.5,
        rng.uniform() - 0.5,
        rng.uniform() - 0.5,
    )
    .normalized()
}

/// Random billboards in front of the rig camera, posed through identity
/// frames so world parameters equal local ones.
pub fn random_scene(rng: &mut SeedRng, n: usize, texture_size: usize, channels: usize) -> BillboardSet {
    let texels = texture_size * texture_size;
    let mut set = BillboardSet {
        n,
        texture_size,
        channels,
        mu: Vec::new(),
        s: Vec::new(),
        q: Vec::new(),
        nt: Vec::new(),
        alpha_logit: Vec::new(),
        anchor: vec![0; n],
    };
    for _ in 0..n {
        set.mu.extend_from_slice(&[
            rng.range(-0.8, 0.8),
            rng.range(-0.8, 0.8),
            rng.range(-0.5, 0.5),
        ]);
        set.s
            .extend_from_slice(&[rng.range(0.15, 0.5), rng.range(0.15, 0.5)]);
        set.q.extend_from_slice(&random_quat(rng).to_array());
        for _ in 0..texels {
            set.alpha_logit
                .push(crate::math::logit(rng.range(0.05, 0.95)));
            for _ in 0..channels {
                set.nt.push(rng.range(-1.0, 1.0));
            }
        }
    }
    set
}

pub fn posed_identity(set: &BillboardSet) -> Vec<PosedBillboard> {
    let v = set.view();
    (0..set.n)
        .map(|i| PosedBillboard {
            mu_w: v.mu_of(i),
            s_w: v.s_of(i),
            q_w: v.q_of(i).normalized(),
            source: i,
        })
        .collect()
}

pub fn check_camera(width: usize, height: usize) -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        45.0,
        width,
        height,
    )
}

#[derive(Clone, Copy, Debug)]
pub struct OracleReport {
    pub scenes: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

/// Tiled renderer vs the all-pairs compositor on random scenes
/// (≤64 billboards, 64×64 pixels, early termination off).
pub fn oracle_check(n_scenes: usize, seed: u64) -> OracleReport {
    let start = Instant::now();
    let mut rng = SeedRng::new(seed, STREAM_CHECK);
    let cam = check_camera(64, 64);
    let opts = RenderOpts {
        early_termination: false,
    };
    let mut max_diff: f64 = 0.0;
    for _ in 0..n_scenes {
        let n = 1 + rng.index(64);
        let set = random_scene(&mut rng, n, 5, 3);
        let posed = posed_identity(&set);
        let out = render(&set.view(), &posed, &cam, &opts);
        let (bf, ba) = render_brute_force(&set.view(), &posed, &cam);
        max_diff = max_diff
            .max(out.features.max_abs_diff(&bf))
            .max(out.alpha.max_abs_diff(&ba));
    }
    OracleReport {
        scenes: n_scenes,
        max_abs_diff: max_diff,
        tolerance: 1e-5,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub family: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn weighted_render_loss(
    set: &BillboardSet,
    cam: &Camera,
    wf: &FeatureImage,
    wa: &FeatureImage,
) -> f64 {
    let posed = posed_identity(set);
    let out = render(
        &set.view(),
        &posed,
        cam,
        &RenderOpts {
            early_termination: false,
        },
    );
    out.features
        .data
        .iter()
        .zip(wf.data.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + out
            .alpha
            .data
            .iter()
            .zip(wa.data.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
}

/// Texture and opacity texel gradients vs central differences over `scenes`
/// random scenes.
pub fn check_raster_texels(scenes: usize, seed: u64) -> GradReport {
    let mut rng = SeedRng::new(seed, STREAM_CHECK);
    let cam = check_camera(24, 24);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for _ in 0..scenes {
        let mut set = random_scene(&mut rng, 5, 4, 2);
        let mut wf = FeatureImage::zeros(24, 24, 2);
        let mut wa = FeatureImage::zeros(24, 24, 1);
        for x in wf.data.iter_mut().chain(wa.data.iter_mut()) {
            *x = rng.range(-1.0, 1.0);
        }
        let posed = posed_identity(&set);
        let out = render(
            &set.view(),
            &posed,
            &cam,
            &RenderOpts {
                early_termination: false,
            },
        );
        let g = render_backward(&set.view(), &posed, &cam, &out.cache, &wf, &wa)
            .expect("fresh cache");
        for _ in 0..4 {
            let idx = rng.index(set.nt.len());
            let orig = set.nt[idx];
            set.nt[idx] = orig + h;
            let fp = weighted_render_loss(&set, &cam, &wf, &wa);
            set.nt[idx] = orig - h;
            let fm = weighted_render_loss(&set, &cam, &wf, &wa);
            set.nt[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() < 1e-9 && g.d_nt[idx].abs() < 1e-9 {
                continue;
            }
            worst = worst.max(rel_err(fd, g.d_nt[idx]));
            probes += 1;
        }
        for _ in 0..4 {
            let idx = rng.index(set.alpha_logit.len());
            if (crate::math::sigmoid(set.alpha_logit[idx]) - ALPHA_CUTOFF).abs() < 0.05 {
                continue; // stay away from the skip threshold
            }
            let orig = set.alpha_logit[idx];
            set.alpha_logit[idx] = orig + h;
            let fp = weighted_render_loss(&set, &cam, &wf, &wa);
            set.alpha_logit[idx] = orig - h;
            let fm = weighted_render_loss(&set, &cam, &wf, &wa);
            set.alpha_logit[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() < 1e-9 && g.d_alpha_logit[idx].abs() < 1e-9 {
                continue;
            }
            worst = worst.max(rel_err(fd, g.d_alpha_logit[idx]));
            probes += 1;
        }
    }
    GradReport {
        family: "raster texture/alpha texels".into(),
        max_rel_err: worst,
        tolerance: 1e-3,
        probes,
    }
}

/// Pixels whose hits stay clear of billboard edges, grazing angles, the
/// opacity cutoff, and depth-order ties, so central differences are smooth.
fn fd_safe_mask(set: &BillboardSet, posed: &[PosedBillboard], cam: &Camera) -> Vec<bool> {
    let view = set.view();
    let mut mask = vec![true; cam.width * cam.height];
    for py in 0..cam.height {
        for px in 0..cam.width {
            let ray = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
            let mut ts: Vec<f64> = Vec::new();
            let m = &mut mask[py * cam.width + px];
            for p in posed.iter() {
                let axes = plane_axes(p);
                let denom = ray.dir.dot(&axes.n);
                if denom.abs() < 1e-3 {
                    *m = false;
                    continue;
                }
                let t = (p.mu_w - ray.origin).dot(&axes.n) / denom;
                if t <= NEAR_PLANE {
                    continue;
                }
                let rel = ray.origin + ray.dir * t - p.mu_w;
                let u = rel.dot(&axes.rx) / p.s_w.x;
                let v = rel.dot(&axes.ry) / p.s_w.y;
                if (u.abs() - 1.0).abs() < 0.1 || (v.abs() - 1.0).abs() < 0.1 {
                    *m = false;
                }
                if u.abs() <= 1.0 && v.abs() <= 1.0 {
                    let fp = texture_footprint(view.texture_size, u, v).unwrap();
                    if (sample_alpha(view.alpha_of(p.source), &fp) - ALPHA_CUTOFF).abs() < 0.02 {
                        *m = false;
                    }
                    ts.push(t);
                }
            }
            ts.sort_by(f64::total_cmp);
            if ts.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                *m = false;
            }
        }
    }
    mask
}

/// Geometry gradients (mu, s, q) vs central differences away from
/// discontinuities; world gradients are pulled back to local parameters
/// through an identity frame.
pub fn check_raster_geometry(scenes: usize, seed: u64) -> GradReport {
    let mut rng = SeedRng::new(seed, STREAM_CHECK);
    let cam = check_camera(24, 24);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let frames = vec![PolygonFrame {
        t: Vector3::zeros(),
        r: Matrix3::identity(),
        k: 1.0,
    }];
    for _ in 0..scenes {
        let set = random_scene(&mut rng, 4, 4, 2);
        let posed = posed_identity(&set);
        let safe = fd_safe_mask(&set, &posed, &cam);
        let mut wf = FeatureImage::zeros(24, 24, 2);
        let mut wa = FeatureImage::zeros(24, 24, 1);
        for (i, &ok) in safe.iter().enumerate() {
            if ok {
                wf.data[2 * i] = rng.range(-1.0, 1.0);
                wf.data[2 * i + 1] = rng.range(-1.0, 1.0);
                wa.data[i] = rng.range(-1.0, 1.0);
            } else {
                // Burn the draws so probe count does not shift the stream.
                rng.uniform();
                rng.uniform();
                rng.uniform();
            }
        }
        let out = render(
            &set.view(),
            &posed,
            &cam,
            &RenderOpts {
                early_termination: false,
            },
        );
        let g = render_backward(&set.view(), &posed, &cam, &out.cache, &wf, &wa)
            .expect("fresh cache");
        let local = backward_pose(&g.geo, &set.view(), &frames).expect("identity frames");

        let mut probe = set.clone();
        let mut check = |buf: fn(&mut BillboardSet) -> &mut Vec<f64>,
                         idx: usize,
                         analytic: f64,
                         worst: &mut f64,
                         probes: &mut usize| {
            let orig = buf(&mut probe)[idx];
            buf(&mut probe)[idx] = orig + h;
            let fp = weighted_render_loss(&probe, &cam, &wf, &wa);
            buf(&mut probe)[idx] = orig - h;
            let fm = weighted_render_loss(&probe, &cam, &wf, &wa);
            buf(&mut probe)[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
                return;
            }
            *worst = (*worst).max(rel_err(fd, analytic));
            *probes += 1;
        };
        for i in 0..set.n {
            check(|s| &mut s.mu, 3 * i, local.d_mu[3 * i], &mut worst, &mut probes);
            check(|s| &mut s.mu, 3 * i + 2, local.d_mu[3 * i + 2], &mut worst, &mut probes);
            check(|s| &mut s.s, 2 * i, local.d_s[2 * i], &mut worst, &mut probes);
            check(|s| &mut s.s, 2 * i + 1, local.d_s[2 * i + 1], &mut worst, &mut probes);
            check(|s| &mut s.q, 4 * i, local.d_q[4 * i], &mut worst, &mut probes);
            check(|s| &mut s.q, 4 * i + 2, local.d_q[4 * i + 2], &mut worst, &mut probes);
        }
    }
    GradReport {
        family: "raster geometry (mu, s, q)".into(),
        max_rel_err: worst,
        tolerance: 1e-2,
        probes,
    }
}

/// Posing backward (the anchor transform) vs central differences.
pub fn check_pose_backward(configs: usize, seed: u64) -> GradReport {
    let mut rng = SeedRng::new(seed, STREAM_CHECK);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for _ in 0..configs {
        let frame = PolygonFrame {
            t: Vector3::new(rng.uniform(), rng.uniform(), rng.uniform()),
            r: crate::math::rot_from_unit_quat(&random_quat(&mut rng)),
            k: 0.5 + rng.uniform(),
        };
        let mut set = random_scene(&mut rng, 1, 2, 1);
        let w_mu = Vector3::new(rng.uniform(), rng.uniform(), rng.uniform());
        let w_s = Vector2::new(rng.uniform(), rng.uniform());
        let w_q = [rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()];
        let loss = |set: &BillboardSet| -> f64 {
            let p = pose_billboards(&set.view(), std::slice::from_ref(&frame)).unwrap()[0];
            let qa = p.q_w.to_array();
            p.mu_w.dot(&w_mu)
                + p.s_w.dot(&w_s)
                + qa.iter().zip(w_q.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = PosedGrads::zeros(1);
        g.d_mu_w[0] = w_mu;
        g.d_s_w[0] = w_s;
        g.d_q_w[0] = w_q;
        let local =
            backward_pose(&g, &set.view(), std::slice::from_ref(&frame)).expect("one frame");
        let analytic: Vec<f64> = local
            .d_mu
            .iter()
            .chain(local.d_s.iter())
            .chain(local.d_q.iter())
            .copied()
            .collect();
        for k in 0..9 {
            let (buf, idx): (&mut Vec<f64>, usize) = match k {
                0..=2 => (&mut set.mu, k),
                3..=4 => (&mut set.s, k - 3),
                _ => (&mut set.q, k - 5),
            };
            let orig = buf[idx];
            buf[idx] = orig + h;
            let fp = loss(&set);
            let (buf, _) = match k {
                0..=2 => (&mut set.mu, k),
                3..=4 => (&mut set.s, k - 3),
                _ => (&mut set.q, k - 5),
            };
            buf[idx] = orig - h;
            let fm = loss(&set);
            let (buf, _) = match k {
                0..=2 => (&mut set.mu, k),
                3..=4 => (&mut set.s, k - 3),
                _ => (&mut set.q, k - 5),
            };
            buf[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic[k]));
            probes += 1;
        }
    }
    GradReport {
        family: "pose transform backward".into(),
        max_rel_err: worst,
        tolerance: 1e-6,
        probes,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Every decoder layer type individually vs central differences on random
/// 8×8 tensors.
pub fn check_decoder_layers(seed: u64) -> GradReport {
    let mut rng = SeedRng::new(seed, STREAM_CHECK);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probes = 0;

    // Conv blocks: strides 1 and 2, with and without instance norm
    // (covering conv, norm, and the leaky activation).
    for &(stride, norm) in &[(1usize, false), (1, true), (2, false), (2, true)] {
        let (in_ch, out_ch) = (3usize, 4usize);
        let n_w = out_ch * in_ch * 9 + out_ch + if norm { 2 * out_ch } else { 0 };
        let off = decoder::ConvOffsets {
            w: 0,
            b: out_ch * in_ch * 9,
            gamma: out_ch * in_ch * 9 + out_ch,
            beta: out_ch * in_ch * 9 + out_ch + if norm { out_ch } else { 0 },
            in_ch,
            out_ch,
            norm,
        };
        let mut weights: Vec<f64> = (0..n_w).map(|_| rng.uniform() - 0.5).collect();
        if norm {
            for g in &mut weights[off.gamma..off.gamma + out_ch] {
                *g = 0.5 + rng.uniform();
            }
        }
        let mut input = Tensor::zeros(in_ch, 8, 8);
        for v in input.data.iter_mut() {
            *v = rng.range(-1.0, 1.0);
        }
        let out_hw = 8 / stride;
        let loss_w: Vec<f64> = (0..out_ch * out_hw * out_hw)
            .map(|_| rng.uniform() - 0.5)
            .collect();
        let mut cache = decoder::BlockCache::default();
        let out = decoder::conv_block(&input, &weights, &off, stride, &mut cache);
        let mut d_out = Tensor::zeros(out.c, out.h, out.w);
        d_out.data.copy_from_slice(&loss_w);
        let mut d_weights = vec![0.0; n_w];
        let d_input =
            decoder::conv_block_backward(&d_out, &weights, &off, stride, &cache, &mut d_weights);
        for probe in 0..12 {
            let idx = (probe * 41) % n_w;
            let orig = weights[idx];
            let mut c2 = decoder::BlockCache::default();
            weights[idx] = orig + h;
            let fp = dot(
                &decoder::conv_block(&input, &weights, &off, stride, &mut c2).data,
                &loss_w,
            );
            weights[idx] = orig - h;
            let fm = dot(
                &decoder::conv_block(&input, &weights, &off, stride, &mut c2).data,
                &loss_w,
            );
            weights[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() < 1e-7 && d_weights[idx].abs() < 1e-7 {
                continue;
            }
            worst = worst.max(rel_err(fd, d_weights[idx]));
            probes += 1;
        }
        for probe in 0..8 {
            let idx = (probe * 23) % input.data.len();
            let orig = input.data[idx];
            let mut c2 = decoder::BlockCache::default();
            input.data[idx] = orig + h;
            let fp = dot(
                &decoder::conv_block(&input, &weights, &off, stride, &mut c2).data,
                &loss_w,
            );
            input.data[idx] = orig - h;
            let fm = dot(
                &decoder::conv_block(&input, &weights, &off, stride, &mut c2).data,
                &loss_w,
            );
            input.data[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() < 1e-7 && d_input.data[idx].abs() < 1e-7 {
                continue;
            }
            worst = worst.max(rel_err(fd, d_input.data[idx]));
            probes += 1;
        }
    }

    // Bilinear upsampling.
    {
        let mut input = Tensor::zeros(2, 8, 8);
        for v in input.data.iter_mut() {
            *v = rng.range(-1.0, 1.0);
        }
        let loss_w: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.uniform() - 0.5).collect();
        let mut d_out = Tensor::zeros(2, 16, 16);
        d_out.data.copy_from_slice(&loss_w);
        let d_input = decoder::upsample2x_backward(&d_out);
        for i in (0..input.data.len()).step_by(5) {
            let orig = input.data[i];
            input.data[i] = orig + h;
            let fp = dot(&decoder::upsample2x_forward(&input).data, &loss_w);
            input.data[i] = orig - h;
            let fm = dot(&decoder::upsample2x_forward(&input).data, &loss_w);
            input.data[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(fd, d_input.data[i]));
            probes += 1;
        }
    }

    // Sigmoid output heads (1×1 conv + sigmoid).
    {
        let (in_ch, out_ch) = (4usize, 3usize);
        let off = decoder::ConvOffsets {
            w: 0,
            b: out_ch * in_ch,
            gamma: 0,
            beta: 0,
            in_ch,
            out_ch,
            norm: false,
        };
        let n_w = out_ch * in_ch + out_ch;
        let mut weights: Vec<f64> = (0..n_w).map(|_| rng.uniform() - 0.5).collect();
        let mut input = Tensor::zeros(in_ch, 8, 8);
        for v in input.data.iter_mut() {
            *v = rng.range(-1.0, 1.0);
        }
        let loss_w: Vec<f64> = (0..out_ch * 64).map(|_| rng.uniform() - 0.5).collect();
        let out = decoder::head_forward(&input, &weights, &off);
        let mut d_out = Tensor::zeros(out_ch, 8, 8);
        d_out.data.copy_from_slice(&loss_w);
        let mut d_weights = vec![0.0; n_w];
        let mut d_input = Tensor::zeros(in_ch, 8, 8);
        decoder::head_backward(&d_out, &out, &input, &weights, &off, &mut d_weights, &mut d_input);
        for idx in 0..n_w {
            let orig = weights[idx];
            weights[idx] = orig + h;
            let fp = dot(&decoder::head_forward(&input, &weights, &off).data, &loss_w);
            weights[idx] = orig - h;
            let fm = dot(&decoder::head_forward(&input, &weights, &off).data, &loss_w);
            weights[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(fd, d_weights[idx]));
            probes += 1;
        }
        for i in (0..input.data.len()).step_by(7) {
            let orig = input.data[i];
            input.data[i] = orig + h;
            let fp = dot(&decoder::head_forward(&input, &weights, &off).data, &loss_w);
            input.data[i] = orig - h;
            let fm = dot(&decoder::head_forward(&input, &weights, &off).data, &loss_w);
            input.data[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(fd, d_input.data[i]));
            probes += 1;
        }
    }

    GradReport {
        family: "decoder layers".into(),
        max_rel_err: worst,
        tolerance: 1e-4,
        probes,
    }
}

/// Full decoder vs central differences on 100 sampled parameters.
pub fn check_decoder_full(seed: u64) -> GradReport {
    let mut rng = SeedRng::new(seed, STREAM_CHECK);
    let arch = DecoderArch::desk_scale(4);
    let mut weights = arch.init_weights(&mut rng);
    let mut input = FeatureImage::zeros(16, 16, 4);
    for v in input.data.iter_mut() {
        *v = rng.range(-1.0, 1.0);
    }
    let mut w_rgb = FeatureImage::zeros(16, 16, 3);
    let mut w_alpha = FeatureImage::zeros(16, 16, 1);
    for v in w_rgb.data.iter_mut().chain(w_alpha.data.iter_mut()) {
        *v = rng.range(-1.0, 1.0);
    }
    let loss = |weights: &[f64]| -> f64 {
        let mut cache = ActivationCache::default();
        let (rgb, alpha) = decode(&arch, weights, &input, false, &mut cache).unwrap();
        dot(&rgb.data, &w_rgb.data) + dot(&alpha.data, &w_alpha.data)
    };
    let mut cache = ActivationCache::default();
    decode(&arch, &weights, &input, true, &mut cache).unwrap();
    let (d_weights, _) = decode_backward(&arch, &weights, &cache, &w_rgb, &w_alpha).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let n = weights.len();
    for _ in 0..100 {
        let idx = rng.index(n);
        let orig = weights[idx];
        weights[idx] = orig + h;
        let fp = loss(&weights);
        weights[idx] = orig - h;
        let fm = loss(&weights);
        weights[idx] = orig;
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs() < 1e-7 && d_weights[idx].abs() < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(fd, d_weights[idx]));
        probes += 1;
    }
    GradReport {
        family: "decoder full network".into(),
        max_rel_err: worst,
        tolerance: 1e-3,
        probes,
    }
}

/// Runs the whole gradient suite in its reference configuration.
pub fn gradcheck_all(seed: u64) -> Vec<GradReport> {
    vec![
        check_raster_texels(50, seed),
        check_raster_geometry(12, seed.wrapping_add(1)),
        check_decoder_layers(seed.wrapping_add(2)),
        check_decoder_full(seed.wrapping_add(3)),
        check_pose_backward(50, seed.wrapping_add(4)),
    ]
}
