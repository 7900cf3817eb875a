//! End-to-end optimization loop: sample a (frame, camera) pair, pose and
//! rasterize the billboards, decode, composite render and ground truth onto
//! the same random background color, evaluate the losses, and push the
//! gradients back through decoder, rasterizer, and posing into one Adam step
//! per parameter group.

use crate::anchor::{backward_pose, pose_billboards, PosedBillboard};
use crate::billboard::init_billboards;
use crate::dataset::Dataset;
use crate::decoder::{
    composite_background, composite_background_backward, decode, decode_backward,
    ActivationCache, DecoderArch,
};
use crate::error::{Error, Result};
use crate::losses::{dice_coefficient, total_loss, LossWeights};
use crate::mesh::{polygon_frames, PolygonFrame, TriMesh};
use crate::optim::LearningRates;
use crate::raster::{render, render_backward, FeatureImage, RenderOpts};
use crate::rng::{SeedRng, STREAM_INIT, STREAM_TRAIN};
use crate::spectral::spectral_coords;
use crate::state::{
    TrainState, GROUP_ALPHA, GROUP_DECODER, GROUP_MU, GROUP_NT, GROUP_Q, GROUP_S,
};
use crate::synth::{psnr, ssim};
use nalgebra::Vector3;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub iters: u64,
    pub texture_size: usize,
    pub channels: usize,
    pub decoder_depth: usize,
    pub decoder_base: usize,
    pub instance_norm: bool,
    pub weights: LossWeights,
    pub knn_k: usize,
    pub lr: LearningRates,
    /// Explicit position-lr decay; `None` derives 0.01^(1/iters).
    pub gamma: Option<f64>,
    pub ablate_dice: bool,
    pub ablate_reg: bool,
    pub ablate_dnr: bool,
    pub log_every: u64,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            iters: 5000,
            texture_size: 16,
            channels: 6,
            decoder_depth: 3,
            decoder_base: 16,
            instance_norm: true,
            weights: LossWeights::default(),
            knn_k: 3,
            lr: LearningRates::default(),
            gamma: None,
            ablate_dice: false,
            ablate_reg: false,
            ablate_dnr: false,
            log_every: 100,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    /// The reference megapixel configuration: five decoder levels and the
    /// long schedule. Constructible for parity runs, not exercised by tests.
    pub fn paper_scale() -> Self {
        TrainConfig {
            iters: 400_000,
            decoder_depth: 5,
            ..Default::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::DataError(format!("config line {ln}: expected key = value")))?;
            cfg.set(key, value)
                .map_err(|e| Error::DataError(format!("config line {ln}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad number '{v}'"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                other => Err(format!("bad flag '{other}'")),
            }
        }
        match key {
            "seed" => self.seed = num(value)?,
            "iters" => self.iters = num(value)?,
            "s_t" => self.texture_size = num(value)?,
            "channels" => self.channels = num(value)?,
            "decoder_depth" => self.decoder_depth = num(value)?,
            "decoder_base" => self.decoder_base = num(value)?,
            "instance_norm" => self.instance_norm = flag(value)?,
            "lambda_nb" => self.weights.lambda_nb = num(value)?,
            "lambda_knn" => self.weights.lambda_knn = num(value)?,
            "lambda_delta" => self.weights.lambda_delta = num(value)?,
            "lambda_lpips" => self.weights.lambda_lpips = num(value)?,
            "knn_k" => self.knn_k = num(value)?,
            "lr_mu" => self.lr.mu = num(value)?,
            "lr_s" => self.lr.s = num(value)?,
            "lr_q" => self.lr.q = num(value)?,
            "lr_nt" => self.lr.nt = num(value)?,
            "lr_alpha" => self.lr.alpha = num(value)?,
            "lr_decoder" => self.lr.decoder = num(value)?,
            "gamma" => {
                self.gamma = if value == "auto" {
                    None
                } else {
                    Some(num(value)?)
                }
            }
            "no_dice" => self.ablate_dice = flag(value)?,
            "no_reg" => self.ablate_reg = flag(value)?,
            "no_dnr" => self.ablate_dnr = flag(value)?,
            "log_every" => self.log_every = num(value)?,
            "eval_every" => self.eval_every = num(value)?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Loss weights with the ablation switches applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablate_dice {
            w.lambda_nb = 0.0;
        }
        if self.ablate_reg {
            w.lambda_knn = 0.0;
            w.lambda_delta = 0.0;
        }
        w
    }

    pub fn arch(&self) -> DecoderArch {
        DecoderArch {
            in_channels: self.channels,
            depth: self.decoder_depth,
            base: self.decoder_base,
            instance_norm: self.instance_norm,
        }
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.ablate_dnr && self.channels != 3 {
            return Err(Error::DataError(
                "no_dnr renders textures directly as RGB and needs channels = 3".into(),
            ));
        }
        if !self.ablate_dnr {
            let f = 1 << self.decoder_depth;
            if dataset.width % f != 0 || dataset.height % f != 0 {
                return Err(Error::ShapeError(format!(
                    "dataset {}x{} not divisible by 2^{}",
                    dataset.width, dataset.height, self.decoder_depth
                )));
            }
        }
        if dataset.cameras.len() < 2 {
            return Err(Error::DataError("need at least 2 cameras".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogRow {
    pub iter: u64,
    pub total: f64,
    pub mse: f64,
    pub dice: f64,
    pub knn: f64,
    pub delta: f64,
    pub psnr_holdout: Option<f64>,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,total,mse,dice,knn,delta,psnr_holdout")?;
    for r in rows {
        let p = r
            .psnr_holdout
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{p}",
            r.iter, r.total, r.mse, r.dice, r.knn, r.delta
        )?;
    }
    Ok(())
}

/// GT foreground composited onto a background color through its mask.
pub fn composite_gt(fg: &FeatureImage, mask: &FeatureImage, bg: [f64; 3]) -> FeatureImage {
    let mut out = FeatureImage::zeros(fg.width, fg.height, 3);
    for i in 0..fg.width * fg.height {
        let m = mask.data[i];
        for c in 0..3 {
            out.data[3 * i + c] = fg.data[3 * i + c] * m + (1.0 - m) * bg[c];
        }
    }
    out
}

/// Holdout-view evaluation summary.
#[derive(Clone, Copy, Debug)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    /// Overlap of the billboard alpha map with the GT mask.
    pub dice: f64,
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub dataset: &'d Dataset,
    pub state: TrainState,
    frames: Vec<Vec<PolygonFrame>>,
    cache: ActivationCache,
    pub log: Vec<LogRow>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate(dataset)?;
        let coords = spectral_coords(&dataset.rest, cfg.channels)?;
        let billboards =
            init_billboards(&dataset.rest, &coords, cfg.texture_size, cfg.channels)?;
        let arch = cfg.arch();
        let decoder_weights = if cfg.ablate_dnr {
            Vec::new()
        } else {
            let mut rng = SeedRng::new(cfg.seed, STREAM_INIT);
            arch.init_weights(&mut rng)
        };
        let mut lrs = cfg.lr;
        lrs.gamma_mu = cfg
            .gamma
            .unwrap_or_else(|| if cfg.iters > 0 { 0.01f64.powf(1.0 / cfg.iters as f64) } else { 1.0 });
        let state = TrainState::new(
            billboards,
            arch,
            decoder_weights,
            &lrs,
            SeedRng::new(cfg.seed, STREAM_TRAIN),
        );
        Self::from_state(cfg, dataset, state)
    }

    /// Resumes from a checkpointed state.
    pub fn from_state(cfg: TrainConfig, dataset: &'d Dataset, state: TrainState) -> Result<Self> {
        cfg.validate(dataset)?;
        if state.n_billboards != dataset.rest.n_triangles() {
            return Err(Error::ConnectivityMismatch(format!(
                "{} billboards vs {} mesh triangles",
                state.n_billboards,
                dataset.rest.n_triangles()
            )));
        }
        let frames = dataset
            .frames
            .iter()
            .map(|verts| {
                let posed = dataset.rest.posed(verts.clone())?;
                polygon_frames(&posed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            cfg,
            dataset,
            state,
            frames,
            cache: ActivationCache::default(),
            log: Vec::new(),
        })
    }

    /// Runs `iters` optimization steps, logging losses every `log_every`
    /// steps and holdout PSNR every `eval_every`.
    pub fn run(&mut self, iters: u64) -> Result<()> {
        for _ in 0..iters {
            let stats = self.step()?;
            let it = self.state.iter;
            if self.cfg.log_every > 0 && it % self.cfg.log_every == 0 {
                let psnr_holdout = if self.cfg.eval_every > 0 && it % self.cfg.eval_every == 0 {
                    Some(self.eval_holdout()?.psnr)
                } else {
                    None
                };
                self.log.push(LogRow {
                    iter: it,
                    total: stats.total,
                    mse: stats.mse,
                    dice: stats.dice,
                    knn: stats.knn,
                    delta: stats.delta,
                    psnr_holdout,
                });
            }
        }
        Ok(())
    }

    /// One full forward/backward/update cycle. Returns the loss terms.
    pub fn step(&mut self) -> Result<StepStats> {
        let frame = self.state.rng.index(self.dataset.n_frames());
        let train_cams = self.dataset.train_cams();
        let cam_idx = train_cams[self.state.rng.index(train_cams.len())];
        let bg = [
            self.state.rng.uniform(),
            self.state.rng.uniform(),
            self.state.rng.uniform(),
        ];
        let cam = &self.dataset.cameras[cam_idx];
        let bb = self.state.billboards();
        let posed = pose_billboards(&bb, &self.frames[frame])?;
        let out = render(&bb, &posed, cam, &RenderOpts::default());

        let weights = self.cfg.effective_weights();
        let gt_fg = &self.dataset.images[frame][cam_idx];
        let gt_mask = &self.dataset.masks[frame][cam_idx];
        let gt_rgb = composite_gt(gt_fg, gt_mask, bg);

        // Forward heads + Eq-style composite, then the loss stack.
        let (i_r, i_alpha) = if self.cfg.ablate_dnr {
            (out.features.clone(), out.alpha.clone())
        } else {
            decode(
                &self.state.arch,
                self.state.decoder_weights(),
                &out.features,
                true,
                &mut self.cache,
            )?
        };
        let i_rgb = composite_background(&i_r, &i_alpha, bg)?;
        let tl = total_loss(
            &i_rgb,
            &gt_rgb,
            &out.alpha,
            gt_mask,
            &bb,
            &posed,
            &weights,
            self.cfg.knn_k,
        )?;

        // Backward: composite -> decoder -> rasterizer -> posing.
        let (d_i_r, d_i_alpha) = composite_background_backward(&tl.d_i_rgb, &i_r, &i_alpha, bg);
        let (d_decoder, d_features, d_alpha_map) = if self.cfg.ablate_dnr {
            let mut d_alpha = d_i_alpha;
            for (a, b) in d_alpha.data.iter_mut().zip(tl.d_i_alpha_nb.data.iter()) {
                *a += b;
            }
            (Vec::new(), d_i_r, d_alpha)
        } else {
            let (d_w, d_feat) = decode_backward(
                &self.state.arch,
                self.state.decoder_weights(),
                &self.cache,
                &d_i_r,
                &d_i_alpha,
            )?;
            (d_w, d_feat, tl.d_i_alpha_nb)
        };
        let mut rg = render_backward(&bb, &posed, cam, &out.cache, &d_features, &d_alpha_map)?;
        rg.geo.add(&tl.d_posed, 1.0);
        let local = backward_pose(&rg.geo, &bb, &self.frames[frame])?;

        let acc = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        };
        acc(&mut self.state.groups[GROUP_MU].grads, &local.d_mu);
        acc(&mut self.state.groups[GROUP_MU].grads, &tl.d_mu);
        acc(&mut self.state.groups[GROUP_S].grads, &local.d_s);
        acc(&mut self.state.groups[GROUP_Q].grads, &local.d_q);
        acc(&mut self.state.groups[GROUP_NT].grads, &rg.d_nt);
        acc(&mut self.state.groups[GROUP_ALPHA].grads, &rg.d_alpha_logit);
        acc(&mut self.state.groups[GROUP_DECODER].grads, &d_decoder);
        self.state.step()?;

        Ok(StepStats {
            total: tl.total,
            mse: tl.mse,
            dice: tl.dice,
            knn: tl.knn,
            delta: tl.delta,
        })
    }

    /// Renders one view with the current parameters: returns the composited
    /// RGB (on `bg`) and the billboard alpha map. Deterministic, RNG-free.
    pub fn render_view(&mut self, frame: usize, cam_idx: usize, bg: [f64; 3]) -> Result<(FeatureImage, FeatureImage)> {
        render_avatar(
            &self.state,
            &self.frames[frame],
            &self.dataset.cameras[cam_idx],
            bg,
            &mut self.cache,
        )
    }

    /// PSNR/SSIM/Dice on the held-out camera, averaged over up to 8 evenly
    /// spaced frames, everything composited on black.
    pub fn eval_holdout(&mut self) -> Result<EvalSummary> {
        let cam_idx = self.dataset.holdout_cam;
        let n = self.dataset.n_frames();
        let count = n.min(8);
        let mut sum_psnr = 0.0;
        let mut sum_ssim = 0.0;
        let mut sum_dice = 0.0;
        for k in 0..count {
            let frame = k * n / count;
            let (i_rgb, i_alpha_nb) = self.render_view(frame, cam_idx, [0.0; 3])?;
            let gt = composite_gt(
                &self.dataset.images[frame][cam_idx],
                &self.dataset.masks[frame][cam_idx],
                [0.0; 3],
            );
            sum_psnr += psnr(&i_rgb, &gt).min(99.0);
            sum_ssim += ssim(&i_rgb, &gt);
            sum_dice += dice_coefficient(&i_alpha_nb, &self.dataset.masks[frame][cam_idx]);
        }
        Ok(EvalSummary {
            psnr: sum_psnr / count as f64,
            ssim: sum_ssim / count as f64,
            dice: sum_dice / count as f64,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub total: f64,
    pub mse: f64,
    pub dice: f64,
    pub knn: f64,
    pub delta: f64,
}

/// Renders a trained avatar under the given polygon frames. Whether the
/// decoder runs is determined by the state (an empty decoder group means
/// textures are RGB and rasterized directly).
pub fn render_avatar(
    state: &TrainState,
    frames: &[PolygonFrame],
    cam: &crate::camera::Camera,
    bg: [f64; 3],
    cache: &mut ActivationCache,
) -> Result<(FeatureImage, FeatureImage)> {
    let bb = state.billboards();
    let posed: Vec<PosedBillboard> = pose_billboards(&bb, frames)?;
    let out = render(&bb, &posed, cam, &RenderOpts::default());
    let (i_r, i_alpha) = if state.decoder_weights().is_empty() {
        (out.features.clone(), out.alpha.clone())
    } else {
        decode(&state.arch, state.decoder_weights(), &out.features, false, cache)?
    };
    let i_rgb = composite_background(&i_r, &i_alpha, bg)?;
    Ok((i_rgb, out.alpha))
}

/// Re-renders a trained avatar under a driving pose sequence (same mesh
/// connectivity as training) from the given camera.
pub fn reenact(
    state: &TrainState,
    rest: &TriMesh,
    driving: &[Vec<Vector3<f64>>],
    cam: &crate::camera::Camera,
    bg: [f64; 3],
) -> Result<Vec<FeatureImage>> {
    if state.n_billboards != rest.n_triangles() {
        return Err(Error::ConnectivityMismatch(format!(
            "avatar has {} billboards, mesh {} triangles",
            state.n_billboards,
            rest.n_triangles()
        )));
    }
    let mut cache = ActivationCache::default();
    let mut out = Vec::with_capacity(driving.len());
    for verts in driving {
        let posed_mesh = rest.posed(verts.clone())?;
        let frames = polygon_frames(&posed_mesh)?;
        let (i_rgb, _) = render_avatar(state, &frames, cam, bg, &mut cache)?;
        out.push(i_rgb);
    }
    Ok(out)
}
