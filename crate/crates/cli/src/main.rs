//! Command-line driver for the neural-billboard avatar engine.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use nbav_core::dataset::{self, GenerateParams};
use nbav_core::error::Error as CoreError;
use nbav_core::losses::dice_coefficient;
use nbav_core::mesh::{load_obj, TriMesh};
use nbav_core::state::TrainState;
use nbav_core::synth::{psnr, ssim, SceneKind};
use nbav_core::trainer::{composite_gt, reenact, write_log_csv, TrainConfig, Trainer};
use nbav_core::{check, trainer};

#[derive(Parser)]
#[command(name = "nbav", version, about = "Neural-billboard avatar engine")]
struct Cli {
    /// Worker threads for the parallel pool (0 = automatic). Results are
    /// identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view dataset.
    Synth {
        /// Scene kind: sphere, cube, or strip.
        #[arg(long, default_value = "sphere")]
        kind: String,
        #[arg(long, default_value_t = 2)]
        subdiv: usize,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        cams: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Held-out camera index (default: the last one).
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an avatar on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key = value config file; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        channels: Option<usize>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable the billboard silhouette loss (λ_NB = 0).
        #[arg(long)]
        no_dice: bool,
        /// Disable the regularizers (λ_KNN = λ_Δ = 0).
        #[arg(long)]
        no_reg: bool,
        /// Skip the neural renderer; textures are RGB (needs channels = 3).
        #[arg(long)]
        no_dnr: bool,
    },
    /// Render one view from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0)]
        cam: usize,
        /// Background color "r,g,b" in [0,1].
        #[arg(long, default_value = "0,0,0")]
        bg: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive a trained avatar with a pose sequence.
    Reenact {
        #[arg(long)]
        ckpt: PathBuf,
        /// Rest mesh (OBJ) with training connectivity.
        #[arg(long)]
        rest: PathBuf,
        /// Driving vertex animation (NBAN).
        #[arg(long)]
        anim: PathBuf,
        /// Dataset supplying the camera rig.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        cam: usize,
        #[arg(long, default_value = "0,0,0")]
        bg: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM table on a held-out view.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Camera to evaluate (default: the dataset's held-out camera).
        #[arg(long)]
        cam: Option<usize>,
    },
    /// Finite-difference gradient suite; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Tiled-vs-brute-force rendering suite; exits nonzero on failure.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_bg(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad background color '{s}'"))?;
    if parts.len() != 3 {
        bail!("background color needs three components, got '{s}'");
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            kind,
            subdiv,
            frames,
            cams,
            width,
            height,
            seed,
            holdout,
            out,
        } => {
            let kind: SceneKind = kind.parse().map_err(|e: String| anyhow!(e))?;
            dataset::generate(
                &GenerateParams {
                    kind,
                    subdiv,
                    n_frames: frames,
                    n_cams: cams,
                    width,
                    height,
                    seed,
                    holdout_cam: holdout,
                },
                &out,
            )?;
            println!(
                "wrote {} frames x {} cameras to {}",
                frames,
                cams,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            data,
            out,
            config,
            iters,
            seed,
            channels,
            resume,
            no_dice,
            no_reg,
            no_dnr,
        } => {
            let ds = dataset::load(&data)?;
            let mut cfg = match config {
                Some(path) => TrainConfig::from_file(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(i) = iters {
                cfg.iters = i;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(c) = channels {
                cfg.channels = c;
            }
            cfg.ablate_dice |= no_dice;
            cfg.ablate_reg |= no_reg;
            if no_dnr {
                cfg.ablate_dnr = true;
                cfg.channels = 3;
            }
            std::fs::create_dir_all(&out)?;

            let mut t = match resume {
                Some(ckpt) => {
                    let state = TrainState::load(&ckpt)?;
                    Trainer::from_state(cfg, &ds, state)
                }
                None => Trainer::new(cfg, &ds),
            }?;
            let remaining = t.cfg.iters.saturating_sub(t.state.iter);
            eprintln!(
                "training {} iterations ({} already done)",
                remaining, t.state.iter
            );
            let result = t.run(remaining);
            write_log_csv(&out.join("metrics.csv"), &t.log)?;
            match result {
                Ok(()) => {
                    t.state.save(&out.join("checkpoint.nbav"))?;
                    let e = t.eval_holdout()?;
                    println!(
                        "done: iter {} holdout psnr {:.2} dB ssim {:.4} dice {:.4}",
                        t.state.iter, e.psnr, e.ssim, e.dice
                    );
                    Ok(())
                }
                Err(e @ CoreError::NaNGradient { .. }) => {
                    // The failing step left parameters untouched; keep them.
                    let path = out.join("last_good.nbav");
                    t.state.save(&path)?;
                    bail!("{e}; last good state saved to {}", path.display());
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Render {
            ckpt,
            data,
            frame,
            cam,
            bg,
            out,
        } => {
            let ds = dataset::load(&data)?;
            let state = TrainState::load(&ckpt)?;
            if frame >= ds.n_frames() || cam >= ds.cameras.len() {
                bail!(
                    "frame/cam out of range ({} frames, {} cameras)",
                    ds.n_frames(),
                    ds.cameras.len()
                );
            }
            let bg = parse_bg(&bg)?;
            let frames = reenact(
                &state,
                &ds.rest,
                std::slice::from_ref(&ds.frames[frame]),
                &ds.cameras[cam],
                bg,
            )?;
            dataset::write_ppm(&out, &frames[0])?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Reenact {
            ckpt,
            rest,
            anim,
            data,
            cam,
            bg,
            out,
        } => {
            let ds = dataset::load(&data)?;
            if cam >= ds.cameras.len() {
                bail!("camera {cam} out of range");
            }
            let state = TrainState::load(&ckpt)?;
            let (verts, tris) = load_obj(&rest)?;
            let rest_mesh = TriMesh::new(verts, tris)?;
            let driving = dataset::read_nban(&anim)?;
            let bg = parse_bg(&bg)?;
            std::fs::create_dir_all(&out)?;
            let rendered = reenact(&state, &rest_mesh, &driving, &ds.cameras[cam], bg)?;
            for (i, img) in rendered.iter().enumerate() {
                dataset::write_ppm(&out.join(format!("f{i:04}.ppm")), img)?;
            }
            println!("wrote {} frames to {}", rendered.len(), out.display());
            Ok(())
        }
        Cmd::Eval { ckpt, data, cam } => {
            let ds = dataset::load(&data)?;
            let state = TrainState::load(&ckpt)?;
            let cam_idx = cam.unwrap_or(ds.holdout_cam);
            if cam_idx >= ds.cameras.len() {
                bail!("camera {cam_idx} out of range");
            }
            let mut cache = Default::default();
            let mut sums = (0.0, 0.0, 0.0);
            println!("frame,psnr_db,ssim,dice");
            for f in 0..ds.n_frames() {
                let posed = ds.posed_mesh(f)?;
                let frames = nbav_core::mesh::polygon_frames(&posed)?;
                let (i_rgb, i_alpha_nb) = trainer::render_avatar(
                    &state,
                    &frames,
                    &ds.cameras[cam_idx],
                    [0.0; 3],
                    &mut cache,
                )?;
                let gt = composite_gt(&ds.images[f][cam_idx], &ds.masks[f][cam_idx], [0.0; 3]);
                let p = psnr(&i_rgb, &gt).min(99.0);
                let s = ssim(&i_rgb, &gt);
                let d = dice_coefficient(&i_alpha_nb, &ds.masks[f][cam_idx]);
                println!("{f},{p:.4},{s:.5},{d:.5}");
                sums.0 += p;
                sums.1 += s;
                sums.2 += d;
            }
            let n = ds.n_frames() as f64;
            println!(
                "mean,{:.4},{:.5},{:.5}",
                sums.0 / n,
                sums.1 / n,
                sums.2 / n
            );
            Ok(())
        }
        Cmd::Gradcheck { seed } => {
            let reports = check::gradcheck_all(seed);
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<32} max rel err {:>12.3e}  tolerance {:>9.0e}  probes {:>4}  {}",
                    r.family,
                    r.max_rel_err,
                    r.tolerance,
                    r.probes,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            if !ok {
                bail!("gradient check failed");
            }
            Ok(())
        }
        Cmd::OracleCheck { scenes, seed } => {
            let r = check::oracle_check(scenes, seed);
            println!(
                "{} scenes: max abs diff {:.3e} (tolerance {:.0e}) in {:.2}s  {}",
                r.scenes,
                r.max_abs_diff,
                r.tolerance,
                r.seconds,
                if r.passed() { "pass" } else { "FAIL" }
            );
            if !r.passed() {
                bail!("oracle check failed");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
