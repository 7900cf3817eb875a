//! Complete optimizable state of an avatar plus the unified checkpoint
//! format ("NBAV", version 1, little-endian, f64 arrays). Round trips are
//! bit-exact, including Adam moments and the RNG position, so training can
//! resume with no divergence.

use crate::billboard::{BillboardSet, BillboardsView, MIN_SCALE};
use crate::decoder::DecoderArch;
use crate::error::{Error, Result};
use crate::optim::{adam_step, LearningRates, ParamGroup};
use crate::rng::{RngState, SeedRng};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NBAV";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const GROUP_MU: usize = 0;
pub const GROUP_S: usize = 1;
pub const GROUP_Q: usize = 2;
pub const GROUP_NT: usize = 3;
pub const GROUP_ALPHA: usize = 4;
pub const GROUP_DECODER: usize = 5;
const GROUP_NAMES: [&str; 6] = ["mu", "s", "q", "nt", "alpha", "decoder"];

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Fixed order: mu, s, q, nt, alpha, decoder.
    pub groups: Vec<ParamGroup>,
    pub anchors: Vec<u32>,
    pub n_billboards: usize,
    pub texture_size: usize,
    pub channels: usize,
    pub arch: DecoderArch,
    pub iter: u64,
    pub rng: SeedRng,
}

impl TrainState {
    pub fn new(
        billboards: BillboardSet,
        arch: DecoderArch,
        decoder_weights: Vec<f64>,
        lrs: &LearningRates,
        rng: SeedRng,
    ) -> Self {
        let groups = vec![
            ParamGroup::new("mu", billboards.mu, lrs.mu, lrs.gamma_mu),
            ParamGroup::new("s", billboards.s, lrs.s, 1.0),
            ParamGroup::new("q", billboards.q, lrs.q, 1.0),
            ParamGroup::new("nt", billboards.nt, lrs.nt, 1.0),
            ParamGroup::new("alpha", billboards.alpha_logit, lrs.alpha, 1.0),
            ParamGroup::new("decoder", decoder_weights, lrs.decoder, 1.0),
        ];
        TrainState {
            groups,
            anchors: billboards.anchor,
            n_billboards: billboards.n,
            texture_size: billboards.texture_size,
            channels: billboards.channels,
            arch,
            iter: 0,
            rng,
        }
    }

    pub fn billboards(&self) -> BillboardsView<'_> {
        BillboardsView {
            n: self.n_billboards,
            texture_size: self.texture_size,
            channels: self.channels,
            mu: &self.groups[GROUP_MU].values,
            s: &self.groups[GROUP_S].values,
            q: &self.groups[GROUP_Q].values,
            nt: &self.groups[GROUP_NT].values,
            alpha_logit: &self.groups[GROUP_ALPHA].values,
            anchor: &self.anchors,
        }
    }

    pub fn decoder_weights(&self) -> &[f64] {
        &self.groups[GROUP_DECODER].values
    }

    /// One optimizer step over every group. All gradients are validated
    /// before any group moves, so a non-finite gradient leaves the state
    /// untouched. Quaternions are renormalized and scales clamped after.
    pub fn step(&mut self) -> Result<()> {
        for g in &self.groups {
            g.check_grads_finite()?;
        }
        let t = self.iter + 1;
        for g in &mut self.groups {
            adam_step(g, t)?;
        }
        self.renormalize_quaternions();
        self.clamp_scales();
        self.iter = t;
        Ok(())
    }

    fn renormalize_quaternions(&mut self) {
        let q = &mut self.groups[GROUP_Q].values;
        for i in 0..self.n_billboards {
            let b = 4 * i;
            let n = (q[b] * q[b] + q[b + 1] * q[b + 1] + q[b + 2] * q[b + 2] + q[b + 3] * q[b + 3])
                .sqrt();
            if n > 0.0 {
                for k in 0..4 {
                    q[b + k] /= n;
                }
            } else {
                q[b] = 1.0;
                q[b + 1] = 0.0;
                q[b + 2] = 0.0;
                q[b + 3] = 0.0;
            }
        }
    }

    fn clamp_scales(&mut self) {
        for s in self.groups[GROUP_S].values.iter_mut() {
            if *s < MIN_SCALE {
                *s = MIN_SCALE;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.iter.to_le_bytes())?;
        let rs = self.rng.state();
        w.write_all(&rs.seed)?;
        w.write_all(&rs.stream.to_le_bytes())?;
        w.write_all(&rs.word_pos.to_le_bytes())?;

        w.write_all(&(self.n_billboards as u32).to_le_bytes())?;
        w.write_all(&(self.texture_size as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        // Billboard parameter arrays in field order.
        for idx in [GROUP_MU, GROUP_S, GROUP_Q, GROUP_NT, GROUP_ALPHA] {
            write_f64s(&mut w, &self.groups[idx].values)?;
        }
        for &a in &self.anchors {
            w.write_all(&a.to_le_bytes())?;
        }

        w.write_all(&(self.arch.in_channels as u32).to_le_bytes())?;
        w.write_all(&(self.arch.depth as u32).to_le_bytes())?;
        w.write_all(&(self.arch.base as u32).to_le_bytes())?;
        w.write_all(&(self.arch.instance_norm as u32).to_le_bytes())?;
        w.write_all(&(self.groups[GROUP_DECODER].values.len() as u64).to_le_bytes())?;
        write_f64s(&mut w, &self.groups[GROUP_DECODER].values)?;

        // Optimizer state, section-tagged per group.
        w.write_all(&(self.groups.len() as u32).to_le_bytes())?;
        for g in &self.groups {
            let name = g.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(g.values.len() as u64).to_le_bytes())?;
            w.write_all(&g.lr.to_le_bytes())?;
            w.write_all(&g.gamma.to_le_bytes())?;
            write_f64s(&mut w, &g.m)?;
            write_f64s(&mut w, &g.v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::DataError("bad checkpoint magic".into()));
        }
        if read_u32(&mut r)? != CHECKPOINT_VERSION {
            return Err(Error::DataError("unsupported checkpoint version".into()));
        }
        let iter = read_u64(&mut r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(&mut r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let rng = SeedRng::restore(&RngState {
            seed,
            stream,
            word_pos: u128::from_le_bytes(wp),
        });

        let n = read_u32(&mut r)? as usize;
        let s_t = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let mu = read_f64s(&mut r, n * 3)?;
        let s = read_f64s(&mut r, n * 2)?;
        let q = read_f64s(&mut r, n * 4)?;
        let nt = read_f64s(&mut r, n * s_t * s_t * c)?;
        let alpha = read_f64s(&mut r, n * s_t * s_t)?;
        let mut anchors = vec![0u32; n];
        for a in &mut anchors {
            *a = read_u32(&mut r)?;
        }

        let arch = DecoderArch {
            in_channels: read_u32(&mut r)? as usize,
            depth: read_u32(&mut r)? as usize,
            base: read_u32(&mut r)? as usize,
            instance_norm: read_u32(&mut r)? != 0,
        };
        let dec_len = read_u64(&mut r)? as usize;
        let decoder = read_f64s(&mut r, dec_len)?;

        let n_groups = read_u32(&mut r)? as usize;
        if n_groups != GROUP_NAMES.len() {
            return Err(Error::DataError(format!(
                "expected {} parameter groups, found {n_groups}",
                GROUP_NAMES.len()
            )));
        }
        let value_buffers = [mu, s, q, nt, alpha, decoder];
        let mut groups = Vec::with_capacity(n_groups);
        for (gi, values) in value_buffers.into_iter().enumerate() {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::DataError("group name not utf8".into()))?;
            if name != GROUP_NAMES[gi] {
                return Err(Error::DataError(format!(
                    "group {gi} named '{name}', expected '{}'",
                    GROUP_NAMES[gi]
                )));
            }
            let len = read_u64(&mut r)? as usize;
            if len != values.len() {
                return Err(Error::DataError(format!(
                    "group '{name}' length {len} does not match arrays ({})",
                    values.len()
                )));
            }
            let lr = read_f64(&mut r)?;
            let gamma = read_f64(&mut r)?;
            let m = read_f64s(&mut r, len)?;
            let v = read_f64s(&mut r, len)?;
            groups.push(ParamGroup {
                name,
                grads: vec![0.0; len],
                values,
                m,
                v,
                lr,
                gamma,
            });
        }
        Ok(TrainState {
            groups,
            anchors,
            n_billboards: n,
            texture_size: s_t,
            channels: c,
            arch,
            iter,
            rng,
        })
    }
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    let mut buf = [0u8; 8];
    for x in &mut out {
        r.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    Ok(out)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedRng, STREAM_INIT, STREAM_TRAIN};

    fn tiny_state(seed: u64) -> TrainState {
        let n = 3;
        let s_t = 2;
        let c = 2;
        let mut init_rng = SeedRng::new(seed, STREAM_INIT);
        let set = BillboardSet {
            n,
            texture_size: s_t,
            channels: c,
            mu: (0..n * 3).map(|i| i as f64 * 0.01).collect(),
            s: vec![0.3; n * 2],
            q: (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect(),
            nt: (0..n * s_t * s_t * c).map(|i| (i as f64).sin()).collect(),
            alpha_logit: vec![0.1; n * s_t * s_t],
            anchor: (0..n as u32).collect(),
        };
        let arch = DecoderArch::desk_scale(c);
        let weights = arch.init_weights(&mut init_rng);
        TrainState::new(
            set,
            arch,
            weights,
            &LearningRates::default().with_total_iters(100),
            SeedRng::new(seed, STREAM_TRAIN),
        )
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut state = tiny_state(5);
        // Take a few steps so moments and rng position are nontrivial.
        for _ in 0..3 {
            for g in &mut state.groups {
                for (i, gr) in g.grads.iter_mut().enumerate() {
                    *gr = (i as f64 * 0.37).sin() * 1e-3;
                }
            }
            state.step().unwrap();
            state.rng.uniform();
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nbav");
        let p2 = dir.path().join("b.nbav");
        state.save(&p1).unwrap();
        let loaded = TrainState::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "checkpoint round-trip not bit-exact");
        assert_eq!(loaded.iter, state.iter);
        assert_eq!(loaded.groups[GROUP_MU].lr.to_bits(), state.groups[GROUP_MU].lr.to_bits());
    }

    #[test]
    fn loaded_rng_continues_identically() {
        let mut state = tiny_state(6);
        for _ in 0..17 {
            state.rng.uniform();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nbav");
        state.save(&p).unwrap();
        let mut loaded = TrainState::load(&p).unwrap();
        for _ in 0..20 {
            assert_eq!(state.rng.uniform().to_bits(), loaded.rng.uniform().to_bits());
        }
    }

    #[test]
    fn quaternions_stay_unit_under_steps() {
        let mut state = tiny_state(7);
        for step in 0..100 {
            for g in &mut state.groups {
                for (i, gr) in g.grads.iter_mut().enumerate() {
                    *gr = ((i + step) as f64 * 0.73).cos() * 1e-2;
                }
            }
            state.step().unwrap();
            let q = &state.groups[GROUP_Q].values;
            for i in 0..state.n_billboards {
                let n = (0..4).map(|k| q[4 * i + k] * q[4 * i + k]).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6, "quaternion norm {n}");
            }
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.nbav");
        std::fs::write(&p, b"JUNKxxxxxxxxxxxxxxxx").unwrap();
        assert!(TrainState::load(&p).is_err());
    }

    #[test]
    fn nan_gradient_keeps_state_untouched() {
        let mut state = tiny_state(8);
        state.groups[GROUP_NT].grads[0] = f64::NAN;
        let before = state.groups[GROUP_MU].values.clone();
        assert!(state.step().is_err());
        assert_eq!(state.groups[GROUP_MU].values, before);
        assert_eq!(state.iter, 0);
    }
}
