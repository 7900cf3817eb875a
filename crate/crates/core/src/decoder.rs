//! Screen-space convolutional decoder turning the rasterized feature image
//! into RGB and opacity, with hand-derived forward and backward passes.
//!
//! Encoder: D stride-2 3×3 convolutions, each followed by instance
//! normalization and LeakyReLU(0.2). Decoder: bilinear ×2 upsampling, skip
//! concatenation with the matching encoder activation (the raw input at full
//! resolution), then a 3×3 convolution with the same norm/activation. Two
//! 1×1 sigmoid heads emit RGB and alpha.
//!
//! Convolutions run as im2col + GEMM. GEMM work is split over a fixed number
//! of row chunks, so results are bit-identical for any thread count.

use crate::error::{Error, Result};
use crate::raster::FeatureImage;
use crate::rng::SeedRng;
use rayon::prelude::*;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
/// Fixed GEMM row chunking; independent of the rayon pool size.
const GEMM_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderArch {
    pub in_channels: usize,
    pub depth: usize,
    pub base: usize,
    pub instance_norm: bool,
}

impl DecoderArch {
    /// Desk-scale default: three levels starting at 16 channels.
    pub fn desk_scale(in_channels: usize) -> Self {
        DecoderArch {
            in_channels,
            depth: 3,
            base: 16,
            instance_norm: true,
        }
    }

    /// Five-level configuration for megapixel parity runs.
    pub fn paper_scale(in_channels: usize) -> Self {
        DecoderArch {
            in_channels,
            depth: 5,
            base: 16,
            instance_norm: true,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.depth
    }

    fn enc_out(&self, level: usize) -> usize {
        self.base << level
    }

    fn enc_in(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.enc_out(level - 1)
        }
    }

    /// Channels of the skip source concatenated at decoder level `i`.
    fn skip_ch(&self, i: usize) -> usize {
        if i + 1 < self.depth {
            self.enc_out(self.depth - 2 - i)
        } else {
            self.in_channels
        }
    }

    fn dec_in(&self, i: usize) -> usize {
        let up = if i == 0 {
            self.enc_out(self.depth - 1)
        } else {
            self.dec_out(i - 1)
        };
        up + self.skip_ch(i)
    }

    fn dec_out(&self, i: usize) -> usize {
        if i + 1 < self.depth {
            self.enc_out(self.depth - 2 - i)
        } else {
            self.base
        }
    }

    fn conv_params(&self, in_ch: usize, out_ch: usize, k: usize) -> usize {
        let mut n = out_ch * in_ch * k * k + out_ch;
        if self.instance_norm && k == 3 {
            n += 2 * out_ch; // gamma, beta
        }
        n
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in 0..self.depth {
            n += self.conv_params(self.enc_in(l), self.enc_out(l), 3);
        }
        for i in 0..self.depth {
            n += self.conv_params(self.dec_in(i), self.dec_out(i), 3);
        }
        n += self.conv_params(self.base, 3, 1);
        n += self.conv_params(self.base, 1, 1);
        n
    }

    /// Kaiming fan-in initialization for the LeakyReLU slope; norm affines
    /// start at identity, biases at zero.
    pub fn init_weights(&self, rng: &mut SeedRng) -> Vec<f64> {
        let mut w = vec![0.0; self.param_count()];
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut off = 0;
        let conv = |w: &mut [f64], rng: &mut SeedRng, in_ch: usize, out_ch: usize, k: usize, norm: bool, off: &mut usize| {
            let fan_in = (in_ch * k * k) as f64;
            let std = gain / fan_in.sqrt();
            for _ in 0..out_ch * in_ch * k * k {
                w[*off] = rng.normal(std);
                *off += 1;
            }
            *off += out_ch; // biases stay zero
            if norm {
                for _ in 0..out_ch {
                    w[*off] = 1.0; // gamma
                    *off += 1;
                }
                *off += out_ch; // beta stays zero
            }
        };
        for l in 0..self.depth {
            conv(&mut w, rng, self.enc_in(l), self.enc_out(l), 3, self.instance_norm, &mut off);
        }
        for i in 0..self.depth {
            conv(&mut w, rng, self.dec_in(i), self.dec_out(i), 3, self.instance_norm, &mut off);
        }
        conv(&mut w, rng, self.base, 3, 1, false, &mut off);
        conv(&mut w, rng, self.base, 1, 1, false, &mut off);
        debug_assert_eq!(off, w.len());
        w
    }
}

/// CHW tensor with a reusable buffer.
#[derive(Clone, Debug, Default)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    fn reset(&mut self, c: usize, h: usize, w: usize) {
        self.c = c;
        self.h = h;
        self.w = w;
        self.data.clear();
        self.data.resize(c * h * w, 0.0);
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    pub fn from_hwc(img: &FeatureImage) -> Tensor {
        let mut t = Tensor::zeros(img.channels, img.height, img.width);
        for y in 0..img.height {
            for x in 0..img.width {
                let px = img.pixel(x, y);
                for c in 0..img.channels {
                    t.data[c * img.height * img.width + y * img.width + x] = px[c];
                }
            }
        }
        t
    }

    pub fn to_hwc(&self) -> FeatureImage {
        let mut img = FeatureImage::zeros(self.w, self.h, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                let base = (y * self.w + x) * self.c;
                for c in 0..self.c {
                    img.data[base + c] = self.data[c * self.h * self.w + y * self.w + x];
                }
            }
        }
        img
    }
}

/// C += A·B for row-major buffers (A: m×k, B: k×n). Work splits into a fixed
/// number of A-row chunks so the result is thread-count independent.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let rows_per_chunk = m.div_ceil(GEMM_CHUNKS).max(1);
    c.par_chunks_mut(rows_per_chunk * n)
        .zip(a.par_chunks(rows_per_chunk * k))
        .for_each(|(c_chunk, a_chunk)| {
            let rows = c_chunk.len() / n;
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_chunk.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    n as isize,
                    1,
                    1.0,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

/// C += Aᵀ·B where A is stored row-major m×k (so Aᵀ is k×m), B is m×n.
pub(crate) fn gemm_at_b_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let rows_per_chunk = k.div_ceil(GEMM_CHUNKS).max(1);
    // Chunk over rows of C (= columns of A); strides express the transpose.
    let chunks: Vec<(usize, usize)> = (0..k)
        .step_by(rows_per_chunk)
        .map(|r0| (r0, (r0 + rows_per_chunk).min(k)))
        .collect();
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    c.par_chunks_mut(rows_per_chunk * n)
        .zip(chunks.into_par_iter())
        .for_each(|(c_chunk, (r0, r1))| unsafe {
            matrixmultiply::dgemm(
                r1 - r0,
                m,
                n,
                1.0,
                (a_ptr as *const f64).add(r0),
                1,
                k as isize,
                b_ptr as *const f64,
                n as isize,
                1,
                1.0,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        });
}

/// C += A·Bᵀ where A is m×k, B is stored row-major n×k.
pub(crate) fn gemm_a_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let rows_per_chunk = m.div_ceil(GEMM_CHUNKS).max(1);
    c.par_chunks_mut(rows_per_chunk * n)
        .zip(a.par_chunks(rows_per_chunk * k))
        .for_each(|(c_chunk, a_chunk)| {
            let rows = c_chunk.len() / n;
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_chunk.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    1,
                    k as isize,
                    1.0,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

/// Gathers 3×3 zero-padded patches: rows = in_ch·9, cols = out_h·out_w.
pub(crate) fn im2col3(input: &Tensor, stride: usize, out: &mut Vec<f64>) -> (usize, usize) {
    let (ih, iw) = (input.h, input.w);
    let oh = ih / stride;
    let ow = iw / stride;
    let cols = oh * ow;
    let rows = input.c * 9;
    out.clear();
    out.resize(rows * cols, 0.0);
    out.par_chunks_mut(cols)
        .enumerate()
        .for_each(|(row, dst)| {
            let ic = row / 9;
            let ky = (row % 9) / 3;
            let kx = row % 3;
            let plane = input.plane(ic);
            for oy in 0..oh {
                let y = (oy * stride + ky) as isize - 1;
                if y < 0 || y >= ih as isize {
                    continue; // stays zero
                }
                let src_row = &plane[y as usize * iw..(y as usize + 1) * iw];
                let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                for ox in 0..ow {
                    let x = (ox * stride + kx) as isize - 1;
                    if x >= 0 && x < iw as isize {
                        dst_row[ox] = src_row[x as usize];
                    }
                }
            }
        });
    (rows, cols)
}

/// Transpose of im2col: scatters column gradients back onto the input grid.
pub(crate) fn col2im3(d_col: &[f64], in_c: usize, ih: usize, iw: usize, stride: usize, d_input: &mut Tensor) {
    let oh = ih / stride;
    let ow = iw / stride;
    let cols = oh * ow;
    d_input.reset(in_c, ih, iw);
    let plane_len = ih * iw;
    d_input
        .data
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(ic, plane)| {
            for kk in 0..9 {
                let ky = kk / 3;
                let kx = kk % 3;
                let src = &d_col[(ic * 9 + kk) * cols..(ic * 9 + kk + 1) * cols];
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - 1;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * stride + kx) as isize - 1;
                        if x >= 0 && x < iw as isize {
                            plane[y as usize * iw + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        });
}

pub(crate) fn add_bias(out: &mut Tensor, bias: &[f64]) {
    let hw = out.h * out.w;
    out.data
        .par_chunks_mut(hw)
        .zip(bias.par_iter())
        .for_each(|(plane, &b)| {
            for v in plane {
                *v += b;
            }
        });
}

#[derive(Clone, Debug, Default)]
pub(crate) struct NormCache {
    xhat: Tensor,
    invstd: Vec<f64>,
}

/// y = gamma · (x - mean)/sqrt(var + eps) + beta, statistics per channel
/// over the spatial extent.
pub(crate) fn instance_norm_forward(x: &Tensor, gamma: &[f64], beta: &[f64], cache: &mut NormCache) -> Tensor {
    let hw = x.h * x.w;
    cache.xhat.reset(x.c, x.h, x.w);
    cache.invstd.clear();
    cache.invstd.resize(x.c, 0.0);
    let mut y = Tensor::zeros(x.c, x.h, x.w);
    let xhat = &mut cache.xhat.data;
    let invstd = &mut cache.invstd;
    y.data
        .par_chunks_mut(hw)
        .zip(xhat.par_chunks_mut(hw))
        .zip(invstd.par_iter_mut())
        .enumerate()
        .for_each(|(c, ((y_plane, xhat_plane), inv))| {
            let x_plane = x.plane(c);
            let mean = x_plane.iter().sum::<f64>() / hw as f64;
            let var = x_plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            *inv = 1.0 / (var + NORM_EPS).sqrt();
            for i in 0..hw {
                let xh = (x_plane[i] - mean) * *inv;
                xhat_plane[i] = xh;
                y_plane[i] = gamma[c] * xh + beta[c];
            }
        });
    y
}

pub(crate) fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    d_y: &Tensor,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Tensor {
    let hw = cache.xhat.h * cache.xhat.w;
    let mut d_x = Tensor::zeros(cache.xhat.c, cache.xhat.h, cache.xhat.w);
    d_x.data
        .par_chunks_mut(hw)
        .zip(d_gamma.par_iter_mut())
        .zip(d_beta.par_iter_mut())
        .enumerate()
        .for_each(|(c, ((dx_plane, dg), db))| {
            let xhat = cache.xhat.plane(c);
            let dy = d_y.plane(c);
            let inv = cache.invstd[c];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..hw {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
            *dg += sum_dy_xhat;
            *db += sum_dy;
            let mean_dxhat = gamma[c] * sum_dy / hw as f64;
            let mean_dxhat_xhat = gamma[c] * sum_dy_xhat / hw as f64;
            for i in 0..hw {
                dx_plane[i] = inv * (gamma[c] * dy[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
            }
        });
    d_x
}

pub(crate) fn leaky_relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.par_iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v *= LEAKY_SLOPE;
        }
    });
    y
}

pub(crate) fn leaky_relu_backward(pre: &Tensor, d_y: &Tensor) -> Tensor {
    let mut d_x = d_y.clone();
    d_x.data
        .par_iter_mut()
        .zip(pre.data.par_iter())
        .for_each(|(g, &x)| {
            if x <= 0.0 {
                *g *= LEAKY_SLOPE;
            }
        });
    d_x
}

/// Per-axis taps of the ×2 bilinear upsampling (align_corners = false):
/// even outputs blend (i-1, i) with weights (0.25, 0.75), odd outputs blend
/// (i, i+1) with (0.75, 0.25); indices clamp at the borders.
#[inline]
fn up_taps(o: usize, len_in: usize) -> ((usize, f64), (usize, f64)) {
    let i = o / 2;
    if o % 2 == 0 {
        let j = i.saturating_sub(1);
        ((j, 0.25), (i, 0.75))
    } else {
        let j = (i + 1).min(len_in - 1);
        ((i, 0.75), (j, 0.25))
    }
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, oh, ow);
    let hw_out = oh * ow;
    y.data
        .par_chunks_mut(hw_out)
        .enumerate()
        .for_each(|(c, plane)| {
            let src = x.plane(c);
            for oy in 0..oh {
                let ((y0, wy0), (y1, wy1)) = up_taps(oy, x.h);
                for ox in 0..ow {
                    let ((x0, wx0), (x1, wx1)) = up_taps(ox, x.w);
                    plane[oy * ow + ox] = wy0 * wx0 * src[y0 * x.w + x0]
                        + wy0 * wx1 * src[y0 * x.w + x1]
                        + wy1 * wx0 * src[y1 * x.w + x0]
                        + wy1 * wx1 * src[y1 * x.w + x1];
                }
            }
        });
    y
}

pub(crate) fn upsample2x_backward(d_y: &Tensor) -> Tensor {
    let (ih, iw) = (d_y.h / 2, d_y.w / 2);
    let mut d_x = Tensor::zeros(d_y.c, ih, iw);
    let hw_in = ih * iw;
    d_x.data
        .par_chunks_mut(hw_in)
        .enumerate()
        .for_each(|(c, plane)| {
            let src = d_y.plane(c);
            for oy in 0..d_y.h {
                let ((y0, wy0), (y1, wy1)) = up_taps(oy, ih);
                for ox in 0..d_y.w {
                    let ((x0, wx0), (x1, wx1)) = up_taps(ox, iw);
                    let g = src[oy * d_y.w + ox];
                    plane[y0 * iw + x0] += wy0 * wx0 * g;
                    plane[y0 * iw + x1] += wy0 * wx1 * g;
                    plane[y1 * iw + x0] += wy1 * wx0 * g;
                    plane[y1 * iw + x1] += wy1 * wx1 * g;
                }
            }
        });
    d_x
}

pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut out = Tensor::zeros(a.c + b.c, a.h, a.w);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

pub(crate) fn sigmoid_tensor(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data
        .par_iter_mut()
        .for_each(|v| *v = crate::math::sigmoid(*v));
    y
}

/// Offsets of one conv block inside the flat weight buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvOffsets {
    pub(crate) w: usize,
    pub(crate) b: usize,
    pub(crate) gamma: usize,
    pub(crate) beta: usize,
    pub(crate) in_ch: usize,
    pub(crate) out_ch: usize,
    pub(crate) norm: bool,
}

pub(crate) fn layout(arch: &DecoderArch) -> Vec<ConvOffsets> {
    let mut offs = Vec::new();
    let mut cursor = 0;
    let mut push = |in_ch: usize, out_ch: usize, k: usize, norm: bool, cursor: &mut usize| {
        let w = *cursor;
        let b = w + out_ch * in_ch * k * k;
        let gamma = b + out_ch;
        let beta = gamma + if norm { out_ch } else { 0 };
        *cursor = beta + if norm { out_ch } else { 0 };
        let _ = k;
        offs.push(ConvOffsets {
            w,
            b,
            gamma,
            beta,
            in_ch,
            out_ch,
            norm,
        });
    };
    for l in 0..arch.depth {
        push(arch.enc_in(l), arch.enc_out(l), 3, arch.instance_norm, &mut cursor);
    }
    for i in 0..arch.depth {
        push(arch.dec_in(i), arch.dec_out(i), 3, arch.instance_norm, &mut cursor);
    }
    push(arch.base, 3, 1, false, &mut cursor);
    push(arch.base, 1, 1, false, &mut cursor);
    offs
}

#[derive(Clone, Debug, Default)]
pub(crate) struct BlockCache {
    im2col: Vec<f64>,
    in_shape: (usize, usize, usize),
    norm: NormCache,
    pre_act: Tensor,
    act: Tensor,
}

/// Per-layer buffers retained by a training-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct ActivationCache {
    input: Tensor,
    enc: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    rgb: Tensor,
    alpha: Tensor,
    param_count: usize,
    valid: bool,
}

/// Conv block shared by encoder and decoder: 3×3 conv (+bias), optional
/// instance norm, LeakyReLU. Returns the activation; fills the cache.
pub(crate) fn conv_block(
    input: &Tensor,
    weights: &[f64],
    off: &ConvOffsets,
    stride: usize,
    cache: &mut BlockCache,
) -> Tensor {
    let (rows, cols) = im2col3(input, stride, &mut cache.im2col);
    cache.in_shape = (input.c, input.h, input.w);
    let mut out = Tensor::zeros(off.out_ch, input.h / stride, input.w / stride);
    gemm_acc(
        off.out_ch,
        rows,
        cols,
        &weights[off.w..off.b],
        &cache.im2col,
        &mut out.data,
    );
    add_bias(&mut out, &weights[off.b..off.b + off.out_ch]);
    let pre_act = if off.norm {
        instance_norm_forward(
            &out,
            &weights[off.gamma..off.gamma + off.out_ch],
            &weights[off.beta..off.beta + off.out_ch],
            &mut cache.norm,
        )
    } else {
        out
    };
    let act = leaky_relu_forward(&pre_act);
    cache.pre_act = pre_act;
    cache.act = act.clone();
    act
}

pub(crate) fn conv_block_backward(
    d_act: &Tensor,
    weights: &[f64],
    off: &ConvOffsets,
    stride: usize,
    cache: &BlockCache,
    d_weights: &mut [f64],
) -> Tensor {
    let d_pre = leaky_relu_backward(&cache.pre_act, d_act);
    let d_conv = if off.norm {
        let (dg, rest) = d_weights[off.gamma..].split_at_mut(off.out_ch);
        instance_norm_backward(
            &cache.norm,
            &weights[off.gamma..off.gamma + off.out_ch],
            &d_pre,
            dg,
            &mut rest[..off.out_ch],
        )
    } else {
        d_pre
    };
    // Bias gradient.
    let hw = d_conv.h * d_conv.w;
    for c in 0..off.out_ch {
        d_weights[off.b + c] += d_conv.plane(c).iter().sum::<f64>();
    }
    // Weight gradient: dW = d_conv · im2colᵀ.
    let rows = off.in_ch * 9;
    gemm_a_bt_acc(
        off.out_ch,
        hw,
        rows,
        &d_conv.data,
        &cache.im2col,
        &mut d_weights[off.w..off.b],
    );
    // Input gradient: d_col = Wᵀ · d_conv, then scatter.
    let mut d_col = vec![0.0; rows * hw];
    gemm_at_b_acc(
        off.out_ch,
        rows,
        hw,
        &weights[off.w..off.b],
        &d_conv.data,
        &mut d_col,
    );
    let (ic, ih, iw) = cache.in_shape;
    let mut d_input = Tensor::default();
    col2im3(&d_col, ic, ih, iw, stride, &mut d_input);
    d_input
}

pub(crate) fn head_forward(input: &Tensor, weights: &[f64], off: &ConvOffsets) -> Tensor {
    let hw = input.h * input.w;
    let mut pre = Tensor::zeros(off.out_ch, input.h, input.w);
    gemm_acc(
        off.out_ch,
        off.in_ch,
        hw,
        &weights[off.w..off.b],
        &input.data,
        &mut pre.data,
    );
    add_bias(&mut pre, &weights[off.b..off.b + off.out_ch]);
    sigmoid_tensor(&pre)
}

/// Backward through sigmoid head; accumulates into d_weights and d_input.
pub(crate) fn head_backward(
    d_out: &Tensor,
    out: &Tensor,
    input: &Tensor,
    weights: &[f64],
    off: &ConvOffsets,
    d_weights: &mut [f64],
    d_input: &mut Tensor,
) {
    let hw = input.h * input.w;
    let mut d_pre = Tensor::zeros(out.c, out.h, out.w);
    d_pre
        .data
        .par_iter_mut()
        .zip(d_out.data.par_iter())
        .zip(out.data.par_iter())
        .for_each(|((dp, &g), &y)| *dp = g * y * (1.0 - y));
    for c in 0..off.out_ch {
        d_weights[off.b + c] += d_pre.plane(c).iter().sum::<f64>();
    }
    gemm_a_bt_acc(
        off.out_ch,
        hw,
        off.in_ch,
        &d_pre.data,
        &input.data,
        &mut d_weights[off.w..off.b],
    );
    gemm_at_b_acc(
        off.out_ch,
        off.in_ch,
        hw,
        &weights[off.w..off.b],
        &d_pre.data,
        &mut d_input.data,
    );
}

/// Runs the decoder. With `training` set, `cache` retains everything the
/// backward pass needs; otherwise only the outputs are produced (identical
/// values either way).
pub fn decode(
    arch: &DecoderArch,
    weights: &[f64],
    input: &FeatureImage,
    training: bool,
    cache: &mut ActivationCache,
) -> Result<(FeatureImage, FeatureImage)> {
    if input.channels != arch.in_channels {
        return Err(Error::ShapeError(format!(
            "decoder expects {} channels, feature image has {}",
            arch.in_channels, input.channels
        )));
    }
    let f = arch.downsample_factor();
    if input.width % f != 0 || input.height % f != 0 {
        return Err(Error::ShapeError(format!(
            "image {}x{} not divisible by 2^{}",
            input.width, input.height, arch.depth
        )));
    }
    if weights.len() != arch.param_count() {
        return Err(Error::ShapeError(format!(
            "expected {} weights, got {}",
            arch.param_count(),
            weights.len()
        )));
    }
    let offs = layout(arch);
    cache.enc.resize_with(arch.depth, BlockCache::default);
    cache.dec.resize_with(arch.depth, BlockCache::default);

    let x0 = Tensor::from_hwc(input);
    let mut x = x0.clone();
    for l in 0..arch.depth {
        x = conv_block(&x, weights, &offs[l], 2, &mut cache.enc[l]);
    }
    for i in 0..arch.depth {
        let up = upsample2x_forward(&x);
        let skip = if i + 1 < arch.depth {
            &cache.enc[arch.depth - 2 - i].act
        } else {
            &x0
        };
        let cat = concat(&up, skip);
        x = conv_block(&cat, weights, &offs[arch.depth + i], 1, &mut cache.dec[i]);
    }
    let rgb = head_forward(&x, weights, &offs[2 * arch.depth]);
    let alpha = head_forward(&x, weights, &offs[2 * arch.depth + 1]);
    let out = (rgb.to_hwc(), alpha.to_hwc());
    if training {
        cache.input = x0;
        cache.rgb = rgb;
        cache.alpha = alpha;
        cache.param_count = weights.len();
        cache.valid = true;
    } else {
        cache.valid = false;
    }
    Ok(out)
}

/// Exact reverse-mode gradients for every layer. Returns dL/dweights and
/// dL/d(input feature image).
pub fn decode_backward(
    arch: &DecoderArch,
    weights: &[f64],
    cache: &ActivationCache,
    d_rgb: &FeatureImage,
    d_alpha: &FeatureImage,
) -> Result<(Vec<f64>, FeatureImage)> {
    if !cache.valid || cache.param_count != weights.len() {
        return Err(Error::CacheMismatch(
            "run a training-mode forward pass with these weights first".into(),
        ));
    }
    if d_rgb.width != cache.rgb.w
        || d_rgb.height != cache.rgb.h
        || d_rgb.channels != 3
        || d_alpha.width != cache.alpha.w
        || d_alpha.height != cache.alpha.h
        || d_alpha.channels != 1
    {
        return Err(Error::ShapeError("head gradient shape mismatch".into()));
    }
    let offs = layout(arch);
    let mut d_weights = vec![0.0; weights.len()];

    let last_act = &cache.dec[arch.depth - 1].act;
    let mut d_act = Tensor::zeros(last_act.c, last_act.h, last_act.w);
    head_backward(
        &Tensor::from_hwc(d_rgb),
        &cache.rgb,
        last_act,
        weights,
        &offs[2 * arch.depth],
        &mut d_weights,
        &mut d_act,
    );
    head_backward(
        &Tensor::from_hwc(d_alpha),
        &cache.alpha,
        last_act,
        weights,
        &offs[2 * arch.depth + 1],
        &mut d_weights,
        &mut d_act,
    );

    // Skip gradients accumulate into the matching encoder activation (or the
    // input image at full resolution).
    let mut d_enc_act: Vec<Option<Tensor>> = (0..arch.depth).map(|_| None).collect();
    let mut d_input_img: Option<Tensor> = None;
    for i in (0..arch.depth).rev() {
        let d_cat = conv_block_backward(
            &d_act,
            weights,
            &offs[arch.depth + i],
            1,
            &cache.dec[i],
            &mut d_weights,
        );
        let up_ch = if i == 0 {
            arch.enc_out(arch.depth - 1)
        } else {
            arch.dec_out(i - 1)
        };
        let hw = d_cat.h * d_cat.w;
        let mut d_up = Tensor::zeros(up_ch, d_cat.h, d_cat.w);
        d_up.data.copy_from_slice(&d_cat.data[..up_ch * hw]);
        let mut d_skip = Tensor::zeros(d_cat.c - up_ch, d_cat.h, d_cat.w);
        d_skip.data.copy_from_slice(&d_cat.data[up_ch * hw..]);
        if i + 1 < arch.depth {
            d_enc_act[arch.depth - 2 - i] = Some(d_skip);
        } else {
            d_input_img = Some(d_skip);
        }
        d_act = upsample2x_backward(&d_up);
    }
    for l in (0..arch.depth).rev() {
        if let Some(extra) = d_enc_act[l].take() {
            for (a, b) in d_act.data.iter_mut().zip(extra.data.iter()) {
                *a += b;
            }
        }
        d_act = conv_block_backward(&d_act, weights, &offs[l], 2, &cache.enc[l], &mut d_weights);
    }
    let mut d_input = d_input_img.expect("decoder has at least one level");
    for (a, b) in d_input.data.iter_mut().zip(d_act.data.iter()) {
        *a += b;
    }
    Ok((d_weights, d_input.to_hwc()))
}

/// I_RGB = I_R · I_alpha + (1 - I_alpha) · C_bg, per pixel.
pub fn composite_background(
    i_r: &FeatureImage,
    i_alpha: &FeatureImage,
    c_bg: [f64; 3],
) -> Result<FeatureImage> {
    if i_r.width != i_alpha.width || i_r.height != i_alpha.height || i_r.channels != 3 {
        return Err(Error::ShapeError("composite expects RGB + alpha".into()));
    }
    let mut out = FeatureImage::zeros(i_r.width, i_r.height, 3);
    for i in 0..i_r.width * i_r.height {
        let a = i_alpha.data[i];
        for c in 0..3 {
            out.data[3 * i + c] = i_r.data[3 * i + c] * a + (1.0 - a) * c_bg[c];
        }
    }
    Ok(out)
}

/// Backward of the background composite: dI_R = dI_RGB · alpha and
/// dI_alpha = Σ_ch dI_RGB · (I_R - C_bg).
pub fn composite_background_backward(
    d_rgb: &FeatureImage,
    i_r: &FeatureImage,
    i_alpha: &FeatureImage,
    c_bg: [f64; 3],
) -> (FeatureImage, FeatureImage) {
    let mut d_i_r = FeatureImage::zeros(i_r.width, i_r.height, 3);
    let mut d_i_alpha = FeatureImage::zeros(i_r.width, i_r.height, 1);
    for i in 0..i_r.width * i_r.height {
        let a = i_alpha.data[i];
        let mut da = 0.0;
        for c in 0..3 {
            let g = d_rgb.data[3 * i + c];
            d_i_r.data[3 * i + c] = g * a;
            da += g * (i_r.data[3 * i + c] - c_bg[c]);
        }
        d_i_alpha.data[i] = da;
    }
    (d_i_r, d_i_alpha)
}
