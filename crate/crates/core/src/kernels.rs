//! Forward and backward kernels on batched `[N, C, H, W]` buffers.
//!
//! These are the raw loops behind the autodiff graph. The public tensor-level
//! entry points live in [`crate::ops`].

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Target number of im2col columns per GEMM; samples are grouped up to this width.
const COLS_PER_CHUNK: usize = 2048;

/// Output columns `lo..hi` whose stride-1 tap `kx` lands inside a row of width `w`.
fn valid_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

/// Writes the patches of one sample into columns `off..off + p` of a row-major
/// `[c_in*k*k, ld]` matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.h_out(), g.w_out());
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.w, wo);
                        line[..lo].iter_mut().for_each(|v| *v = T::zero());
                        line[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            let s0 = lo + kx - g.pad;
                            line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, gx: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    for c in 0..g.c_in {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ld + off..row * ld + off + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.w, wo);
                        if lo < hi {
                            let s0 = lo + kx - g.pad;
                            for (d, &v) in line[s0..s0 + hi - lo].iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copies `[nb, c, p]` sample-major data into a `[c, nb*p]` matrix.
fn gather_channels<T: Real>(src: &[T], nb: usize, c: usize, p: usize, dst: &mut [T]) {
    let ld = nb * p;
    for n in 0..nb {
        for ch in 0..c {
            dst[ch * ld + n * p..ch * ld + (n + 1) * p].copy_from_slice(&src[(n * c + ch) * p..(n * c + ch + 1) * p]);
        }
    }
}

/// Inverse of [`gather_channels`], accumulating into `dst`.
fn scatter_channels_add<T: Real>(src: &[T], nb: usize, c: usize, p: usize, dst: &mut [T]) {
    let ld = nb * p;
    for n in 0..nb {
        for ch in 0..c {
            let d = &mut dst[(n * c + ch) * p..(n * c + ch + 1) * p];
            for (o, &v) in d.iter_mut().zip(&src[ch * ld + n * p..ch * ld + (n + 1) * p]) {
                *o += v;
            }
        }
    }
}

fn chunk_samples(g: &ConvGeom) -> usize {
    let p = g.h_out() * g.w_out();
    (COLS_PER_CHUNK / p.max(1)).clamp(1, g.n.max(1))
}

/// Fills the `[ckk, nb*p]` patch matrix for samples `n0 .. n0 + nb`.
fn patches<T: Real>(g: &ConvGeom, x: &[T], n0: usize, nb: usize, cols: &mut [T]) {
    let p = g.h_out() * g.w_out();
    let in_len = g.c_in * g.h * g.w;
    let chunk = &x[n0 * in_len..(n0 + nb) * in_len];
    if g.is_pointwise() {
        gather_channels(chunk, nb, g.c_in, p, cols);
    } else {
        for j in 0..nb {
            im2col(g, &chunk[j * in_len..(j + 1) * in_len], cols, nb * p, j * p);
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let p = g.h_out() * g.w_out();
    let out_len = g.c_out * p;
    let ckk = g.col_rows();
    let mut out = vec![T::zero(); g.n * out_len];
    let step = chunk_samples(g);
    let mut cols = vec![T::zero(); ckk * step * p];
    let mut res = vec![T::zero(); g.c_out * step * p];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = step.min(g.n - n0);
        let cols = &mut cols[..ckk * nb * p];
        let res = &mut res[..g.c_out * nb * p];
        patches(g, x, n0, nb, cols);
        T::gemm(g.c_out, ckk, nb * p, T::one(), w, false, cols, false, T::zero(), res);
        scatter_channels_add(res, nb, g.c_out, p, &mut out[n0 * out_len..(n0 + nb) * out_len]);
        n0 += nb;
    }
    if let Some(b) = b {
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bias = b[i % g.c_out];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_gx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.h_out() * g.w_out();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let ckk = g.col_rows();
    let mut gw = vec![T::zero(); g.c_out * ckk];
    let mut gb = vec![T::zero(); g.c_out];
    let mut gx = need_gx.then(|| vec![T::zero(); g.n * in_len]);
    for (i, chunk) in gy.chunks(p).enumerate() {
        gb[i % g.c_out] += chunk.iter().copied().sum::<T>();
    }
    let step = chunk_samples(g);
    let mut cols = vec![T::zero(); ckk * step * p];
    let mut gys = vec![T::zero(); g.c_out * step * p];
    let mut gcols = vec![T::zero(); ckk * step * p];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = step.min(g.n - n0);
        let cols = &mut cols[..ckk * nb * p];
        let gys = &mut gys[..g.c_out * nb * p];
        patches(g, x, n0, nb, cols);
        gather_channels(&gy[n0 * out_len..(n0 + nb) * out_len], nb, g.c_out, p, gys);
        T::gemm(g.c_out, nb * p, ckk, T::one(), gys, false, cols, true, T::one(), &mut gw);
        if let Some(gx) = gx.as_mut() {
            let gcols = &mut gcols[..ckk * nb * p];
            T::gemm(ckk, g.c_out, nb * p, T::one(), w, true, gys, false, T::zero(), gcols);
            let gxc = &mut gx[n0 * in_len..(n0 + nb) * in_len];
            if g.is_pointwise() {
                scatter_channels_add(gcols, nb, g.c_in, p, gxc);
            } else {
                for j in 0..nb {
                    col2im_add(g, gcols, nb * p, j * p, &mut gxc[j * in_len..(j + 1) * in_len]);
                }
            }
        }
        n0 += nb;
    }
    (gx, gw, gb)
}

/// Saved statistics of a group-norm forward pass, one entry per `(n, group)`.
#[derive(Clone, Debug)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub fn group_norm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormStats<T>) {
    let cpg = c / groups;
    let count = T::from_usize(cpg * hw).unwrap();
    let eps = T::from_f64_lossy(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut inv_std = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cpg) * hw;
            let span = &x[start..start + cpg * hw];
            let mu = span.iter().copied().sum::<T>() / count;
            let var = span.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let base = start + cc * hw;
                for i in 0..hw {
                    out[base + i] = (x[base + i] - mu) * inv * gamma[ch] + beta[ch];
                }
            }
            mean.push(mu);
            inv_std.push(inv);
        }
    }
    (out, GroupNormStats { mean, inv_std })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &[T],
    gy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    stats: &GroupNormStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let count = T::from_usize(cpg * hw).unwrap();
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let s = ni * groups + gi;
            let (mu, inv) = (stats.mean[s], stats.inv_std[s]);
            let start = (ni * c + gi * cpg) * hw;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let base = start + cc * hw;
                for i in 0..hw {
                    let xhat = (x[base + i] - mu) * inv;
                    let g = gy[base + i];
                    ggamma[ch] += g * xhat;
                    gbeta[ch] += g;
                    let d = g * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xhat;
                }
            }
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let base = start + cc * hw;
                for i in 0..hw {
                    let xhat = (x[base + i] - mu) * inv;
                    let d = gy[base + i] * gamma[ch];
                    gx[base + i] = inv / count * (count * d - sum_d - xhat * sum_dx);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub fn max_pool2d<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![T::neg_infinity(); c * ho * wo];
    for ci in 0..c {
        for y in 0..ho * k {
            for xx in 0..wo * k {
                let v = x[(ci * h + y) * w + xx];
                let o = &mut out[(ci * ho + y / k) * wo + xx / k];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &[T], nc: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); nc * ho * wo];
    for p in 0..nc {
        for y in 0..ho {
            for xx in 0..wo {
                out[(p * ho + y) * wo + xx] = x[(p * h + y / f) * w + xx / f];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(gy: &[T], nc: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut gx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..ho {
            for xx in 0..wo {
                gx[(p * h + y / f) * w + xx / f] += gy[(p * ho + y) * wo + xx];
            }
        }
    }
    gx
}

/// `[N, C, H, W] -> [N, C*r*r, H/r, W/r]`; output channel `c*r*r + dy*r + dx`.
pub fn pixel_unshuffle<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * r * r + (y % r) * r + xx % r;
                    let dst = ((ni * c * r * r + oc) * ho + y / r) * wo + xx / r;
                    out[dst] = x[((ni * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`]: `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
pub fn pixel_shuffle<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let ic = ci * r * r + (y % r) * r + xx % r;
                    let src = ((ni * c * r * r + ic) * h + y / r) * w + xx / r;
                    out[((ni * c + ci) * ho + y) * wo + xx] = x[src];
                }
            }
        }
    }
    out
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}
