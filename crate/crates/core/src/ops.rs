//! Tensor-level primitives on single `[C, H, W]` images.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::nn::ChannelAttention;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

fn chw(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(format!("{what}: expected [C, H, W], got {s:?}"))),
    }
}

/// Cross-correlation of `input: [C_in, H, W]` with `kernel: [C_out, C_in, k, k]`,
/// zero padding on every side, stride 1.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let (c_in, h, w) = chw(input, "conv2d input")?;
    let &[c_out, kc, k, k2] = kernel.shape() else {
        return Err(Error::dim(format!("conv2d kernel: expected 4 axes, got {:?}", kernel.shape())));
    };
    if kc != c_in {
        return Err(Error::dim(format!(
            "conv2d: input has {c_in} channels, kernel expects {kc}"
        )));
    }
    if k != k2 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::dim(format!("conv2d: kernel {k}x{k2} with padding {padding} on {h}x{w}")));
    }
    bias.expect_shape(&[c_out], "conv2d bias")?;
    let geom = ConvGeom {
        n: 1,
        c_in,
        h,
        w,
        c_out,
        k,
        stride: 1,
        pad: padding,
    };
    let out = kernels::conv2d_forward(&geom, input.data(), kernel.data(), Some(bias.data()));
    Tensor::from_vec([c_out, geom.h_out(), geom.w_out()], out)
}

/// Non-overlapping `k×k` max pooling of `[C, H, W]`.
pub fn max_pool2d<T: Real>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(input, "max_pool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!("max_pool2d: {h}x{w} not divisible by {k}")));
    }
    Tensor::from_vec([c, h / k, w / k], kernels::max_pool2d(input.data(), c, h, w, k))
}

/// `(1 + scale[c]) * features[c, h, w] + shift[c]`. `scale` and `shift` may also
/// be full `[C, H, W]` maps.
pub fn film_modulate<T: Real>(features: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(features, "film features")?;
    for (name, t) in [("scale", scale), ("shift", shift)] {
        if t.shape() != [c] && t.shape() != [c, h, w] {
            return Err(Error::dim(format!(
                "film {name}: shape {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    let (si, hi) = (features.len() / scale.len(), features.len() / shift.len());
    let mut out = features.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (T::one() + scale.data()[i / si]) * *v + shift.data()[i / hi];
    }
    Ok(out)
}

/// Channel attention on `[C, H, W]` with weights `{prefix}.w1.*`, `{prefix}.w2.*` from `weights`.
pub fn channel_attention<T: Real>(
    features: &Tensor<T>,
    weights: &ParamStore<T>,
    prefix: &str,
    ratio: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = chw(features, "channel_attention")?;
    let layer = ChannelAttention::new(prefix, c, ratio)?;
    let mut g = Graph::new();
    let x = g.input(features.clone().reshape([1, c, h, w])?);
    let y = layer.forward(&mut g, weights, x)?;
    g.value(y).clone().reshape([c, h, w])
}
