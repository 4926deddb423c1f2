//! Recurrent-free deterministic backbone: a per-frame strided conv encoder, a
//! translator that mixes all input frames folded into channels, and a
//! per-frame decoder. Trained with plain MSE it estimates the posterior mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, SpatialResBlock};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{run_training, StepRecord, TrainConfig};
use crate::optim::AdamState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub l_in: usize,
    pub l_out: usize,
    pub height: usize,
    pub width: usize,
    /// Per-frame feature channels in the encoder and decoder.
    pub channels: usize,
    /// Translator width.
    pub hidden: usize,
    /// Residual blocks in the translator.
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            l_in: 5,
            l_out: 20,
            height: 32,
            width: 32,
            channels: 16,
            hidden: 64,
            depth: 2,
        }
    }
}

/// Spatial downsampling of the latent grid.
const DOWN: usize = 4;

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    enc_in: Conv2d,
    enc_norm: [GroupNorm; 3],
    enc_down: [Conv2d; 2],
    translator: Vec<SpatialResBlock>,
    tr_out: Conv2d,
    dec_conv: Conv2d,
    dec_up: Conv2d,
    dec_norm: [GroupNorm; 2],
    head: Conv2d,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let c = config.channels;
        if config.l_in == 0 || config.l_out == 0 || c == 0 || config.hidden == 0 {
            return Err(Error::Config("backbone lengths and widths must be positive".into()));
        }
        if config.height % DOWN != 0 || config.width % DOWN != 0 {
            return Err(Error::Config(format!(
                "backbone needs frame sides divisible by {DOWN}, got {}x{}",
                config.height, config.width
            )));
        }
        let mut translator = Vec::new();
        let mut width = config.l_in * c;
        for i in 0..config.depth {
            translator.push(SpatialResBlock::new(format!("bb.tr{i}"), width, config.hidden, None));
            width = config.hidden;
        }
        let tr_out = Conv2d::new("bb.tr_out", width, config.l_out * c, 3);
        let half = (c / 2).max(1);
        Ok(Backbone {
            enc_in: Conv2d::new("bb.enc_in", 1, c, 3),
            enc_norm: [0, 1, 2].map(|i| GroupNorm::new(format!("bb.enc_norm{i}"), c)),
            enc_down: [0, 1].map(|i| Conv2d::new(format!("bb.enc_down{i}"), c, c, 3).stride(2)),
            translator,
            tr_out,
            dec_conv: Conv2d::new("bb.dec_conv", c, c, 3),
            dec_up: Conv2d::new("bb.dec_up", c, half, 3),
            dec_norm: [GroupNorm::new("bb.dec_norm0", c), GroupNorm::new("bb.dec_norm1", half)],
            head: Conv2d::new("bb.head", half, 4, 3).zero_init(),
            config,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.enc_in.init(store, rng);
        for n in &self.enc_norm {
            n.init(store);
        }
        for d in &self.enc_down {
            d.init(store, rng);
        }
        for b in &self.translator {
            b.init(store, rng);
        }
        self.tr_out.init(store, rng);
        self.dec_conv.init(store, rng);
        self.dec_up.init(store, rng);
        for n in &self.dec_norm {
            n.init(store);
        }
        self.head.init(store, rng);
    }

    fn norm_act<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, n: &GroupNorm, x: Var) -> Result<Var> {
        let h = n.forward(g, store, x)?;
        Ok(g.silu(h))
    }

    /// `x: [B, L_in, 1, H, W]` (or `[L_in, 1, H, W]` for B = 1) → `[B, L_out, 1, H, W]`, unclamped.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(x).to_vec();
        let (b, l, h, w) = match s.as_slice() {
            &[l, 1, h, w] => (1, l, h, w),
            &[b, l, 1, h, w] => (b, l, h, w),
            _ => return Err(Error::dim(format!("backbone input {s:?} is not [B, L, 1, H, W]"))),
        };
        if l != cfg.l_in || h != cfg.height || w != cfg.width {
            return Err(Error::dim(format!(
                "backbone expects {} frames of {}x{}, got {l} of {h}x{w}",
                cfg.l_in, cfg.height, cfg.width
            )));
        }
        let c = cfg.channels;
        let (hl, wl) = (h / DOWN, w / DOWN);
        let frames = g.reshape(x, &[b * l, 1, h, w])?;
        let mut e = self.enc_in.forward(g, store, frames)?;
        e = Self::norm_act(g, store, &self.enc_norm[0], e)?;
        for (conv, norm) in self.enc_down.iter().zip(&self.enc_norm[1..]) {
            e = conv.forward(g, store, e)?;
            e = Self::norm_act(g, store, norm, e)?;
        }
        let mut t = g.reshape(e, &[b, l * c, hl, wl])?;
        for blk in &self.translator {
            t = blk.forward(g, store, t, None)?;
        }
        let t = self.tr_out.forward(g, store, t)?;
        let d = g.reshape(t, &[b * cfg.l_out, c, hl, wl])?;
        let d = self.dec_conv.forward(g, store, d)?;
        let d = Self::norm_act(g, store, &self.dec_norm[0], d)?;
        let d = g.upsample_nearest(d, 2)?;
        let d = self.dec_up.forward(g, store, d)?;
        let d = Self::norm_act(g, store, &self.dec_norm[1], d)?;
        let d = self.head.forward(g, store, d)?;
        let d = g.pixel_shuffle(d, 2)?;
        g.reshape(d, &[b, cfg.l_out, 1, h, w])
    }

    /// μ_raw for a batch of inputs `[L_in, 1, H, W]`, clamped to `[0, 1]`.
    pub fn predict_batch(&self, store: &ParamStore<f32>, inputs: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut frames = Vec::with_capacity(inputs.len() * inputs[0].len());
        for x in inputs {
            x.expect_shape(&[self.config.l_in, 1, self.config.height, self.config.width], "backbone input")?;
            frames.extend_from_slice(x.data());
        }
        let cfg = &self.config;
        let batch = Tensor::from_vec([inputs.len(), cfg.l_in, 1, cfg.height, cfg.width], frames)?;
        let mut g = Graph::new();
        let xv = g.input(batch);
        let y = self.forward(&mut g, store, xv)?;
        let y = g.value(y).clamp(0.0, 1.0);
        let per = cfg.l_out * cfg.height * cfg.width;
        y.into_data()
            .chunks(per)
            .map(|c| Tensor::from_vec([cfg.l_out, 1, cfg.height, cfg.width], c.to_vec()))
            .collect()
    }

    /// `backbone_forward`: μ_raw = D(x), clamped to `[0, 1]`.
    pub fn predict(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict_batch(store, &[x])?.remove(0))
    }

    /// First `m = L_in` frames of the prediction from segment `s`: D(s)_1.
    pub fn predict_segment_head(&self, store: &ParamStore<f32>, s: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict_segment_heads(store, &[s])?.remove(0))
    }

    pub fn predict_segment_heads(&self, store: &ParamStore<f32>, segs: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let m = self.config.l_in;
        for s in segs {
            if s.dim(0) != m {
                return Err(Error::Config(format!(
                    "segment of {} frames cannot drive a backbone with {m} input frames",
                    s.dim(0)
                )));
            }
        }
        if self.config.l_out < m {
            return Err(Error::Config(format!(
                "backbone emits {} frames, fewer than the segment length {m}",
                self.config.l_out
            )));
        }
        self.predict_batch(store, segs)?
            .into_iter()
            .map(|y| y.slice_rows(0, m))
            .collect()
    }
}

/// Batch MSE between the unclamped backbone output and the targets.
pub fn backbone_loss<T: Real>(
    model: &Backbone,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &[&WindowSample],
) -> Result<Var> {
    let cfg = &model.config;
    let shape_in = [batch.len(), cfg.l_in, 1, cfg.height, cfg.width];
    let shape_out = [batch.len(), cfg.l_out, 1, cfg.height, cfg.width];
    let xs: Vec<T> = batch
        .iter()
        .flat_map(|s| s.input.data().iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    let ys: Vec<T> = batch
        .iter()
        .flat_map(|s| s.target.data().iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    let x = g.input(Tensor::from_vec(shape_in, xs)?);
    let y = g.input(Tensor::from_vec(shape_out, ys)?);
    let pred = model.forward(g, store, x)?;
    g.mse(pred, y)
}

/// Draws `n` sample indices uniformly with replacement.
pub fn draw_batch<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

pub fn train_backbone<O: FnMut(&StepRecord)>(
    model: &Backbone,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    data: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
    on_step: O,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::Precondition("backbone training split is empty".into()));
    }
    let mc = &model.config;
    for s in data {
        s.input.expect_shape(&[mc.l_in, 1, mc.height, mc.width], "training input")?;
        s.target.expect_shape(&[mc.l_out, 1, mc.height, mc.width], "training target")?;
    }
    run_training(
        store,
        adam,
        cfg,
        seed,
        |g, st, rng| {
            let idx = draw_batch(data.len(), cfg.batch, rng);
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &data[i]).collect();
            backbone_loss(model, g, st, &batch)
        },
        on_step,
    )
}
