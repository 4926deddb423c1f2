//! Spatial-temporal U-Net velocity network with a side encoder.
//!
//! The main path sees `concat(z_t, backbone_cond)` per frame. The side encoder
//! sees only `side_cond` and modulates the deeper scales through FiLM maps.
//! Frames are processed as a `[B*m, C, h, w]` batch; temporal blocks fold the
//! `m` frames of each sample into channels to mix them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{film, Conv2d, GroupNorm, SpatialResBlock, TemporalBlock, TimeEmbedding};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct STUNetConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel-unshuffle factor applied before the first conv.
    pub patch: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_scale: usize,
    /// Scale indices (0 = finest) that receive side-encoder FiLM.
    pub injection_scales: Vec<usize>,
    pub time_freq_dim: usize,
    pub emb_dim: usize,
    /// Bottleneck ratio of the temporal blocks.
    pub temporal_ratio: usize,
    /// Size of the segment-index table; `None` disables the index condition.
    pub segment_vocab: Option<usize>,
}

impl Default for STUNetConfig {
    fn default() -> Self {
        STUNetConfig {
            frames: 5,
            height: 32,
            width: 32,
            patch: 2,
            base_channels: 16,
            channel_mults: vec![1, 2, 2],
            blocks_per_scale: 1,
            injection_scales: vec![1, 2],
            time_freq_dim: 64,
            emb_dim: 32,
            temporal_ratio: 4,
            segment_vocab: None,
        }
    }
}

impl STUNetConfig {
    pub fn num_scales(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels * self.channel_mults[scale]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_scales();
        if n == 0 || self.frames == 0 || self.base_channels == 0 || self.patch == 0 {
            return Err(Error::Config("U-Net needs at least one scale, one frame and positive widths".into()));
        }
        let factor = self.patch << (n - 1);
        if self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by {factor} (patch {} and {n} scales)",
                self.height, self.width, self.patch
            )));
        }
        for &s in &self.injection_scales {
            if s >= n {
                return Err(Error::Config(format!("injection scale {s} does not exist ({n} scales)")));
            }
            if s < n / 2 {
                return Err(Error::Config(format!(
                    "injection scale {s} is in the shallow half of {n} scales"
                )));
            }
        }
        if let Some(0) = self.segment_vocab {
            return Err(Error::Config("segment vocabulary must be non-empty".into()));
        }
        Ok(())
    }
}

/// Conditions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `[m, 1, H, W]`, concatenated with `z_t` frame by frame.
    pub backbone_cond: Tensor<f32>,
    /// `[m, 1, H, W]`, seen only by the side encoder.
    pub side_cond: Tensor<f32>,
    pub segment_index: Option<usize>,
}

/// Conditions for a batch of `B` samples, frames stacked along axis 0.
#[derive(Clone, Debug)]
pub struct CondBatch<T> {
    pub backbone_cond: Tensor<T>,
    pub side_cond: Tensor<T>,
    pub segment_index: Option<Vec<usize>>,
}

impl<T: Real> CondBatch<T> {
    pub fn stack(items: &[&ConditionBundle]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Precondition("empty condition batch".into()));
        }
        let bc: Vec<&Tensor<f32>> = items.iter().map(|c| &c.backbone_cond).collect();
        let sc: Vec<&Tensor<f32>> = items.iter().map(|c| &c.side_cond).collect();
        let idx: Option<Vec<usize>> = items.iter().map(|c| c.segment_index).collect();
        if idx.is_none() && items.iter().any(|c| c.segment_index.is_some()) {
            return Err(Error::Config("segment index given for only part of a batch".into()));
        }
        Ok(CondBatch {
            backbone_cond: Tensor::concat_rows(&bc)?.cast(),
            side_cond: Tensor::concat_rows(&sc)?.cast(),
            segment_index: idx,
        })
    }
}

struct Scale {
    down: Option<Conv2d>,
    blocks: Vec<SpatialResBlock>,
    temporal: TemporalBlock,
    up_blocks: Vec<SpatialResBlock>,
    up_temporal: TemporalBlock,
    film: Option<(Conv2d, Conv2d)>,
    side_down: Option<Conv2d>,
    side_conv: Conv2d,
}

pub struct STUNet {
    pub config: STUNetConfig,
    pub prefix: String,
    conv_in: Conv2d,
    side_in: Conv2d,
    time: TimeEmbedding,
    scales: Vec<Scale>,
    up_convs: Vec<Conv2d>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl STUNet {
    pub fn new(prefix: &str, config: STUNetConfig) -> Result<Self> {
        config.validate()?;
        let p = prefix;
        let n = config.num_scales();
        let e = config.emb_dim;
        let pp = config.patch * config.patch;
        let c0 = config.channels(0);
        let mut scales = Vec::with_capacity(n);
        for s in 0..n {
            let c = config.channels(s);
            let c_prev = if s == 0 { c0 } else { config.channels(s - 1) };
            let blocks = (0..config.blocks_per_scale)
                .map(|b| SpatialResBlock::new(format!("{p}.d{s}.res{b}"), c, c, Some(e)).active_init())
                .collect();
            // up path at scale s consumes concat(upsampled deeper features, skip)
            let up_in = if s + 1 < n { c + c } else { c };
            let up_blocks = (0..config.blocks_per_scale)
                .map(|b| {
                    let cin = if b == 0 { up_in } else { c };
                    SpatialResBlock::new(format!("{p}.u{s}.res{b}"), cin, c, Some(e)).active_init()
                })
                .collect();
            let inject = config.injection_scales.contains(&s);
            scales.push(Scale {
                down: (s > 0).then(|| Conv2d::new(format!("{p}.d{s}.down"), c_prev, c, 3).stride(2)),
                blocks,
                temporal: TemporalBlock::new(format!("{p}.d{s}.temporal"), config.frames, c, config.temporal_ratio)?,
                up_blocks,
                up_temporal: TemporalBlock::new(format!("{p}.u{s}.temporal"), config.frames, c, config.temporal_ratio)?,
                film: inject.then(|| {
                    (
                        Conv2d::new(format!("{p}.side{s}.scale"), c, c, 1).zero_init(),
                        Conv2d::new(format!("{p}.side{s}.shift"), c, c, 1).zero_init(),
                    )
                }),
                side_down: (s > 0).then(|| Conv2d::new(format!("{p}.side{s}.down"), c_prev, c, 3).stride(2)),
                side_conv: Conv2d::new(format!("{p}.side{s}.conv"), c, c, 3),
            });
        }
        let up_convs = (0..n.saturating_sub(1))
            .map(|s| Conv2d::new(format!("{p}.u{s}.up"), config.channels(s + 1), config.channels(s), 3))
            .collect();
        Ok(STUNet {
            conv_in: Conv2d::new(format!("{p}.conv_in"), 2 * pp, c0, 3),
            side_in: Conv2d::new(format!("{p}.side_in"), pp, c0, 3),
            time: TimeEmbedding::new(&format!("{p}.time"), config.time_freq_dim, e),
            scales,
            up_convs,
            out_norm: GroupNorm::new(format!("{p}.out_norm"), c0),
            conv_out: Conv2d::new(format!("{p}.conv_out"), c0, pp, 3),
            prefix: prefix.to_string(),
            config,
        })
    }

    fn segment_table(&self) -> String {
        format!("{}.segment_emb", self.prefix)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv_in.init(store, rng);
        self.side_in.init(store, rng);
        self.time.init(store, rng);
        if let Some(v) = self.config.segment_vocab {
            store.insert(self.segment_table(), Tensor::randn([v, self.config.emb_dim], rng));
        }
        for sc in &self.scales {
            if let Some(d) = &sc.down {
                d.init(store, rng);
            }
            for b in sc.blocks.iter().chain(&sc.up_blocks) {
                b.init(store, rng);
            }
            sc.temporal.init(store, rng);
            sc.up_temporal.init(store, rng);
            if let Some((a, b)) = &sc.film {
                a.init(store, rng);
                b.init(store, rng);
            }
            if let Some(d) = &sc.side_down {
                d.init(store, rng);
            }
            sc.side_conv.init(store, rng);
        }
        for u in &self.up_convs {
            u.init(store, rng);
        }
        self.out_norm.init(store);
        self.conv_out.init(store, rng);
    }

    /// Names of the FiLM head parameters.
    pub fn film_param_names(&self) -> Vec<String> {
        self.scales
            .iter()
            .filter_map(|s| s.film.as_ref())
            .flat_map(|(a, b)| [a.weight(), a.bias(), b.weight(), b.bias()])
            .collect()
    }

    /// Per-scale FiLM `(scale, shift)` maps from the side condition.
    fn side_encoder<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, side: Var) -> Result<Vec<Option<(Var, Var)>>> {
        let mut h = g.pixel_unshuffle(side, self.config.patch)?;
        h = self.side_in.forward(g, store, h)?;
        h = g.silu(h);
        let mut out = Vec::with_capacity(self.scales.len());
        for sc in &self.scales {
            if let Some(d) = &sc.side_down {
                h = d.forward(g, store, h)?;
                h = g.silu(h);
            }
            h = sc.side_conv.forward(g, store, h)?;
            h = g.silu(h);
            out.push(match &sc.film {
                Some((a, b)) => Some((a.forward(g, store, h)?, b.forward(g, store, h)?)),
                None => None,
            });
            if out.len() > self.config.injection_scales.iter().copied().max().unwrap_or(0) {
                break;
            }
        }
        out.resize(self.scales.len(), None);
        Ok(out)
    }

    /// `z: [B*m, 1, H, W]`, one time per sample → velocity `[B*m, 1, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        ts: &[f64],
        cond: &CondBatch<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let m = cfg.frames;
        let b = ts.len();
        let frame_shape = [b * m, 1, cfg.height, cfg.width];
        if g.shape(z) != frame_shape {
            return Err(Error::dim(format!(
                "velocity net expects z of shape {frame_shape:?}, got {:?}",
                g.shape(z)
            )));
        }
        cond.backbone_cond.expect_shape(&frame_shape, "backbone condition")?;
        cond.side_cond.expect_shape(&frame_shape, "side condition")?;

        let mut emb = self.time.forward(g, store, ts)?;
        match (cfg.segment_vocab, &cond.segment_index) {
            (Some(_), Some(idx)) => {
                if idx.len() != b {
                    return Err(Error::dim(format!("{} segment indices for {b} samples", idx.len())));
                }
                let table = g.param(store, &self.segment_table())?;
                let se = g.gather_rows(table, idx)?;
                emb = g.add(emb, se)?;
            }
            (Some(_), None) => {
                return Err(Error::Config("this network requires a segment index condition".into()));
            }
            (None, _) => {}
        }
        let emb = g.silu(emb);
        let emb = g.repeat_rows(emb, m)?;

        let bc = g.input(cond.backbone_cond.clone());
        let side = g.input(cond.side_cond.clone());
        let films = self.side_encoder(g, store, side)?;

        let x = g.concat_channels(z, bc)?;
        let x = g.pixel_unshuffle(x, cfg.patch)?;
        let mut h = self.conv_in.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(self.scales.len());
        for (sc, fm) in self.scales.iter().zip(&films) {
            if let Some(d) = &sc.down {
                h = d.forward(g, store, h)?;
            }
            if let Some((scale, shift)) = fm {
                h = film(g, h, *scale, *shift)?;
            }
            for blk in &sc.blocks {
                h = blk.forward(g, store, h, Some(emb))?;
            }
            h = sc.temporal.forward(g, store, h)?;
            skips.push(h);
        }
        for s in (0..self.scales.len()).rev() {
            let sc = &self.scales[s];
            if s + 1 < self.scales.len() {
                h = g.upsample_nearest(h, 2)?;
                h = self.up_convs[s].forward(g, store, h)?;
            }
            if let Some((scale, shift)) = films[s] {
                h = film(g, h, scale, shift)?;
            }
            if s + 1 < self.scales.len() {
                h = g.concat_channels(h, skips[s])?;
            }
            for blk in &sc.up_blocks {
                h = blk.forward(g, store, h, Some(emb))?;
            }
            h = sc.up_temporal.forward(g, store, h)?;
        }
        let h = self.out_norm.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv_out.forward(g, store, h)?;
        g.pixel_shuffle(h, cfg.patch)
    }

    /// Velocity for a batch, detached from any graph.
    pub fn velocity(&self, store: &ParamStore<f32>, z: &Tensor<f32>, ts: &[f64], cond: &CondBatch<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let v = self.forward(&mut g, store, zv, ts, cond)?;
        Ok(g.value(v).clone())
    }
}
