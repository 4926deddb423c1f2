//! Layers that register parameters in a [`ParamStore`] and apply themselves on a [`Graph`].
//!
//! SiLU is the nonlinearity throughout; normalization is group norm with
//! `min(8, C)` groups (reduced to the largest divisor of `C` when 8 does not divide it).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Weight initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, or all zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
}

fn init_tensor<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Uniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        }
    }
}

pub fn norm_groups(c: usize) -> usize {
    (1..=c.min(8)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub init: Init,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride: 1,
            init: Init::Uniform,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = self.c_in * self.k * self.k;
        store.insert(
            self.weight(),
            init_tensor(vec![self.c_out, self.c_in, self.k, self.k], fan_in, self.init, rng),
        );
        store.insert(self.bias(), Tensor::zeros([self.c_out]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight())?;
        let b = g.param(store, &self.bias())?;
        g.conv2d(x, w, Some(b), self.stride, self.k / 2)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub init: Init,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
            init: Init::Uniform,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(
            format!("{}.weight", self.name),
            init_tensor(vec![self.d_out, self.d_in], self.d_in, self.init, rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.d_out]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub c: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        GroupNorm { name: name.into(), c }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones([self.c]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros([self.c]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        g.group_norm(x, gamma, beta, norm_groups(self.c))
    }
}

/// `out = x ⊙ sigmoid(W2 · silu(W1 · avgpool(x)))`, gate broadcast per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub name: String,
    pub c: usize,
    pub ratio: usize,
    squeeze: Linear,
    excite: Linear,
}

impl ChannelAttention {
    pub fn new(name: impl Into<String>, c: usize, ratio: usize) -> Result<Self> {
        let name = name.into();
        if ratio == 0 || c % ratio != 0 {
            return Err(Error::Config(format!(
                "channel attention ratio {ratio} must divide {c} channels"
            )));
        }
        let hidden = c / ratio;
        Ok(ChannelAttention {
            squeeze: Linear::new(format!("{name}.w1"), c, hidden),
            excite: Linear::new(format!("{name}.w2"), hidden, c),
            name,
            c,
            ratio,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.squeeze.init(store, rng);
        self.excite.init(store, rng);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let h = self.squeeze.forward(g, store, pooled)?;
        let h = g.silu(h);
        let h = self.excite.forward(g, store, h)?;
        let gate = g.sigmoid(h);
        g.broadcast_mul(x, gate)
    }
}

/// FiLM in residual form: `(1 + scale) ⊙ x + shift`. `scale` and `shift` are
/// either per-channel `[N, C]` or full `[N, C, H, W]` maps.
pub fn film<T: Real>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let gain = g.add_const(scale, T::one());
    let y = g.broadcast_mul(x, gain)?;
    g.broadcast_add(y, shift)
}

/// Per-frame `conv → (+emb) → norm → silu → conv` with a residual connection.
/// The second conv starts at zero, so a fresh block is the identity (or its
/// 1×1 skip projection when channel counts differ).
#[derive(Clone, Debug)]
pub struct SpatialResBlock {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
    emb: Option<Linear>,
    skip: Option<Conv2d>,
}

impl SpatialResBlock {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, emb_dim: Option<usize>) -> Self {
        let name = name.into();
        SpatialResBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), c_in, c_out, 3),
            norm: GroupNorm::new(format!("{name}.norm"), c_out),
            conv2: Conv2d::new(format!("{name}.conv2"), c_out, c_out, 3).zero_init(),
            emb: emb_dim.map(|d| Linear::new(format!("{name}.emb"), d, c_out)),
            skip: (c_in != c_out).then(|| Conv2d::new(format!("{name}.skip"), c_in, c_out, 1)),
            name,
            c_in,
            c_out,
        }
    }

    /// Random second conv instead of zeros, so the block is active from the start.
    pub fn active_init(mut self) -> Self {
        self.conv2.init = Init::Uniform;
        self
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.norm.init(store);
        self.conv2.init(store, rng);
        if let Some(e) = &self.emb {
            e.init(store, rng);
        }
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    /// `x: [B, C_in, H, W]`; `emb: [B, E]` when the block was built with an embedding.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, emb: Option<Var>) -> Result<Var> {
        let mut h = self.conv1.forward(g, store, x)?;
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let e = proj.forward(g, store, e)?;
            h = g.broadcast_add(h, e)?;
        }
        h = self.norm.forward(g, store, h)?;
        h = g.silu(h);
        h = self.conv2.forward(g, store, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Mixes information across the `m` frames of each sample by folding time into
/// channels: `[B*m, C, h, w] → [B, m*C, h, w]`, then norm, a point-wise
/// bottleneck, channel attention, and a residual add.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub name: String,
    pub frames: usize,
    pub c: usize,
    norm: GroupNorm,
    down: Conv2d,
    up: Conv2d,
    attention: ChannelAttention,
}

impl TemporalBlock {
    pub fn new(name: impl Into<String>, frames: usize, c: usize, ratio: usize) -> Result<Self> {
        let name = name.into();
        let folded = frames * c;
        if ratio == 0 || folded % ratio != 0 {
            return Err(Error::Config(format!(
                "temporal bottleneck ratio {ratio} must divide {folded} folded channels"
            )));
        }
        let hidden = folded / ratio;
        Ok(TemporalBlock {
            norm: GroupNorm::new(format!("{name}.norm"), folded),
            down: Conv2d::new(format!("{name}.down"), folded, hidden, 1),
            up: Conv2d::new(format!("{name}.up"), hidden, folded, 1).zero_init(),
            attention: ChannelAttention::new(format!("{name}.attn"), folded, ratio)?,
            name,
            frames,
            c,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm.init(store);
        self.down.init(store, rng);
        self.up.init(store, rng);
        self.attention.init(store, rng);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[0] % self.frames != 0 || s[1] != self.c {
            return Err(Error::dim(format!(
                "temporal block {}: input {:?} is not [B*{}, {}, h, w]",
                self.name, s, self.frames, self.c
            )));
        }
        let b = s[0] / self.frames;
        let folded = g.reshape(x, &[b, self.frames * self.c, s[2], s[3]])?;
        let h = self.norm.forward(g, store, folded)?;
        let h = self.down.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.up.forward(g, store, h)?;
        let h = self.attention.forward(g, store, h)?;
        let out = g.add(folded, h)?;
        g.reshape(out, &s)
    }
}

/// Sinusoidal features of scalar times: `[sin(t·f_k), cos(t·f_k)]` with
/// geometric frequencies. `t` is scaled by 1000 so that `t ∈ [0, 1]` spans
/// many periods in the high-frequency channels.
pub fn sinusoidal_embedding<T: Real>(ts: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t * 1000.0;
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            data.push(T::from_f64_lossy((t * freq).sin()));
        }
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            data.push(T::from_f64_lossy((t * freq).cos()));
        }
        for _ in 2 * half..dim {
            data.push(T::zero());
        }
    }
    Tensor::from_vec([ts.len(), dim], data).expect("embedding shape")
}

/// Sinusoidal time features followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub freq_dim: usize,
    pub dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new(name: &str, freq_dim: usize, dim: usize) -> Self {
        TimeEmbedding {
            freq_dim,
            dim,
            l1: Linear::new(format!("{name}.l1"), freq_dim, dim),
            l2: Linear::new(format!("{name}.l2"), dim, dim),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.l1.init(store, rng);
        self.l2.init(store, rng);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ts: &[f64]) -> Result<Var> {
        let feats = g.input(sinusoidal_embedding(ts, self.freq_dim));
        let h = self.l1.forward(g, store, feats)?;
        let h = g.silu(h);
        self.l2.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groups_divide_channels() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(5), 5);
        assert_eq!(norm_groups(20), 5);
        for c in 1..200 {
            assert_eq!(c % norm_groups(c), 0);
        }
    }

    #[test]
    fn fresh_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = SpatialResBlock::new("rb", 4, 4, Some(6));
        block.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let xt = Tensor::randn([3, 4, 5, 5], &mut rng);
        let x = g.input(xt.clone());
        let e = g.input(Tensor::randn([3, 6], &mut rng));
        let y = block.forward(&mut g, &store, x, Some(e)).unwrap();
        assert!(g.value(y).bit_eq(&xt));
    }

    #[test]
    fn fresh_temporal_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = TemporalBlock::new("tb", 3, 4, 4).unwrap();
        block.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let xt = Tensor::randn([6, 4, 3, 3], &mut rng);
        let x = g.input(xt.clone());
        let y = block.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).bit_eq(&xt));
    }

    #[test]
    fn temporal_block_rejects_bad_ratio() {
        assert!(TemporalBlock::new("tb", 3, 4, 5).is_err());
        assert!(ChannelAttention::new("ca", 6, 4).is_err());
    }
}
