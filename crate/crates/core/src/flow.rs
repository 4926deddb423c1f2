//! Conditional Flow Matching on the straight noise-to-data path.
//!
//! `z_t = (1 - t) ε + t x`, target velocity `x - ε`, sampled by forward Euler
//! from `t = 0` to `t = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Linear};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// `(1 - t) ε + t x`.
pub fn fm_interpolate<T: Real>(eps: &Tensor<T>, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let t = T::from_f64_lossy(t);
    let s = T::one() - t;
    eps.zip_map(x, |e, v| s * e + t * v)
}

#[derive(Clone, Debug)]
pub struct FlowSample<T> {
    pub eps: Tensor<T>,
    pub x: Tensor<T>,
    pub t: f64,
    pub z_t: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(eps: Tensor<T>, x: Tensor<T>, t: f64) -> Result<Self> {
        let z_t = fm_interpolate(&eps, &x, t)?;
        let v = x.sub(&eps)?;
        Ok(FlowSample { eps, x, t, z_t, v })
    }

    pub fn draw<R: Rng + ?Sized>(x: Tensor<T>, rng: &mut R) -> Result<Self> {
        let eps = Tensor::randn(x.shape().to_vec(), rng);
        let t = rng.gen::<f64>();
        Self::new(eps, x, t)
    }
}

/// A stacked batch of flow samples: `z_t` and `v` are `[B * rows, ...]`, one
/// time per batch element.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    pub z_t: Tensor<T>,
    pub v: Tensor<T>,
    pub ts: Vec<f64>,
}

impl<T: Real> FlowBatch<T> {
    pub fn from_samples(samples: &[FlowSample<T>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition("flow batch is empty".into()));
        }
        let z: Vec<&Tensor<T>> = samples.iter().map(|s| &s.z_t).collect();
        let v: Vec<&Tensor<T>> = samples.iter().map(|s| &s.v).collect();
        Ok(FlowBatch {
            z_t: Tensor::concat_rows(&z)?,
            v: Tensor::concat_rows(&v)?,
            ts: samples.iter().map(|s| s.t).collect(),
        })
    }

    /// Fresh ε and `t ~ U(0, 1)` for each data element.
    pub fn draw<R: Rng + ?Sized>(xs: &[Tensor<T>], rng: &mut R) -> Result<Self> {
        let samples = xs
            .iter()
            .map(|x| FlowSample::draw(x.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples)
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Velocity regression loss. `predict` maps `(z_t, ts)` to a velocity of the
/// same shape; the loss is the element mean of the squared error against `x - ε`.
pub fn fm_loss<T, F>(g: &mut Graph<T>, batch: &FlowBatch<T>, predict: F) -> Result<Var>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, Var, &[f64]) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::Precondition("flow batch is empty".into()));
    }
    let z = g.input(batch.z_t.clone());
    let pred = predict(g, z, &batch.ts)?;
    g.value(pred).check_finite("velocity prediction")?;
    let target = g.input(batch.v.clone());
    g.mse(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.steps).map(|k| k as f64 / self.steps as f64)
    }
}

/// Forward Euler from `x0` at `t = 0` to `t = 1`. `f(x, t)` returns the velocity.
pub fn euler_integrate<T, F>(x0: Tensor<T>, steps: usize, mut f: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = T::from_f64_lossy(1.0 / steps as f64);
    let mut x = x0;
    for k in 0..steps {
        let v = f(&x, k as f64 / steps as f64)?;
        x = x.zip_map(&v, |a, b| a + dt * b)?;
        if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sampler state became non-finite at step {k} of {steps} (element {i})"
            )));
        }
    }
    Ok(x)
}

/// Draws `ε ~ N(0, I)` of `shape` from `cfg.seed` and integrates it.
pub fn euler_sample<T, F>(cfg: &SamplerConfig, shape: &[usize], f: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    euler_integrate(Tensor::randn(shape.to_vec(), &mut rng), cfg.steps, f)
}

/// Small MLP velocity field for scalar data, used to validate the loss and sampler.
#[derive(Clone, Debug)]
pub struct ToyFlow {
    pub hidden: usize,
    pub time_dim: usize,
    inp: Linear,
    time: Linear,
    mid: Linear,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub hidden: usize,
    pub train_steps: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            hidden: 64,
            train_steps: 1500,
            batch: 256,
            lr_max: 3e-3,
            lr_min: 1e-5,
            seed: 0,
        }
    }
}

impl ToyFlow {
    pub fn new(hidden: usize) -> Self {
        let time_dim = 16;
        ToyFlow {
            hidden,
            time_dim,
            inp: Linear::new("toy.inp", 1, hidden),
            time: Linear::new("toy.time", time_dim, hidden),
            mid: Linear::new("toy.mid", hidden, hidden),
            out: Linear::new("toy.out", hidden, 1),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in [&self.inp, &self.time, &self.mid, &self.out] {
            l.init(store, rng);
        }
    }

    /// `z: [B, 1]`, one time per row.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, ts: &[f64]) -> Result<Var> {
        // low-frequency features only: the toy field is smooth in t
        let feats = g.input(sinusoidal_embedding(&ts.iter().map(|t| t / 1000.0 * 4.0).collect::<Vec<_>>(), self.time_dim));
        let a = self.inp.forward(g, store, z)?;
        let b = self.time.forward(g, store, feats)?;
        let h = g.add(a, b)?;
        let h = g.silu(h);
        let h = self.mid.forward(g, store, h)?;
        let h = g.silu(h);
        self.out.forward(g, store, h)
    }

    pub fn sample<T: Real>(&self, store: &ParamStore<T>, n: usize, cfg: &SamplerConfig) -> Result<Vec<f64>> {
        let out = euler_sample(cfg, &[n, 1], |x, t| {
            let mut g = Graph::new();
            let z = g.input(x.clone());
            let v = self.forward(&mut g, store, z, &vec![t; n])?;
            Ok(g.value(v).clone())
        })?;
        Ok(out.to_f64_vec())
    }
}

/// Trains a [`ToyFlow`] on the two-point distribution `{a, b}` with equal
/// weights. Returns the parameters and the per-step loss trace.
pub fn fit_flow_toy(a: f64, b: f64, cfg: &ToyConfig) -> Result<(ToyFlow, ParamStore<f64>, Vec<f64>)> {
    let model = ToyFlow::new(cfg.hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut trace = Vec::with_capacity(cfg.train_steps as usize);
    for step in 0..cfg.train_steps {
        let xs: Vec<f64> = (0..cfg.batch).map(|_| if rng.gen_bool(0.5) { a } else { b }).collect();
        let x = Tensor::from_vec([cfg.batch, 1], xs)?;
        let eps = Tensor::randn([cfg.batch, 1], &mut rng);
        let ts: Vec<f64> = (0..cfg.batch).map(|_| rng.gen::<f64>()).collect();
        let z_t = Tensor::from_vec(
            [cfg.batch, 1],
            (0..cfg.batch)
                .map(|i| (1.0 - ts[i]) * eps.data()[i] + ts[i] * x.data()[i])
                .collect(),
        )?;
        let batch = FlowBatch { z_t, v: x.sub(&eps)?, ts };
        let mut g = Graph::new();
        let loss = fm_loss(&mut g, &batch, |g, z, ts| model.forward(g, &store, z, ts))?;
        trace.push(g.value(loss).data()[0]);
        let grads = g.backward(loss)?;
        store.zero_grads();
        store.accumulate(&grads)?;
        adam_step(&mut store, &mut adam, cosine_lr(step, cfg.train_steps, cfg.lr_max, cfg.lr_min))?;
    }
    Ok((model, store, trace))
}
