//! Adam with bias correction and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    step: u64,
    config: AdamConfig,
    names: Vec<String>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (name, m) in &self.m {
            io::save_tensor(&dir.join("m").join(format!("{name}.rten")), m)?;
            io::save_tensor(&dir.join("v").join(format!("{name}.rten")), &self.v[name])?;
        }
        let meta = AdamMeta {
            step: self.step,
            config: self.config,
            names: self.m.keys().cloned().collect(),
        };
        io::write_json(&dir.join("adam.json"), &meta)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: AdamMeta = io::read_json(&dir.join("adam.json"))?;
        let mut state = AdamState::new(meta.config);
        state.step = meta.step;
        for name in meta.names {
            let m = io::load_tensor(&dir.join("m").join(format!("{name}.rten")))?;
            let v = io::load_tensor(&dir.join("v").join(format!("{name}.rten")))?;
            state.m.insert(name.clone(), m);
            state.v.insert(name, v);
        }
        Ok(state)
    }
}

/// One Adam update of every parameter from its gradient slot.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.is_frozen() {
        return Err(Error::Invariant("optimizer step on a frozen parameter store".into()));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - cfg.beta1), T::from_f64_lossy(1.0 - cfg.beta2));
    let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    let eps = T::from_f64_lossy(cfg.eps);
    let lr = T::from_f64_lossy(lr);
    for (name, p, g) in params.pairs_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::dim(format!("adam moments for {name} do not match {:?}", p.shape())));
        }
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = b1 * md[i] + one_b1 * gv;
            vd[i] = b2 * vd[i] + one_b2 * gv * gv;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `step == total`.
/// Steps past `total` stay at `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}
