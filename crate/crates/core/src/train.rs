//! Shared optimizer loop and on-disk checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::io;
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimizer steps; the cosine schedule spans exactly this many.
    pub steps: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    /// Runtime-only early stop for checkpointing in chunks; the schedule still spans `steps`.
    #[serde(skip)]
    pub stop_at: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 8,
            lr_max: 1e-4,
            lr_min: 1e-7,
            adam: AdamConfig::default(),
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_max >= lr_min >= 0 (got {} and {})",
                self.lr_max, self.lr_min
            )));
        }
        Ok(())
    }

    /// Step at which the current call stops.
    pub fn end_step(&self) -> u64 {
        self.stop_at.map_or(self.steps, |s| s.min(self.steps))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Random stream for one optimizer step. Depends only on `(seed, step)` so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, step))
}

/// Runs optimizer steps `adam.step .. cfg.end_step()`. `loss_fn` builds one batch
/// loss. On a non-finite loss or gradient the parameters are left at their
/// last good values and a numeric error is returned.
pub fn run_training<F, O>(
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    cfg: &TrainConfig,
    seed: u64,
    mut loss_fn: F,
    mut on_step: O,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(&mut Graph<f32>, &ParamStore<f32>, &mut ChaCha8Rng) -> Result<Var>,
    O: FnMut(&StepRecord),
{
    cfg.validate()?;
    let mut trace = Vec::new();
    while adam.step < cfg.end_step() {
        let step = adam.step;
        let mut rng = step_rng(seed, step);
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store, &mut rng)?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            other => other,
        })?;
        store.zero_grads();
        store.accumulate(&grads)?;
        if let Some((name, _)) = store.grads().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!("step {step}: non-finite gradient for {name}")));
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        adam_step(store, adam, lr)?;
        let rec = StepRecord { step, loss: value, lr };
        on_step(&rec);
        trace.push(rec);
    }
    Ok(trace)
}

pub fn write_trace_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut text = String::from("step,loss,lr\n");
    for r in trace {
        text.push_str(&format!("{},{:e},{:e}\n", r.step, r.loss, r.lr));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    pub param_count: usize,
    pub names: Vec<String>,
}

/// `dir/manifest.json`, `dir/params/*.rten`, and optionally the optimizer
/// state under `dir/optim/`.
pub fn save_checkpoint<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    seed: u64,
    store: &ParamStore<f32>,
    adam: Option<&AdamState<f32>>,
) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(|e| Error::json(dir, e))?,
        step: adam.map_or(0, |a| a.step),
        seed,
        param_count: store.num_scalars(),
        names: store.names().map(String::from).collect(),
    };
    store.save_dir(&dir.join("params"))?;
    if let Some(a) = adam {
        a.save_dir(&dir.join("optim"))?;
    }
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub struct Checkpoint<C> {
    pub manifest: CheckpointManifest,
    pub config: C,
    pub store: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<Checkpoint<C>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Load {
            what: format!("{kind} checkpoint"),
            path,
            msg: "manifest.json not found".into(),
        });
    }
    let manifest: CheckpointManifest = io::read_json(&path)?;
    if manifest.kind != kind {
        return Err(Error::Load {
            what: format!("{kind} checkpoint"),
            path,
            msg: format!("checkpoint holds a {:?} model", manifest.kind),
        });
    }
    let config: C = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(&path, e))?;
    let store = ParamStore::load_dir(&dir.join("params"), manifest.names.iter().map(String::as_str))?;
    let optim = dir.join("optim");
    let adam = if optim.join("adam.json").exists() {
        Some(AdamState::load_dir(&optim)?)
    } else {
        None
    };
    Ok(Checkpoint {
        manifest,
        config,
        store,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(g: &mut Graph<f32>, s: &ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Var> {
        let w = g.param(s, "w")?;
        let target = g.input(Tensor::randn([3], rng));
        g.mse(w, target)
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let cfg = TrainConfig {
            steps: 20,
            lr_max: 1e-2,
            ..TrainConfig::default()
        };
        let mut fresh = ParamStore::new();
        fresh.insert("w", Tensor::<f32>::ones([3]));

        let mut a = fresh.clone();
        let mut adam_a = AdamState::new(cfg.adam);
        let full = run_training(&mut a, &mut adam_a, &cfg, 5, quadratic, |_| {}).unwrap();
        assert_eq!(full.len(), 20);

        let mut b = fresh.clone();
        let mut adam_b = AdamState::new(cfg.adam);
        let mut count = 0;
        let err = run_training(&mut b, &mut adam_b, &cfg, 5, |g, s, r| {
            count += 1;
            if count > 8 {
                return Err(Error::Invariant("interrupted".into()));
            }
            quadratic(g, s, r)
        }, |_| {});
        assert!(err.is_err());
        assert_eq!(adam_b.step, 8);

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "quad", &cfg, 5, &b, Some(&adam_b)).unwrap();
        let ck: Checkpoint<TrainConfig> = load_checkpoint(dir.path(), "quad").unwrap();
        assert_eq!(ck.manifest.step, 8);
        let mut b = ck.store;
        let mut adam_b = ck.adam.unwrap();
        let rest = run_training(&mut b, &mut adam_b, &ck.config, 5, quadratic, |_| {}).unwrap();
        assert_eq!(rest.first().unwrap().step, 8);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn wrong_kind_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("w", Tensor::<f32>::ones([1]));
        save_checkpoint(dir.path(), "a", &0u8, 0, &s, None).unwrap();
        assert!(matches!(load_checkpoint::<u8>(dir.path(), "b"), Err(Error::Load { .. })));
        assert!(matches!(load_checkpoint::<u8>(&dir.path().join("nope"), "a"), Err(Error::Load { .. })));
    }

    #[test]
    fn non_finite_loss_keeps_last_good_parameters() {
        let cfg = TrainConfig { steps: 5, ..TrainConfig::default() };
        let mut s = ParamStore::new();
        s.insert("w", Tensor::<f32>::ones([3]));
        let mut adam = AdamState::new(cfg.adam);
        let mut snapshot = None;
        let err = run_training(&mut s, &mut adam, &cfg, 0, |g, st, r| {
            if snapshot.is_none() {
                snapshot = Some(st.clone());
                return quadratic(g, st, r);
            }
            let w = g.param(st, "w")?;
            let bad = g.scale(w, f32::NAN);
            Ok(g.mean(bad))
        }, |_| {})
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(adam.step, 1);
        assert!(!s.bit_eq(snapshot.as_ref().unwrap()));
        assert!(s.get("w").unwrap().all_finite());
    }
}
