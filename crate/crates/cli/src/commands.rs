//! The batch commands. Each one resolves its inputs from the run directory,
//! writes its artifacts plus a manifest, and never records wall-clock data so
//! reruns produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recticast_core::backbone::{train_backbone, Backbone, BackboneConfig};
use recticast_core::cascade::{
    generator_config, rectifier_config, teacher_data, train_generator, train_rectifier, Cascade, FlowModel,
    ForecastMode, FrozenBackbone, GeneratorVariant, TeacherData,
};
use recticast_core::data::{derive_seed, Dataset, Split, WindowSample};
use recticast_core::io;
use recticast_core::metrics::{leadtime_curves, MetricReport};
use recticast_core::optim::AdamState;
use recticast_core::stunet::{STUNet, STUNetConfig};
use recticast_core::train::{load_checkpoint, save_checkpoint, write_trace_csv, StepRecord, TrainConfig};
use recticast_core::{Error as CoreError, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, OUT_ENV};
use crate::error::{CliError, CliResult};
use crate::manifest::{checkpoint_hash, hash_file};
use crate::plot;

/// Resolved configuration plus where artifacts go.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pub quiet: bool,
}

impl Context {
    /// Config file (or defaults), then `--seed`, then the output directory
    /// from `--out`, the environment, or the config, in that order.
    pub fn resolve(config_path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, force: bool) -> CliResult<Self> {
        let mut config = match config_path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        let out = out
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| config.output_dir.clone());
        config.output_dir = out.clone();
        config.validate()?;
        Ok(Context {
            config,
            out,
            force,
            quiet: false,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.out.join("checkpoints").join(stage.dir_name())
    }

    pub fn forecast_dir(&self, mode: ForecastMode) -> PathBuf {
        self.out.join("forecasts").join(mode.name())
    }

    pub fn eval_dir(&self, mode: ForecastMode) -> PathBuf {
        self.out.join("eval").join(mode.name())
    }

    pub fn plot_dir(&self) -> PathBuf {
        self.out.join("plots")
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// `run_config.json`: the resolved configuration and its hash.
    fn write_run_config(&self) -> CliResult<()> {
        #[derive(Serialize)]
        struct RunRecord<'a> {
            config_hash: String,
            config: &'a RunConfig,
        }
        let mut config = self.config.clone();
        config.output_dir = PathBuf::new();
        io::write_json(
            &self.out.join("run_config.json"),
            &RunRecord {
                config_hash: self.config.hash(),
                config: &config,
            },
        )?;
        Ok(())
    }

    fn load_dataset(&self) -> CliResult<Dataset> {
        let dir = self.data_dir();
        if !dir.join("manifest.json").exists() {
            return Err(CliError::Missing(format!(
                "no dataset at {}; run `synth` first",
                dir.display()
            )));
        }
        Ok(Dataset::load(&dir)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    Rectifier,
    Generator(GeneratorVariant),
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Rectifier => "rectifier",
            Stage::Generator(GeneratorVariant::Rectified) => "generator",
            Stage::Generator(GeneratorVariant::RawMean) => "generator_raw_mean",
            Stage::Generator(GeneratorVariant::Residual) => "generator_residual",
        }
    }

    /// Stream ids for parameter init and for training draws.
    fn streams(self) -> (u64, u64) {
        match self {
            Stage::Backbone => (1, 2),
            Stage::Rectifier => (3, 4),
            Stage::Generator(GeneratorVariant::Rectified) => (5, 6),
            Stage::Generator(GeneratorVariant::RawMean) => (7, 8),
            Stage::Generator(GeneratorVariant::Residual) => (9, 10),
        }
    }
}

/// Stored as the checkpoint config; a resume must match it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord<M> {
    pub model: M,
    pub train: TrainConfig,
    pub variant: Option<GeneratorVariant>,
}

/// `run.json` next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub steps: u64,
    pub completed_steps: u64,
    pub param_count: usize,
    pub dataset_manifest_sha256: String,
    pub train_windows: usize,
    pub backbone_checkpoint_sha256: Option<String>,
}

fn ensure_clear(dir: &Path, force: bool) -> CliResult<()> {
    let non_empty = dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .next()
            .is_some();
    if non_empty {
        if !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn cmd_synth(ctx: &Context) -> CliResult<PathBuf> {
    let dir = ctx.data_dir();
    ensure_clear(&dir, ctx.force)?;
    ctx.write_run_config()?;
    let data = Dataset::synthesize(&ctx.config.data, derive_seed(ctx.config.seed, 0))?;
    data.save(&dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        ctx.log(format!("{}: {} windows", split.name(), data.split(split).len()));
    }
    Ok(dir)
}

fn read_trace(path: &Path, upto: u64) -> CliResult<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse_err = || CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed trace row {line:?}"),
        };
        if f.len() != 3 {
            return Err(parse_err());
        }
        let rec = StepRecord {
            step: f[0].parse().map_err(|_| parse_err())?,
            loss: f[1].parse().map_err(|_| parse_err())?,
            lr: f[2].parse().map_err(|_| parse_err())?,
        };
        if rec.step < upto {
            out.push(rec);
        }
    }
    Ok(out)
}

struct Resumable {
    store: ParamStore<f32>,
    adam: AdamState<f32>,
    trace: Vec<StepRecord>,
}

/// Loads an unfinished checkpoint or initializes fresh parameters.
fn start_or_resume<M: Serialize + for<'de> Deserialize<'de> + PartialEq>(
    ctx: &Context,
    stage: Stage,
    record: &StageRecord<M>,
    init: impl FnOnce(&mut ParamStore<f32>, &mut ChaCha8Rng),
) -> CliResult<Option<Resumable>> {
    let dir = ctx.checkpoint_dir(stage);
    let (init_stream, _) = stage.streams();
    if ctx.force && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    if dir.join("manifest.json").exists() {
        let ck = load_checkpoint::<StageRecord<M>>(&dir, stage.dir_name())?;
        if ck.config != *record || ck.manifest.seed != ctx.config.seed {
            return Err(CliError::Config(format!(
                "checkpoint in {} was trained with different settings; pass --force to restart",
                dir.display()
            )));
        }
        let adam = ck.adam.ok_or_else(|| {
            CliError::Missing(format!("checkpoint in {} has no optimizer state to resume from", dir.display()))
        })?;
        if adam.step >= record.train.steps {
            ctx.log(format!("{} already trained for {} steps", stage.dir_name(), adam.step));
            return Ok(None);
        }
        ctx.log(format!("resuming {} at step {}", stage.dir_name(), adam.step));
        let trace = read_trace(&dir.join("trace.csv"), adam.step)?;
        return Ok(Some(Resumable {
            store: ck.store,
            adam,
            trace,
        }));
    }
    let mut store = ParamStore::new();
    init(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(ctx.config.seed, init_stream)));
    Ok(Some(Resumable {
        store,
        adam: AdamState::new(record.train.adam),
        trace: Vec::new(),
    }))
}

/// Runs `train` in chunks of `checkpoint_every` steps, saving after each one
/// and after a numeric failure (with the last good parameters).
fn train_in_chunks<M: Serialize>(
    ctx: &Context,
    stage: Stage,
    record: &StageRecord<M>,
    mut state: Resumable,
    manifest: TrainManifest,
    pause_at: Option<u64>,
    mut train: impl FnMut(&mut ParamStore<f32>, &mut AdamState<f32>, &TrainConfig, &mut dyn FnMut(&StepRecord)) -> Result<Vec<StepRecord>, CoreError>,
) -> CliResult<PathBuf> {
    let dir = ctx.checkpoint_dir(stage);
    let total = record.train.steps;
    let stop = pause_at.map_or(total, |p| p.min(total));
    let every = ctx.config.train.checkpoint_every;
    let save = |state: &Resumable| -> CliResult<()> {
        save_checkpoint(&dir, stage.dir_name(), record, ctx.config.seed, &state.store, Some(&state.adam))?;
        write_trace_csv(&dir.join("trace.csv"), &state.trace)?;
        let m = TrainManifest {
            completed_steps: state.adam.step,
            param_count: state.store.num_scalars(),
            ..manifest.clone()
        };
        io::write_json(&dir.join("run.json"), &m)?;
        Ok(())
    };
    save(&state)?;
    while state.adam.step < stop {
        let mut cfg = record.train.clone();
        cfg.stop_at = Some((state.adam.step + every).min(stop));
        let mut log_step = |r: &StepRecord| {
            if !ctx.quiet && (r.step % 100 == 0 || r.step + 1 == total) {
                eprintln!("{} step {} loss {:.5} lr {:.2e}", stage.dir_name(), r.step, r.loss, r.lr);
            }
        };
        let result = train(&mut state.store, &mut state.adam, &cfg, &mut log_step);
        match result {
            Ok(trace) => state.trace.extend(trace),
            Err(e) => {
                save(&state)?;
                return Err(e.into());
            }
        }
        save(&state)?;
    }
    Ok(dir)
}

fn dataset_hash(ctx: &Context) -> CliResult<String> {
    hash_file(&ctx.data_dir().join("manifest.json"))
}

fn load_frozen_backbone(ctx: &Context) -> CliResult<(FrozenBackbone, String)> {
    let dir = ctx.checkpoint_dir(Stage::Backbone);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Missing(format!(
            "stage 1 required: no backbone checkpoint at {}; run `train --stage backbone` first",
            dir.display()
        )));
    }
    let ck = load_checkpoint::<StageRecord<BackboneConfig>>(&dir, Stage::Backbone.dir_name())?;
    if ck.manifest.step < ck.config.train.steps {
        return Err(CliError::Missing(format!(
            "stage 1 required: the backbone checkpoint has {} of {} steps; finish `train --stage backbone` first",
            ck.manifest.step, ck.config.train.steps
        )));
    }
    if ck.config.model != ctx.config.backbone_config() {
        return Err(CliError::Config(
            "backbone checkpoint does not match the configured architecture".into(),
        ));
    }
    let net = Backbone::new(ck.config.model)?;
    let hash = checkpoint_hash(&dir)?;
    Ok((FrozenBackbone::new(net, ck.store), hash))
}

/// Trains `stage` up to its configured length, or only up to step `pause_at`
/// so that a later call resumes from the checkpoint.
pub fn cmd_train(ctx: &Context, stage: Stage, steps: Option<u64>, pause_at: Option<u64>) -> CliResult<PathBuf> {
    let data = ctx.load_dataset()?;
    ctx.write_run_config()?;
    let cfg = &ctx.config;
    let mut train_cfg = match stage {
        Stage::Backbone => cfg.train.backbone.clone(),
        Stage::Rectifier => cfg.train.rectifier.clone(),
        Stage::Generator(_) => cfg.train.generator.clone(),
    };
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    let (init_stream, train_stream) = stage.streams();
    let train_seed = derive_seed(cfg.seed, train_stream);
    let train_set: Vec<WindowSample> = data.split_samples(Split::Train);
    let mut manifest = TrainManifest {
        stage: stage.dir_name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        init_seed: derive_seed(cfg.seed, init_stream),
        train_seed,
        steps: train_cfg.steps,
        completed_steps: 0,
        param_count: 0,
        dataset_manifest_sha256: dataset_hash(ctx)?,
        train_windows: train_set.len(),
        backbone_checkpoint_sha256: None,
    };
    match stage {
        Stage::Backbone => {
            let net = Backbone::new(cfg.backbone_config())?;
            let record = StageRecord {
                model: cfg.backbone_config(),
                train: train_cfg,
                variant: None,
            };
            let Some(state) = start_or_resume(ctx, stage, &record, |s, r| net.init(s, r))? else {
                return Ok(ctx.checkpoint_dir(stage));
            };
            train_in_chunks(ctx, stage, &record, state, manifest, pause_at, |store, adam, tc, on_step| {
                train_backbone(&net, store, adam, &train_set, tc, train_seed, on_step)
            })
        }
        Stage::Rectifier | Stage::Generator(_) => {
            let (backbone, bb_hash) = load_frozen_backbone(ctx)?;
            manifest.backbone_checkpoint_sha256 = Some(bb_hash);
            let schedule = cfg.schedule()?;
            let (net_cfg, variant) = match stage {
                Stage::Rectifier => (rectifier_config(&cfg.flow_base(), &schedule), None),
                Stage::Generator(v) => (generator_config(&cfg.flow_base(), &schedule), Some(v)),
                Stage::Backbone => unreachable!(),
            };
            let net = STUNet::new(stage.dir_name(), net_cfg.clone())?;
            let record = StageRecord {
                model: net_cfg,
                train: train_cfg,
                variant,
            };
            let Some(state) = start_or_resume(ctx, stage, &record, |s, r| net.init(s, r))? else {
                return Ok(ctx.checkpoint_dir(stage));
            };
            ctx.log(format!("teacher forcing targets for {} windows", train_set.len()));
            let teacher: Vec<TeacherData> = teacher_data(&backbone, &schedule, &train_set)?;
            let bstore = &backbone.store;
            train_in_chunks(ctx, stage, &record, state, manifest, pause_at, |store, adam, tc, on_step| match variant {
                None => train_rectifier(&net, store, adam, bstore, &teacher, tc, train_seed, |_| {}, on_step),
                Some(v) => train_generator(&net, v, store, adam, bstore, &teacher, tc, train_seed, |_| {}, on_step),
            })
        }
    }
}

/// Loads a finished flow checkpoint, checking it against the configured architecture.
fn load_flow(ctx: &Context, stage: Stage, expect: &STUNetConfig) -> CliResult<(FlowModel, String)> {
    let dir = ctx.checkpoint_dir(stage);
    let name = stage.dir_name();
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Missing(format!(
            "{name} checkpoint not found at {}; run `train --stage {}` first",
            dir.display(),
            match stage {
                Stage::Rectifier => "rectifier".to_string(),
                Stage::Generator(v) => format!("generator --variant {}", variant_name(v)),
                Stage::Backbone => "backbone".to_string(),
            }
        )));
    }
    let ck = load_checkpoint::<StageRecord<STUNetConfig>>(&dir, name).map_err(|e| match e {
        CoreError::Load { path, msg, .. } => CliError::Core(CoreError::Load {
            what: format!("{name} checkpoint"),
            path,
            msg,
        }),
        other => other.into(),
    })?;
    if ck.manifest.step < ck.config.train.steps {
        return Err(CliError::Missing(format!(
            "{name} checkpoint has {} of {} steps; finish its training first",
            ck.manifest.step, ck.config.train.steps
        )));
    }
    if ck.config.model != *expect {
        return Err(CliError::Config(format!(
            "{name} checkpoint does not match the configured architecture"
        )));
    }
    let net = STUNet::new(name, ck.config.model)?;
    Ok((FlowModel { net, store: ck.store }, checkpoint_hash(&dir)?))
}

pub fn variant_name(v: GeneratorVariant) -> &'static str {
    match v {
        GeneratorVariant::Rectified => "rectified",
        GeneratorVariant::RawMean => "raw_mean",
        GeneratorVariant::Residual => "residual",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    pub id: String,
    pub file: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastManifest {
    pub mode: ForecastMode,
    pub split: Split,
    pub nfe: usize,
    pub steps_rect: usize,
    pub steps_gen: usize,
    pub count_first_rect_segment: bool,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_manifest_sha256: String,
    pub checkpoints: BTreeMap<String, String>,
    pub samples: Vec<ForecastEntry>,
}

/// Stream for per-window forecast seeds.
const FORECAST_STREAM: u64 = 0xF0;

pub fn cmd_forecast(ctx: &Context, mode: ForecastMode, split: Split, limit: Option<usize>) -> CliResult<PathBuf> {
    let cfg = &ctx.config;
    let data = ctx.load_dataset()?;
    let (backbone, bb_hash) = load_frozen_backbone(ctx)?;
    let schedule = cfg.schedule()?;
    let mut checkpoints = BTreeMap::from([("backbone".to_string(), bb_hash)]);
    let rect = if mode.uses_rectifier() {
        let (m, h) = load_flow(ctx, Stage::Rectifier, &rectifier_config(&cfg.flow_base(), &schedule))?;
        checkpoints.insert("rectifier".into(), h);
        Some(m)
    } else {
        None
    };
    let gen = match mode.generator_variant() {
        Some(v) => {
            let stage = Stage::Generator(v);
            let (m, h) = load_flow(ctx, stage, &generator_config(&cfg.flow_base(), &schedule))?;
            checkpoints.insert(stage.dir_name().into(), h);
            Some((m, v))
        }
        None => None,
    };
    let dir = ctx.forecast_dir(mode);
    ensure_clear(&dir, ctx.force)?;
    ctx.write_run_config()?;

    let cascade = Cascade {
        backbone: &backbone,
        rectifier: rect.as_ref().map(|m| m as _),
        generator: gen.as_ref().map(|(m, v)| (m as _, *v)),
        schedule,
        sampling: cfg.sampling(),
    };
    let windows = data.split(split);
    let take = limit.or(cfg.eval.limit).unwrap_or(windows.len()).min(windows.len());
    let windows = &windows[..take];
    if windows.is_empty() {
        return Err(CliError::Missing(format!("the {} split has no windows", split.name())));
    }
    let base = derive_seed(cfg.seed, FORECAST_STREAM);
    let mut samples = Vec::with_capacity(windows.len());
    for (b, chunk) in windows.chunks(cfg.eval.batch).enumerate() {
        let inputs: Vec<&Tensor<f32>> = chunk.iter().map(|(_, w)| &w.input).collect();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|j| derive_seed(base, (b * cfg.eval.batch + j) as u64))
            .collect();
        let states = cascade.forecast_batch(mode, &inputs, &seeds)?;
        for (((id, _), st), seed) in chunk.iter().zip(states).zip(seeds) {
            let y = cascade.assemble(&st)?;
            let file = format!("{id}.rten");
            io::save_tensor(&dir.join(&file), &y)?;
            samples.push(ForecastEntry { id: id.clone(), file, seed });
        }
        ctx.log(format!("{}: {}/{} forecasts", mode.name(), samples.len(), windows.len()));
    }
    let manifest = ForecastManifest {
        mode,
        split,
        nfe: mode.nfe(&schedule, cfg.sampling.steps_rect, cfg.sampling.steps_gen, cfg.sampling.count_first_rect_segment),
        steps_rect: cfg.sampling.steps_rect,
        steps_gen: cfg.sampling.steps_gen,
        count_first_rect_segment: cfg.sampling.count_first_rect_segment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dataset_manifest_sha256: dataset_hash(ctx)?,
        checkpoints,
        samples,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    ctx.log(format!("{}: NFE per forecast {}", mode.name(), manifest.nfe));
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: ForecastMode,
    pub split: Split,
    pub nfe: usize,
    pub forecast_manifest_sha256: String,
    pub dataset_manifest_sha256: String,
    pub report: MetricReport,
}

/// Scores the forecasts in `forecasts` against the matching windows of the
/// dataset in `truth`. Writes `report.json` and `leadtime.csv` to `out`,
/// by default `eval/<mode>` of the run directory.
pub fn cmd_evaluate(ctx: &Context, forecasts: &Path, truth: &Path, out: Option<&Path>) -> CliResult<EvalRecord> {
    let mpath = forecasts.join("manifest.json");
    if !mpath.exists() {
        return Err(CliError::Missing(format!("no forecasts found in {}", forecasts.display())));
    }
    let manifest: ForecastManifest = io::read_json(&mpath)?;
    if manifest.samples.is_empty() {
        return Err(CliError::Missing(format!("forecast set in {} is empty", forecasts.display())));
    }
    if !truth.join("manifest.json").exists() {
        return Err(CliError::Missing(format!("no dataset at {}", truth.display())));
    }
    let data = Dataset::load(truth)?;
    let by_id: BTreeMap<&str, &WindowSample> = data.split(manifest.split).iter().map(|(id, w)| (id.as_str(), w)).collect();
    let missing: Vec<&str> = manifest
        .samples
        .iter()
        .filter(|e| !by_id.contains_key(e.id.as_str()))
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Missing(format!(
            "{} forecasts have no matching {} window: {}",
            missing.len(),
            manifest.split.name(),
            missing.join(", ")
        )));
    }
    let mut preds = Vec::with_capacity(manifest.samples.len());
    let mut truths = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let y: Tensor<f32> = io::load_tensor(&forecasts.join(&e.file))?;
        let t = &by_id[e.id.as_str()].target;
        if y.shape() != t.shape() {
            return Err(CliError::Core(CoreError::dim(format!(
                "forecast {} has shape {:?}, observation {:?}",
                e.id,
                y.shape(),
                t.shape()
            ))));
        }
        preds.push(y);
        truths.push(t.clone());
    }
    let report = leadtime_curves(&preds, &truths, &ctx.config.eval.thresholds)?;
    let out = out.map_or_else(|| ctx.eval_dir(manifest.mode), Path::to_path_buf);
    let record = EvalRecord {
        mode: manifest.mode,
        split: manifest.split,
        nfe: manifest.nfe,
        forecast_manifest_sha256: hash_file(&mpath)?,
        dataset_manifest_sha256: hash_file(&truth.join("manifest.json"))?,
        report,
    };
    io::write_json(&out.join("report.json"), &record)?;
    record.report.write_csv(&out.join("leadtime.csv"))?;
    let r = &record.report;
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    ctx.log(format!(
        "{}: CSI {} CSI4 {} CSI16 {} HSS {} SSIM {} MSE {:.5}",
        manifest.mode.name(),
        f(r.csi),
        f(r.csi4),
        f(r.csi16),
        f(r.hss),
        f(r.ssim),
        r.mse
    ));
    Ok(record)
}

/// Writes one SVG per metric. Without explicit reports, every
/// `eval/*/leadtime.csv` under the run directory is used.
pub fn cmd_plot(ctx: &Context, reports: &[PathBuf], labels: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut reports = reports.to_vec();
    if reports.is_empty() {
        let eval = ctx.out.join("eval");
        if eval.exists() {
            let mut found: Vec<PathBuf> = fs::read_dir(&eval)
                .map_err(|e| CliError::io(&eval, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path().join("leadtime.csv"))
                .filter(|p| p.exists())
                .collect();
            found.sort();
            reports = found;
        }
    }
    if reports.is_empty() {
        return Err(CliError::Missing("no lead-time reports to plot; run `evaluate` first".into()));
    }
    if !labels.is_empty() && labels.len() != reports.len() {
        return Err(CliError::Config(format!(
            "{} labels given for {} reports",
            labels.len(),
            reports.len()
        )));
    }
    let mut series = Vec::new();
    for (i, path) in reports.iter().enumerate() {
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("report{}", i + 1))
        });
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        series.push((label, plot::parse_leadtime_csv(path, &text)?));
    }
    let dir = ctx.plot_dir();
    let mut written = Vec::new();
    for metric in plot::METRICS {
        let svg = plot::render_svg(metric, &series);
        let path = dir.join(format!("{metric}.svg"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
