//! The Rectifier/Generator cascade on top of a frozen backbone.
//!
//! The forecast horizon is cut into segments of `m = L_in` frames. The
//! Rectifier maps each raw mean segment `μ_raw_i` (i ≥ 2) to a rectified mean
//! `μ_rec_i`, autoregressively conditioned on `μ_rec_{i-1}`; the Generator then
//! samples each forecast segment conditioned on the previous forecast segment
//! and the rectified mean.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{derive_seed, WindowSample};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, fm_loss, FlowBatch, FlowSample};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::stunet::{CondBatch, ConditionBundle, STUNet, STUNetConfig};
use crate::tensor::Tensor;
use crate::train::{run_training, StepRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSchedule {
    pub m: usize,
    pub l_out: usize,
}

impl SegmentSchedule {
    pub fn new(m: usize, l_out: usize) -> Result<Self> {
        if m == 0 || l_out == 0 {
            return Err(Error::Config("segment length and horizon must be positive".into()));
        }
        Ok(SegmentSchedule { m, l_out })
    }

    pub fn n_segments(&self) -> usize {
        self.l_out.div_ceil(self.m)
    }

    /// Segments that fit entirely inside the horizon (used for training).
    pub fn n_full_segments(&self) -> usize {
        self.l_out / self.m
    }

    /// Frame range of 1-based segment `i`, truncated to the horizon.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let start = (i - 1) * self.m;
        start..(i * self.m).min(self.l_out)
    }

    /// Full-length frame range of segment `i`; may run past the horizon.
    pub fn full_range(&self, i: usize) -> std::ops::Range<usize> {
        (i - 1) * self.m..i * self.m
    }
}

/// Flow-model evaluations for one forecast.
pub fn nfe_count(schedule: &SegmentSchedule, steps_rect: usize, steps_gen: usize, count_first_rect_segment: bool) -> usize {
    let n = schedule.n_segments();
    steps_gen * n + steps_rect * (n - 1 + usize::from(count_first_rect_segment))
}

/// Deterministic mean predictor seen by the cascade.
pub trait MeanModel {
    fn l_in(&self) -> usize;
    fn l_out(&self) -> usize;
    /// Clamped full-horizon predictions, one per input.
    fn predict_batch(&self, inputs: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>>;

    /// `D(s)_1`: the first `m = L_in` predicted frames from a segment.
    fn segment_heads(&self, segs: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let m = self.l_in();
        if let Some(s) = segs.iter().find(|s| s.dim(0) != m) {
            return Err(Error::Config(format!(
                "segment of {} frames cannot drive a backbone with {m} input frames",
                s.dim(0)
            )));
        }
        self.predict_batch(segs)?.into_iter().map(|y| y.slice_rows(0, m)).collect()
    }
}

/// A trained backbone with frozen parameters.
pub struct FrozenBackbone {
    pub net: Backbone,
    pub store: ParamStore<f32>,
}

impl FrozenBackbone {
    pub fn new(net: Backbone, mut store: ParamStore<f32>) -> Self {
        store.freeze();
        FrozenBackbone { net, store }
    }
}

impl MeanModel for FrozenBackbone {
    fn l_in(&self) -> usize {
        self.net.config.l_in
    }

    fn l_out(&self) -> usize {
        self.net.config.l_out
    }

    fn predict_batch(&self, inputs: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.net.predict_batch(&self.store, inputs)
    }
}

/// A velocity field over stacked segments: `z: [B*m, 1, H, W]`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor<f32>, ts: &[f64], cond: &CondBatch<f32>) -> Result<Tensor<f32>>;
}

pub struct FlowModel {
    pub net: STUNet,
    pub store: ParamStore<f32>,
}

impl VelocityField for FlowModel {
    fn velocity(&self, z: &Tensor<f32>, ts: &[f64], cond: &CondBatch<f32>) -> Result<Tensor<f32>> {
        self.net.velocity(&self.store, z, ts, cond)
    }
}

/// What the Generator was trained to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorVariant {
    /// Conditioned on the rectified mean.
    Rectified,
    /// Conditioned on the raw mean, learning `y` directly.
    RawMean,
    /// Conditioned on the raw mean, learning the residual `y - μ_raw`.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    Full,
    BackboneOnly,
    NoRectifierY,
    NoRectifierResidual,
    NoGenerator,
}

impl ForecastMode {
    pub const ALL: [ForecastMode; 5] = [
        ForecastMode::Full,
        ForecastMode::BackboneOnly,
        ForecastMode::NoRectifierY,
        ForecastMode::NoRectifierResidual,
        ForecastMode::NoGenerator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForecastMode::Full => "full",
            ForecastMode::BackboneOnly => "backbone_only",
            ForecastMode::NoRectifierY => "no_rectifier_y",
            ForecastMode::NoRectifierResidual => "no_rectifier_residual",
            ForecastMode::NoGenerator => "no_generator",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown forecast mode {s:?}")))
    }

    pub fn uses_rectifier(self) -> bool {
        matches!(self, ForecastMode::Full | ForecastMode::NoGenerator)
    }

    /// Generator variant this mode needs, if any.
    pub fn generator_variant(self) -> Option<GeneratorVariant> {
        match self {
            ForecastMode::Full => Some(GeneratorVariant::Rectified),
            ForecastMode::NoRectifierY => Some(GeneratorVariant::RawMean),
            ForecastMode::NoRectifierResidual => Some(GeneratorVariant::Residual),
            ForecastMode::BackboneOnly | ForecastMode::NoGenerator => None,
        }
    }

    pub fn nfe(self, schedule: &SegmentSchedule, steps_rect: usize, steps_gen: usize, count_first: bool) -> usize {
        let n = schedule.n_segments();
        let rect = steps_rect * (n - 1 + usize::from(count_first));
        match self {
            ForecastMode::Full => nfe_count(schedule, steps_rect, steps_gen, count_first),
            ForecastMode::BackboneOnly => 0,
            ForecastMode::NoRectifierY | ForecastMode::NoRectifierResidual => steps_gen * n,
            ForecastMode::NoGenerator => rect,
        }
    }
}

/// Backbone outputs needed for teacher forcing on one window, all `[m, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct TeacherData {
    /// Last `m` input frames (`s_0` as a generator condition).
    pub input_tail: Tensor<f32>,
    /// Ground-truth segments `s_1 .. s_n` (full segments only).
    pub segments: Vec<Tensor<f32>>,
    /// `μ_raw_1 .. μ_raw_n`.
    pub mu_raw: Vec<Tensor<f32>>,
    /// `heads[j] = D(s_j)_1` for `j = 0 .. n-1`, with `s_0` the input window,
    /// so `heads[0] = μ_raw_1`.
    pub heads: Vec<Tensor<f32>>,
}

impl TeacherData {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Rectified-mean target for segment `i ≥ 2`: `D(s_{i-1})_1`.
    pub fn rectifier_target(&self, i: usize) -> Option<&Tensor<f32>> {
        (i >= 2 && i <= self.n_segments()).then(|| &self.heads[i - 1])
    }
}

fn check_schedule<M: MeanModel + ?Sized>(backbone: &M, schedule: &SegmentSchedule) -> Result<()> {
    if schedule.m != backbone.l_in() {
        return Err(Error::Config(format!(
            "segment length {} must equal the backbone input length {}",
            schedule.m,
            backbone.l_in()
        )));
    }
    if schedule.l_out != backbone.l_out() {
        return Err(Error::Config(format!(
            "horizon {} does not match the backbone output length {}",
            schedule.l_out,
            backbone.l_out()
        )));
    }
    Ok(())
}

/// Runs the backbone over the input and every ground-truth segment of each window.
pub fn teacher_data<M: MeanModel + ?Sized>(
    backbone: &M,
    schedule: &SegmentSchedule,
    samples: &[WindowSample],
) -> Result<Vec<TeacherData>> {
    check_schedule(backbone, schedule)?;
    let m = schedule.m;
    let n = schedule.n_full_segments();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let inputs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.input).collect();
        let raws = backbone.predict_batch(&inputs)?;
        let mut segs_all = Vec::with_capacity(chunk.len());
        for s in chunk {
            let segs = (1..=n)
                .map(|i| s.target.slice_rows(schedule.full_range(i).start, schedule.full_range(i).end))
                .collect::<Result<Vec<_>>>()?;
            segs_all.push(segs);
        }
        let head_inputs: Vec<&Tensor<f32>> = segs_all
            .iter()
            .flat_map(|segs| segs[..n.saturating_sub(1)].iter())
            .collect();
        let mut heads_flat = backbone.segment_heads(&head_inputs)?.into_iter();
        for ((s, raw), segs) in chunk.iter().zip(raws).zip(segs_all) {
            let mu_raw = (1..=n)
                .map(|i| raw.slice_rows(schedule.full_range(i).start, schedule.full_range(i).end))
                .collect::<Result<Vec<_>>>()?;
            let mut heads = vec![mu_raw[0].clone()];
            heads.extend(heads_flat.by_ref().take(n.saturating_sub(1)));
            let t = s.input.dim(0);
            out.push(TeacherData {
                input_tail: s.input.slice_rows(t - m, t)?,
                segments: segs,
                mu_raw,
                heads,
            });
        }
    }
    Ok(out)
}

/// Rectifier targets `D(s_{i-1})_1` for segments `i = 2 .. n` of one window.
pub fn rectifier_targets<M: MeanModel + ?Sized>(
    sample: &WindowSample,
    backbone: &M,
    schedule: &SegmentSchedule,
) -> Result<Vec<Tensor<f32>>> {
    let td = teacher_data(backbone, schedule, std::slice::from_ref(sample))?.remove(0);
    Ok((2..=td.n_segments()).map(|i| td.heads[i - 1].clone()).collect())
}

/// One teacher-forced training example: the flow target and its conditions.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub window: usize,
    pub segment: usize,
    pub target: Tensor<f32>,
    pub cond: ConditionBundle,
}

pub fn rectifier_example(td: &TeacherData, window: usize, i: usize) -> Result<FlowExample> {
    let target = td
        .rectifier_target(i)
        .ok_or_else(|| Error::Config(format!("segment {i} has no rectification target")))?;
    Ok(FlowExample {
        window,
        segment: i,
        target: target.clone(),
        cond: ConditionBundle {
            backbone_cond: td.mu_raw[i - 1].clone(),
            side_cond: td.heads[i - 2].clone(),
            segment_index: Some(i),
        },
    })
}

pub fn generator_example(td: &TeacherData, window: usize, i: usize, variant: GeneratorVariant) -> Result<FlowExample> {
    if i == 0 || i > td.n_segments() {
        return Err(Error::Config(format!("segment {i} out of range 1..={}", td.n_segments())));
    }
    let prev = if i == 1 { &td.input_tail } else { &td.segments[i - 2] };
    let y = &td.segments[i - 1];
    let raw = &td.mu_raw[i - 1];
    let (target, side) = match variant {
        GeneratorVariant::Rectified => (y.clone(), td.heads[i - 1].clone()),
        GeneratorVariant::RawMean => (y.clone(), raw.clone()),
        GeneratorVariant::Residual => (y.sub(raw)?, raw.clone()),
    };
    Ok(FlowExample {
        window,
        segment: i,
        target,
        cond: ConditionBundle {
            backbone_cond: prev.clone(),
            side_cond: side,
            segment_index: None,
        },
    })
}

fn flow_loss_for(
    net: &STUNet,
    g: &mut crate::autodiff::Graph<f32>,
    store: &ParamStore<f32>,
    examples: &[FlowExample],
    rng: &mut ChaCha8Rng,
) -> Result<crate::autodiff::Var> {
    let samples = examples
        .iter()
        .map(|e| FlowSample::draw(e.target.clone(), rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = FlowBatch::from_samples(&samples)?;
    let conds: Vec<&ConditionBundle> = examples.iter().map(|e| &e.cond).collect();
    let cond = CondBatch::stack(&conds)?;
    fm_loss(g, &batch, |g, z, ts| net.forward(g, store, z, ts, &cond))
}

fn require_frozen(store: &ParamStore<f32>) -> Result<()> {
    if !store.is_frozen() {
        return Err(Error::Invariant(
            "stage-2 training requires a frozen backbone parameter store".into(),
        ));
    }
    Ok(())
}

/// Trains the Rectifier on teacher-forced segments `i ≥ 2`. `observe` sees
/// every example drawn into a batch.
#[allow(clippy::too_many_arguments)]
pub fn train_rectifier<O, E>(
    net: &STUNet,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    backbone_store: &ParamStore<f32>,
    teacher: &[TeacherData],
    cfg: &TrainConfig,
    seed: u64,
    mut observe: E,
    on_step: O,
) -> Result<Vec<StepRecord>>
where
    O: FnMut(&StepRecord),
    E: FnMut(&FlowExample),
{
    require_frozen(backbone_store)?;
    if net.config.segment_vocab.is_none() {
        return Err(Error::Config("the rectifier network needs a segment-index table".into()));
    }
    let pairs: Vec<(usize, usize)> = teacher
        .iter()
        .enumerate()
        .flat_map(|(w, td)| (2..=td.n_segments()).map(move |i| (w, i)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Precondition("no segments with a rectification target".into()));
    }
    run_training(
        store,
        adam,
        cfg,
        seed,
        |g, st, rng| {
            let examples = (0..cfg.batch)
                .map(|_| {
                    let (w, i) = pairs[rng.gen_range(0..pairs.len())];
                    rectifier_example(&teacher[w], w, i)
                })
                .collect::<Result<Vec<_>>>()?;
            examples.iter().for_each(&mut observe);
            flow_loss_for(net, g, st, &examples, rng)
        },
        on_step,
    )
}

/// Trains a Generator (of the given variant) on teacher-forced segments `i ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn train_generator<O, E>(
    net: &STUNet,
    variant: GeneratorVariant,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    backbone_store: &ParamStore<f32>,
    teacher: &[TeacherData],
    cfg: &TrainConfig,
    seed: u64,
    mut observe: E,
    on_step: O,
) -> Result<Vec<StepRecord>>
where
    O: FnMut(&StepRecord),
    E: FnMut(&FlowExample),
{
    require_frozen(backbone_store)?;
    if net.config.segment_vocab.is_some() {
        return Err(Error::Config("the generator takes no segment index".into()));
    }
    let pairs: Vec<(usize, usize)> = teacher
        .iter()
        .enumerate()
        .flat_map(|(w, td)| (1..=td.n_segments()).map(move |i| (w, i)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Precondition("generator training split is empty".into()));
    }
    run_training(
        store,
        adam,
        cfg,
        seed,
        |g, st, rng| {
            let examples = (0..cfg.batch)
                .map(|_| {
                    let (w, i) = pairs[rng.gen_range(0..pairs.len())];
                    generator_example(&teacher[w], w, i, variant)
                })
                .collect::<Result<Vec<_>>>()?;
            examples.iter().for_each(&mut observe);
            flow_loss_for(net, g, st, &examples, rng)
        },
        on_step,
    )
}

/// Noise streams for one forecast: rectifier and generator segments never share draws.
const RECT_STREAM: u64 = 1_000;
const GEN_STREAM: u64 = 2_000;

fn segment_noise(seed: u64, stream: u64, i: usize, like: &Tensor<f32>) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream + i as u64));
    Tensor::randn(like.shape().to_vec(), &mut rng)
}

fn split_rows(t: Tensor<f32>, parts: usize) -> Result<Vec<Tensor<f32>>> {
    let rows = t.dim(0) / parts.max(1);
    (0..parts).map(|b| t.slice_rows(b * rows, (b + 1) * rows)).collect()
}

fn sample_segments<V: VelocityField + ?Sized>(
    model: &V,
    noise: Vec<&Tensor<f32>>,
    cond: &CondBatch<f32>,
    steps: usize,
) -> Result<Vec<Tensor<f32>>> {
    let b = noise.len();
    let x0 = Tensor::concat_rows(&noise)?;
    let out = euler_integrate(x0, steps, |x, t| model.velocity(x, &vec![t; b], cond))?;
    split_rows(out, b)
}

/// `μ_rec` for a batch of forecasts. Segment 1 passes through; segment `i ≥ 2`
/// is sampled from the Rectifier with `μ_raw_i` and `μ_rec_{i-1}` as conditions.
/// `seeds[b]` fixes the noise of forecast `b`.
pub fn rectify_batch<V: VelocityField + ?Sized>(
    rect: &V,
    mu_raw: &[Vec<Tensor<f32>>],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Vec<Tensor<f32>>>> {
    if mu_raw.len() != seeds.len() {
        return Err(Error::dim(format!("{} forecasts but {} seeds", mu_raw.len(), seeds.len())));
    }
    let Some(n) = mu_raw.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if mu_raw.iter().any(|s| s.len() != n) {
        return Err(Error::dim("forecasts in a batch must have equal segment counts"));
    }
    let mut rec: Vec<Vec<Tensor<f32>>> = mu_raw.iter().map(|s| vec![s[0].clone()]).collect();
    for i in 2..=n {
        let bundles: Vec<ConditionBundle> = mu_raw
            .iter()
            .zip(&rec)
            .map(|(raw, r)| ConditionBundle {
                backbone_cond: raw[i - 1].clone(),
                side_cond: r[i - 2].clone(),
                segment_index: Some(i),
            })
            .collect();
        let cond = CondBatch::stack(&bundles.iter().collect::<Vec<_>>())?;
        let noise: Vec<Tensor<f32>> = seeds
            .iter()
            .zip(mu_raw)
            .map(|(&s, raw)| segment_noise(s, RECT_STREAM, i, &raw[i - 1]))
            .collect();
        let out = sample_segments(rect, noise.iter().collect(), &cond, steps)?;
        for (r, seg) in rec.iter_mut().zip(out) {
            r.push(seg.clamp(0.0, 1.0));
        }
    }
    Ok(rec)
}

pub fn rectify_sequence<V: VelocityField + ?Sized>(
    rect: &V,
    mu_raw: &[Tensor<f32>],
    steps: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    Ok(rectify_batch(rect, &[mu_raw.to_vec()], steps, &[seed])?.remove(0))
}

/// Autoregressive state of one forecast.
#[derive(Clone, Debug)]
pub struct CascadeState {
    pub y0: Tensor<f32>,
    pub mu_raw: Vec<Tensor<f32>>,
    pub mu_rec: Vec<Tensor<f32>>,
    pub y_hat: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSampling {
    pub steps_rect: usize,
    pub steps_gen: usize,
}

impl Default for CascadeSampling {
    fn default() -> Self {
        CascadeSampling {
            steps_rect: 20,
            steps_gen: 20,
        }
    }
}

/// The models a forecast mode may use.
pub struct Cascade<'a> {
    pub backbone: &'a dyn MeanModel,
    pub rectifier: Option<&'a dyn VelocityField>,
    pub generator: Option<(&'a dyn VelocityField, GeneratorVariant)>,
    pub schedule: SegmentSchedule,
    pub sampling: CascadeSampling,
}

impl<'a> Cascade<'a> {
    fn check_mode(&self, mode: ForecastMode) -> Result<()> {
        check_schedule(self.backbone, &self.schedule)?;
        if mode.uses_rectifier() && self.rectifier.is_none() {
            return Err(Error::Config(format!("mode {} needs a rectifier", mode.name())));
        }
        if let Some(want) = mode.generator_variant() {
            match self.generator {
                Some((_, have)) if have == want => {}
                Some((_, have)) => {
                    return Err(Error::Config(format!(
                        "mode {} needs a {want:?} generator, got {have:?}",
                        mode.name()
                    )))
                }
                None => return Err(Error::Config(format!("mode {} needs a generator", mode.name()))),
            }
        }
        Ok(())
    }

    /// Forecasts for a batch of input windows `[L_in, 1, H, W]`, each `[L_out, 1, H, W]` in `[0, 1]`.
    pub fn forecast_batch(&self, mode: ForecastMode, inputs: &[&Tensor<f32>], seeds: &[u64]) -> Result<Vec<CascadeState>> {
        self.check_mode(mode)?;
        if inputs.len() != seeds.len() {
            return Err(Error::dim(format!("{} inputs but {} seeds", inputs.len(), seeds.len())));
        }
        let sch = self.schedule;
        let m = sch.m;
        let n = sch.n_segments();
        let raws = self.backbone.predict_batch(inputs)?;
        let mut states: Vec<CascadeState> = Vec::with_capacity(inputs.len());
        for (x, raw) in inputs.iter().zip(&raws) {
            let t = x.dim(0);
            // pad the raw mean so a truncated last segment still has m frames
            let mut padded = raw.clone();
            if n * m > sch.l_out {
                let last = raw.slice_rows(sch.l_out - 1, sch.l_out)?;
                let extra: Vec<&Tensor<f32>> = std::iter::repeat(&last).take(n * m - sch.l_out).collect();
                let mut parts = vec![raw];
                parts.extend(extra);
                padded = Tensor::concat_rows(&parts)?;
            }
            states.push(CascadeState {
                y0: x.slice_rows(t - m, t)?,
                mu_raw: (1..=n)
                    .map(|i| padded.slice_rows(sch.full_range(i).start, sch.full_range(i).end))
                    .collect::<Result<Vec<_>>>()?,
                mu_rec: Vec::new(),
                y_hat: Vec::new(),
            });
        }
        if mode == ForecastMode::BackboneOnly {
            for s in &mut states {
                s.y_hat = s.mu_raw.clone();
            }
            return Ok(states);
        }
        if mode.uses_rectifier() {
            let raws: Vec<Vec<Tensor<f32>>> = states.iter().map(|s| s.mu_raw.clone()).collect();
            let recs = rectify_batch(self.rectifier.unwrap(), &raws, self.sampling.steps_rect, seeds)?;
            for (s, r) in states.iter_mut().zip(recs) {
                s.mu_rec = r;
            }
        }
        if mode == ForecastMode::NoGenerator {
            for s in &mut states {
                s.y_hat = s.mu_rec.clone();
            }
            return Ok(states);
        }
        let (gen, variant) = self.generator.unwrap();
        for i in 1..=n {
            let bundles: Vec<ConditionBundle> = states
                .iter()
                .map(|s| ConditionBundle {
                    backbone_cond: if i == 1 { s.y0.clone() } else { s.y_hat[i - 2].clone() },
                    side_cond: match variant {
                        GeneratorVariant::Rectified => s.mu_rec[i - 1].clone(),
                        GeneratorVariant::RawMean | GeneratorVariant::Residual => s.mu_raw[i - 1].clone(),
                    },
                    segment_index: None,
                })
                .collect();
            let cond = CondBatch::stack(&bundles.iter().collect::<Vec<_>>())?;
            let noise: Vec<Tensor<f32>> = seeds
                .iter()
                .zip(&states)
                .map(|(&sd, s)| segment_noise(sd, GEN_STREAM, i, &s.mu_raw[i - 1]))
                .collect();
            let out = sample_segments(gen, noise.iter().collect(), &cond, self.sampling.steps_gen)?;
            for (s, seg) in states.iter_mut().zip(out) {
                let seg = match variant {
                    GeneratorVariant::Residual => seg.add(&s.mu_raw[i - 1])?,
                    _ => seg,
                };
                s.y_hat.push(seg.clamp(0.0, 1.0));
            }
        }
        Ok(states)
    }

    /// Concatenated forecast truncated to the horizon.
    pub fn assemble(&self, state: &CascadeState) -> Result<Tensor<f32>> {
        let parts: Vec<&Tensor<f32>> = state.y_hat.iter().collect();
        Tensor::concat_rows(&parts)?.slice_rows(0, self.schedule.l_out)
    }

    pub fn forecast(&self, mode: ForecastMode, input: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        let st = self.forecast_batch(mode, &[input], &[seed])?;
        self.assemble(&st[0])
    }
}

/// Network configs for the two flow models derived from one base config.
pub fn rectifier_config(base: &STUNetConfig, schedule: &SegmentSchedule) -> STUNetConfig {
    STUNetConfig {
        frames: schedule.m,
        segment_vocab: Some(schedule.n_segments() + 1),
        ..base.clone()
    }
}

pub fn generator_config(base: &STUNetConfig, schedule: &SegmentSchedule) -> STUNetConfig {
    STUNetConfig {
        frames: schedule.m,
        segment_vocab: None,
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean model that tiles its input along time.
    struct Tile {
        l_in: usize,
        l_out: usize,
    }

    impl MeanModel for Tile {
        fn l_in(&self) -> usize {
            self.l_in
        }
        fn l_out(&self) -> usize {
            self.l_out
        }
        fn predict_batch(&self, inputs: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
            inputs
                .iter()
                .map(|x| {
                    let reps = self.l_out.div_ceil(x.dim(0));
                    let parts: Vec<&Tensor<f32>> = std::iter::repeat(*x).take(reps).collect();
                    Tensor::concat_rows(&parts)?.slice_rows(0, self.l_out)
                })
                .collect()
        }
    }

    struct Zero;

    impl VelocityField for Zero {
        fn velocity(&self, z: &Tensor<f32>, _: &[f64], _: &CondBatch<f32>) -> Result<Tensor<f32>> {
            Ok(z.scale(0.0))
        }
    }

    /// Pulls `z` towards the mean of both conditions.
    struct Pull;

    impl VelocityField for Pull {
        fn velocity(&self, z: &Tensor<f32>, _: &[f64], c: &CondBatch<f32>) -> Result<Tensor<f32>> {
            c.backbone_cond.add(&c.side_cond)?.scale(0.5).sub(z)
        }
    }

    fn rand_frames(t: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([t, 1, 8, 8], 0.0, 1.0, &mut rng)
    }

    fn sample(seed: u64) -> WindowSample {
        WindowSample {
            input: rand_frames(5, seed),
            target: rand_frames(20, seed + 1),
        }
    }

    fn sched() -> SegmentSchedule {
        SegmentSchedule::new(5, 20).unwrap()
    }

    #[test]
    fn schedule_arithmetic() {
        let s = sched();
        assert_eq!(s.n_segments(), 4);
        assert_eq!(s.range(4), 15..20);
        let t = SegmentSchedule::new(5, 18).unwrap();
        assert_eq!(t.n_segments(), 4);
        assert_eq!(t.range(4), 15..18);
        assert_eq!(t.full_range(4), 15..20);
        assert!(SegmentSchedule::new(0, 20).is_err());
    }

    #[test]
    fn nfe_accounting() {
        let s = sched();
        assert_eq!(nfe_count(&s, 20, 20, true), 160);
        assert_eq!(nfe_count(&s, 20, 20, false), 140);
        let one = SegmentSchedule::new(5, 5).unwrap();
        assert_eq!(nfe_count(&one, 20, 7, false), 7);
        assert_eq!(ForecastMode::BackboneOnly.nfe(&s, 20, 20, true), 0);
        assert_eq!(ForecastMode::NoGenerator.nfe(&s, 20, 20, false), 60);
        assert_eq!(ForecastMode::NoRectifierResidual.nfe(&s, 20, 20, true), 80);
        assert_eq!(ForecastMode::Full.nfe(&s, 20, 20, true), 160);
        for m in ForecastMode::ALL {
            assert_eq!(ForecastMode::parse(m.name()).unwrap(), m);
        }
    }

    #[test]
    fn tile_stub_targets_are_previous_segments() {
        let x = sample(3);
        let targets = rectifier_targets(&x, &Tile { l_in: 5, l_out: 20 }, &sched()).unwrap();
        assert_eq!(targets.len(), 3);
        for (k, t) in targets.iter().enumerate() {
            let i = k + 2;
            assert!(t.bit_eq(&x.target.slice_rows((i - 2) * 5, (i - 1) * 5).unwrap()));
        }
        let bad = Tile { l_in: 4, l_out: 20 };
        assert!(matches!(rectifier_targets(&x, &bad, &sched()), Err(Error::Config(_))));
    }

    #[test]
    fn teacher_forced_conditions() {
        let bb = Tile { l_in: 5, l_out: 20 };
        let x = sample(9);
        let td = teacher_data(&bb, &sched(), std::slice::from_ref(&x)).unwrap().remove(0);
        let seg = |i: usize| x.target.slice_rows((i - 1) * 5, i * 5).unwrap();
        let mu_raw1 = bb.predict_batch(&[&x.input]).unwrap()[0].slice_rows(0, 5).unwrap();
        assert!(td.rectifier_target(1).is_none());

        let g1 = generator_example(&td, 0, 1, GeneratorVariant::Rectified).unwrap();
        assert!(g1.cond.backbone_cond.bit_eq(&x.input));
        assert!(g1.cond.side_cond.bit_eq(&mu_raw1));
        assert!(g1.target.bit_eq(&seg(1)));
        assert_eq!(g1.cond.segment_index, None);

        let g2 = generator_example(&td, 0, 2, GeneratorVariant::Rectified).unwrap();
        let head1 = bb.segment_heads(&[&seg(1)]).unwrap().remove(0);
        assert!(g2.cond.side_cond.bit_eq(&head1));
        assert!(g2.cond.backbone_cond.bit_eq(&seg(1)));

        let r2 = rectifier_example(&td, 0, 2).unwrap();
        assert!(r2.cond.side_cond.bit_eq(&mu_raw1));
        let r3 = rectifier_example(&td, 0, 3).unwrap();
        assert!(r3.cond.side_cond.bit_eq(&head1));
        assert!(r3.target.bit_eq(&bb.segment_heads(&[&seg(2)]).unwrap()[0]));
        assert_eq!(r3.cond.segment_index, Some(3));

        let res = generator_example(&td, 0, 4, GeneratorVariant::Residual).unwrap();
        assert!(res.target.bit_eq(&seg(4).sub(&td.mu_raw[3]).unwrap()));
        assert!(res.cond.side_cond.bit_eq(&td.mu_raw[3]));
    }

    #[test]
    fn rectification_identity_and_causality() {
        let raw: Vec<Tensor<f32>> = (0..4).map(|k| rand_frames(5, 40 + k)).collect();
        let rec = rectify_sequence(&Pull, &raw, 6, 1).unwrap();
        assert!(rec[0].bit_eq(&raw[0]));
        assert!(!rec[1].bit_eq(&raw[1]));
        assert!(rec.iter().all(|r| r.min_value() >= 0.0 && r.max_value() <= 1.0));

        let mut perturbed = raw.clone();
        perturbed[3] = rand_frames(5, 99);
        let rec_p = rectify_sequence(&Pull, &perturbed, 6, 1).unwrap();
        for i in 0..3 {
            assert!(rec[i].bit_eq(&rec_p[i]));
        }
        assert!(!rec[3].bit_eq(&rec_p[3]));

        let again = rectify_sequence(&Pull, &raw, 6, 1).unwrap();
        assert!(rec.iter().zip(&again).all(|(a, b)| a.bit_eq(b)));

        let single = rectify_sequence(&Pull, &raw[..1], 6, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].bit_eq(&raw[0]));
    }

    #[test]
    fn batched_rectification_matches_single() {
        let a: Vec<Tensor<f32>> = (0..4).map(|k| rand_frames(5, 10 + k)).collect();
        let b: Vec<Tensor<f32>> = (0..4).map(|k| rand_frames(5, 20 + k)).collect();
        let both = rectify_batch(&Pull, &[a.clone(), b.clone()], 4, &[7, 8]).unwrap();
        let sa = rectify_sequence(&Pull, &a, 4, 7).unwrap();
        let sb = rectify_sequence(&Pull, &b, 4, 8).unwrap();
        for i in 0..4 {
            assert!(both[0][i].max_abs_diff(&sa[i]) < 1e-6);
            assert!(both[1][i].max_abs_diff(&sb[i]) < 1e-6);
        }
    }

    #[test]
    fn ablation_modes() {
        let bb = Tile { l_in: 5, l_out: 20 };
        let x = rand_frames(5, 5);
        let casc = |gen: Option<(&'static dyn VelocityField, GeneratorVariant)>| Cascade {
            backbone: &bb,
            rectifier: Some(&Pull),
            generator: gen,
            schedule: sched(),
            sampling: CascadeSampling { steps_rect: 3, steps_gen: 1 },
        };

        let only = casc(None).forecast(ForecastMode::BackboneOnly, &x, 0).unwrap();
        assert!(only.bit_eq(&bb.predict_batch(&[&x]).unwrap()[0]));

        let c = casc(None);
        let st = c.forecast_batch(ForecastMode::NoGenerator, &[&x], &[4]).unwrap();
        let raw: Vec<Tensor<f32>> = (0..4).map(|k| only.slice_rows(5 * k, 5 * k + 5).unwrap()).collect();
        let rec = rectify_sequence(&Pull, &raw, 3, 4).unwrap();
        assert!(c.assemble(&st[0]).unwrap().bit_eq(&Tensor::concat_rows(&rec.iter().collect::<Vec<_>>()).unwrap()));

        let c = casc(Some((&Zero, GeneratorVariant::Residual)));
        let y = c.forecast(ForecastMode::NoRectifierResidual, &x, 11).unwrap();
        for i in 1..=4 {
            let eps = segment_noise(11, GEN_STREAM, i, &raw[i - 1]);
            let want = raw[i - 1].add(&eps).unwrap().clamp(0.0, 1.0);
            assert!(y.slice_rows(5 * (i - 1), 5 * i).unwrap().bit_eq(&want));
        }
        assert!(matches!(c.forecast(ForecastMode::Full, &x, 0), Err(Error::Config(_))));
        assert!(matches!(casc(None).forecast(ForecastMode::Full, &x, 0), Err(Error::Config(_))));

        let c = casc(Some((&Pull, GeneratorVariant::Rectified)));
        let a = c.forecast(ForecastMode::Full, &x, 3).unwrap();
        assert_eq!(a.shape(), &[20, 1, 8, 8]);
        assert!(a.bit_eq(&c.forecast(ForecastMode::Full, &x, 3).unwrap()));
        assert!(!a.bit_eq(&c.forecast(ForecastMode::Full, &x, 4).unwrap()));
    }

    #[test]
    fn truncated_last_segment() {
        let bb = Tile { l_in: 5, l_out: 18 };
        let c = Cascade {
            backbone: &bb,
            rectifier: Some(&Pull),
            generator: Some((&Pull, GeneratorVariant::Rectified)),
            schedule: SegmentSchedule::new(5, 18).unwrap(),
            sampling: CascadeSampling { steps_rect: 2, steps_gen: 2 },
        };
        let y = c.forecast(ForecastMode::Full, &rand_frames(5, 1), 0).unwrap();
        assert_eq!(y.shape(), &[18, 1, 8, 8]);
    }
}
