//! Synthetic radar-like sequences, windowing, scaling, and on-disk datasets.
//!
//! Sequences evolve Gaussian precipitation cells on a torus under
//! advection, diffusion and a persistent multiplicative growth/decay field.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Full-scale raw echo value; normalized data is `raw / FULL_SCALE`.
pub const FULL_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_cells: usize,
    /// Fixed advection velocity `[vx, vy]` in pixels per frame (vx along width).
    /// When absent each sequence draws a random direction and a speed from `speed_range`.
    pub velocity: Option<[f64; 2]>,
    pub speed_range: [f64; 2],
    /// Std of the per-frame random walk added to the velocity.
    pub velocity_jitter: f64,
    /// Explicit diffusion coefficient (5-point Laplacian, per frame).
    pub diffusion: f64,
    /// Mean log growth per frame (negative decays).
    pub growth: f64,
    /// Std of the log growth field per frame.
    pub noise: f64,
    /// Frame-to-frame correlation of the growth field.
    pub noise_persistence: f64,
    pub amplitude_range: [f64; 2],
    pub radius_range: [f64; 2],
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_cells: 4,
            velocity: None,
            speed_range: [0.5, 1.5],
            velocity_jitter: 0.05,
            diffusion: 0.02,
            growth: 0.0,
            noise: 0.08,
            noise_persistence: 0.9,
            amplitude_range: [0.5, 1.0],
            radius_range: [2.0, 4.5],
        }
    }
}

#[derive(Clone, Debug)]
pub struct RadarSequence {
    /// `[T, 1, H, W]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub seed: u64,
    pub params: SynthParams,
}

impl RadarSequence {
    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-sequence seed derived from the run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn wrap_delta(d: f64, n: usize) -> f64 {
    let n = n as f64;
    d - n * (d / n).round()
}

/// Smooth random field: a few low-wavenumber Fourier modes with random phases,
/// normalized to unit variance.
struct ModeField {
    modes: Vec<(f64, f64, f64)>,
}

impl ModeField {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Self {
        let modes = (0..n)
            .map(|_| {
                let kx = rng.gen_range(1..=3) as f64 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let ky = rng.gen_range(0..=3) as f64;
                let phase = rng.gen_range(0.0..2.0 * PI);
                (2.0 * PI * kx / w as f64, 2.0 * PI * ky / h as f64, phase)
            })
            .collect();
        ModeField { modes }
    }

    fn render(&self, h: usize, w: usize) -> Vec<f64> {
        let norm = (2.0 / self.modes.len() as f64).sqrt();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = norm
                    * self
                        .modes
                        .iter()
                        .map(|&(fx, fy, p)| (fx * x as f64 + fy * y as f64 + p).cos())
                        .sum::<f64>();
            }
        }
        out
    }
}

fn advect(field: &[f64], h: usize, w: usize, vx: f64, vy: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 - vx;
            let sy = y as f64 - vy;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            let x0 = (fx as i64).rem_euclid(w as i64) as usize;
            let y0 = (fy as i64).rem_euclid(h as i64) as usize;
            let x1 = (x0 + 1) % w;
            let y1 = (y0 + 1) % h;
            let top = field[y0 * w + x0] * (1.0 - ax) + field[y0 * w + x1] * ax;
            let bottom = field[y1 * w + x0] * (1.0 - ax) + field[y1 * w + x1] * ax;
            out[y * w + x] = top * (1.0 - ay) + bottom * ay;
        }
    }
    out
}

fn diffuse(field: &mut [f64], h: usize, w: usize, kappa: f64) {
    if kappa == 0.0 {
        return;
    }
    let src = field.to_vec();
    for y in 0..h {
        for x in 0..w {
            let c = src[y * w + x];
            let lap = src[y * w + (x + 1) % w]
                + src[y * w + (x + w - 1) % w]
                + src[((y + 1) % h) * w + x]
                + src[((y + h - 1) % h) * w + x]
                - 4.0 * c;
            field[y * w + x] = c + kappa * lap;
        }
    }
}

fn synth_one(seed: u64, t_total: usize, h: usize, w: usize, p: &SynthParams) -> RadarSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; h * w];
    for _ in 0..p.n_cells {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let amp = rng.gen_range(p.amplitude_range[0]..=p.amplitude_range[1]);
        let r = rng.gen_range(p.radius_range[0]..=p.radius_range[1]);
        for y in 0..h {
            for x in 0..w {
                let dy = wrap_delta(y as f64 - cy, h);
                let dx = wrap_delta(x as f64 - cx, w);
                field[y * w + x] += amp * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            }
        }
    }
    field.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let (mut vx, mut vy) = match p.velocity {
        Some([vx, vy]) => (vx, vy),
        None => {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let speed = rng.gen_range(p.speed_range[0]..=p.speed_range[1]);
            (speed * angle.cos(), speed * angle.sin())
        }
    };
    let stochastic = p.noise > 0.0;
    let mut growth_field = if stochastic {
        ModeField::new(&mut rng, h, w, 3).render(h, w)
    } else {
        vec![0.0; h * w]
    };

    let mut frames = Vec::with_capacity(t_total * h * w);
    frames.extend(field.iter().map(|&v| v as f32));
    for _ in 1..t_total {
        if p.velocity_jitter > 0.0 {
            vx += p.velocity_jitter * rng.sample::<f64, _>(StandardNormal);
            vy += p.velocity_jitter * rng.sample::<f64, _>(StandardNormal);
        }
        field = advect(&field, h, w, vx, vy);
        diffuse(&mut field, h, w, p.diffusion);
        if stochastic {
            let rho = p.noise_persistence;
            let fresh = ModeField::new(&mut rng, h, w, 3).render(h, w);
            for (g, f) in growth_field.iter_mut().zip(&fresh) {
                *g = rho * *g + (1.0 - rho * rho).sqrt() * f;
            }
        }
        if stochastic || p.growth != 0.0 {
            for (v, g) in field.iter_mut().zip(&growth_field) {
                *v *= (p.growth + p.noise * g).exp();
            }
        }
        field.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        frames.extend(field.iter().map(|&v| v as f32));
    }
    RadarSequence {
        frames: Tensor::from_vec([t_total, 1, h, w], frames).expect("frame buffer"),
        seed,
        params: p.clone(),
    }
}

/// Generates `n_sequences` independent sequences; sequence `i` uses `derive_seed(seed, i)`.
pub fn synth_advection(
    seed: u64,
    n_sequences: usize,
    t_total: usize,
    h: usize,
    w: usize,
    params: &SynthParams,
) -> Result<Vec<RadarSequence>> {
    if t_total < 25 {
        return Err(Error::Precondition(format!(
            "sequences need at least 25 frames, got {t_total}"
        )));
    }
    if ![32, 64].contains(&h) || ![32, 64].contains(&w) {
        return Err(Error::Config(format!(
            "frame size {h}x{w} unsupported: height and width must each be 32 or 64"
        )));
    }
    if params.diffusion < 0.0 || params.diffusion > 0.25 {
        return Err(Error::Config(format!(
            "diffusion {} outside the stable range [0, 0.25]",
            params.diffusion
        )));
    }
    for (name, r) in [
        ("speed_range", params.speed_range),
        ("amplitude_range", params.amplitude_range),
        ("radius_range", params.radius_range),
    ] {
        if !(r[0] <= r[1]) || r[0] < 0.0 {
            return Err(Error::Config(format!("{name} {r:?} is not an increasing non-negative range")));
        }
    }
    Ok((0..n_sequences as u64)
        .map(|i| synth_one(derive_seed(seed, i), t_total, h, w, params))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[L_in, 1, H, W]`
    pub input: Tensor<f32>,
    /// `[L_out, 1, H, W]`
    pub target: Tensor<f32>,
}

impl WindowSample {
    pub fn from_window(frames: &Tensor<f32>, split_in: usize) -> Result<Self> {
        let t = frames.dim(0);
        if split_in == 0 || split_in >= t {
            return Err(Error::Config(format!("input split {split_in} invalid for a {t}-frame window")));
        }
        Ok(WindowSample {
            input: frames.slice_rows(0, split_in)?,
            target: frames.slice_rows(split_in, t)?,
        })
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.input.dim(2), self.input.dim(3))
    }
}

/// Samples starting at offsets `0, stride, 2*stride, ...`; each copies its frames.
pub fn window_samples(frames: &Tensor<f32>, window: usize, stride: usize, split_in: usize) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let t = frames.dim(0);
    if window > t {
        return Ok(Vec::new());
    }
    (0..=t - window)
        .step_by(stride)
        .map(|off| WindowSample::from_window(&frames.slice_rows(off, off + window)?, split_in))
        .collect()
}

/// Raw `[0, 255]` values to `[0, 1]`. Out-of-range inputs are clamped and counted.
pub fn normalize(raw: &Tensor<f32>) -> (Tensor<f32>, usize) {
    let scale = FULL_SCALE as f32;
    let clamped = raw.data().iter().filter(|&&v| !(0.0..=scale).contains(&v)).count();
    (raw.map(|v| v.clamp(0.0, scale) / scale), clamped)
}

pub fn denormalize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v * FULL_SCALE as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub file: String,
    pub split: Split,
    pub sequence: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub input_len: usize,
    pub sequence_len: usize,
    pub synth: SynthParams,
    pub samples: Vec<SampleEntry>,
}

pub const DATASET_FORMAT: &str = "recticast-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub height: usize,
    pub width: usize,
    pub sequence_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub window: usize,
    pub stride: usize,
    pub input_len: usize,
    pub synth: SynthParams,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            height: 32,
            width: 32,
            sequence_len: 49,
            n_train: 48,
            n_val: 6,
            n_test: 8,
            window: 25,
            stride: 5,
            input_len: 5,
            synth: SynthParams::default(),
        }
    }
}

impl DataSpec {
    pub fn target_len(&self) -> usize {
        self.window - self.input_len
    }
}

/// Windowed samples grouped by split, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: BTreeMap<Split, Vec<(String, WindowSample)>>,
}

impl Dataset {
    /// Synthesizes sequences and windows them. Splits are assigned per
    /// sequence so overlapping windows never straddle splits.
    pub fn synthesize(spec: &DataSpec, seed: u64) -> Result<Self> {
        let n = spec.n_train + spec.n_val + spec.n_test;
        let seqs = synth_advection(seed, n, spec.sequence_len, spec.height, spec.width, &spec.synth)?;
        let mut samples: BTreeMap<Split, Vec<(String, WindowSample)>> = BTreeMap::new();
        let mut entries = Vec::new();
        for (si, seq) in seqs.iter().enumerate() {
            let split = if si < spec.n_train {
                Split::Train
            } else if si < spec.n_train + spec.n_val {
                Split::Val
            } else {
                Split::Test
            };
            let windows = window_samples(&seq.frames, spec.window, spec.stride, spec.input_len)?;
            for (wi, ws) in windows.into_iter().enumerate() {
                let offset = wi * spec.stride;
                let id = format!("s{si:04}_o{offset:03}");
                entries.push(SampleEntry {
                    file: format!("{}/{id}.rten", split.name()),
                    id: id.clone(),
                    split,
                    sequence: si,
                    offset,
                });
                samples.entry(split).or_default().push((id, ws));
            }
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                format: DATASET_FORMAT.into(),
                seed,
                height: spec.height,
                width: spec.width,
                window: spec.window,
                stride: spec.stride,
                input_len: spec.input_len,
                sequence_len: spec.sequence_len,
                synth: spec.synth.clone(),
                samples: entries,
            },
            samples,
        })
    }

    pub fn split(&self, split: Split) -> &[(String, WindowSample)] {
        self.samples.get(&split).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn split_samples(&self, split: Split) -> Vec<WindowSample> {
        self.split(split).iter().map(|(_, s)| s.clone()).collect()
    }

    /// Writes `manifest.json` plus one `[window, 1, H, W]` tensor file per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for entry in &self.manifest.samples {
            let (_, ws) = self
                .split(entry.split)
                .iter()
                .find(|(id, _)| *id == entry.id)
                .ok_or_else(|| Error::Invariant(format!("sample {} missing from its split", entry.id)))?;
            let frames = Tensor::concat_rows(&[&ws.input, &ws.target])?;
            io::save_tensor(&dir.join(&entry.file), &frames)?;
        }
        io::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path: PathBuf = dir.join("manifest.json");
        let manifest: DatasetManifest = io::read_json(&manifest_path)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Load {
                what: "dataset".into(),
                path: manifest_path,
                msg: format!("unknown format {:?}", manifest.format),
            });
        }
        let mut samples: BTreeMap<Split, Vec<(String, WindowSample)>> = BTreeMap::new();
        for entry in &manifest.samples {
            let frames: Tensor<f32> = io::load_tensor(&dir.join(&entry.file))?;
            let expect = [manifest.window, 1, manifest.height, manifest.width];
            frames.expect_shape(&expect, &entry.file)?;
            let ws = WindowSample::from_window(&frames, manifest.input_len)?;
            samples.entry(entry.split).or_default().push((entry.id.clone(), ws));
        }
        Ok(Dataset { manifest, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> SynthParams {
        SynthParams {
            n_cells: 3,
            velocity: Some([1.0, 0.0]),
            velocity_jitter: 0.0,
            diffusion: 0.0,
            growth: 0.0,
            noise: 0.0,
            ..SynthParams::default()
        }
    }

    #[test]
    fn pure_translation_shifts_one_pixel_right() {
        let seq = &synth_advection(11, 1, 25, 32, 32, &still()).unwrap()[0];
        let f = seq.frames.data();
        let plane = 32 * 32;
        for t in 0..24 {
            for y in 0..32 {
                for x in 0..32 {
                    let prev = f[t * plane + y * 32 + (x + 31) % 32];
                    assert_eq!(f[(t + 1) * plane + y * 32 + x], prev);
                }
            }
        }
        assert!(seq.frames.max_value() > 0.1);
    }

    #[test]
    fn zero_cells_is_all_zero() {
        let p = SynthParams {
            n_cells: 0,
            ..SynthParams::default()
        };
        let seq = &synth_advection(1, 1, 25, 32, 32, &p).unwrap()[0];
        assert!(seq.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frames_stay_in_unit_range() {
        let p = SynthParams {
            growth: 0.05,
            noise: 0.3,
            ..SynthParams::default()
        };
        for seq in synth_advection(5, 4, 30, 32, 32, &p).unwrap() {
            assert!(seq.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let p = SynthParams::default();
        for seed in 0..100u64 {
            let a = synth_advection(seed, 1, 25, 32, 32, &p).unwrap();
            let b = synth_advection(seed, 1, 25, 32, 32, &p).unwrap();
            assert!(a[0].frames.bit_eq(&b[0].frames), "seed {seed}");
        }
        let a = synth_advection(1, 1, 25, 32, 32, &p).unwrap();
        let b = synth_advection(2, 1, 25, 32, 32, &p).unwrap();
        assert!(!a[0].frames.bit_eq(&b[0].frames));
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let spec = DataSpec {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            sequence_len: 30,
            ..DataSpec::default()
        };
        let ds = Dataset::synthesize(&spec, 9).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 4);
        assert_eq!(ds.split(Split::Test).len(), 2);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for split in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(back.split(split), ds.split(split));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synth_advection(0, 1, 24, 32, 32, &SynthParams::default()).is_err());
        assert!(synth_advection(0, 1, 25, 48, 32, &SynthParams::default()).is_err());
    }

    #[test]
    fn window_offsets_enumerate() {
        let frames = |t: usize| {
            Tensor::<f32>::from_vec([t, 1, 1, 1], (0..t).map(|v| v as f32).collect()).unwrap()
        };
        assert_eq!(window_samples(&frames(25), 25, 5, 5).unwrap().len(), 1);
        assert!(window_samples(&frames(24), 25, 5, 5).unwrap().is_empty());
        let ws = window_samples(&frames(49), 25, 5, 5).unwrap();
        let offsets: Vec<usize> = (0..=49 - 25).step_by(5).collect();
        assert_eq!(offsets, vec![0, 5, 10, 15, 20]);
        assert_eq!(ws.len(), offsets.len());
        for (w, off) in ws.iter().zip(offsets) {
            assert_eq!(w.input.data()[0], off as f32);
            assert_eq!(w.input.dim(0), 5);
            assert_eq!(w.target.dim(0), 20);
            assert_eq!(w.target.data()[0], (off + 5) as f32);
            assert_eq!(w.target.data()[19], (off + 24) as f32);
        }
    }

    #[test]
    fn windows_do_not_alias_source() {
        let frames = Tensor::<f32>::from_vec([25, 1, 1, 1], vec![0.5; 25]).unwrap();
        let mut ws = window_samples(&frames, 25, 5, 5).unwrap();
        ws[0].input.data_mut()[0] = 9.0;
        assert_eq!(frames.data()[0], 0.5);
    }

    #[test]
    fn normalization_round_trips_and_clamps() {
        let raw = Tensor::<f32>::from_vec([4], vec![0.0, 255.0, 128.0, 300.0]).unwrap();
        let (n, clamped) = normalize(&raw);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        assert_eq!(n.data()[3], 1.0);
        assert_eq!(clamped, 1);
        let ints = Tensor::<f32>::from_vec([256], (0..256).map(|v| v as f32).collect()).unwrap();
        assert_eq!(denormalize(&normalize(&ints).0), ints);
    }
}
