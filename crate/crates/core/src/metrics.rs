//! Forecast verification: thresholded contingency tables, CSI, max-pooled
//! CSI, HSS, SSIM and per-lead-time aggregation.
//!
//! Thresholds are given on the raw 0..255 scale and compared against
//! normalized frames. Aggregates sum integer counts over samples first, then
//! score each (threshold, lead) cell and average the non-vacuous cells.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FULL_SCALE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];

/// Pooling sizes behind the CSI, CSI4 and CSI16 columns.
pub const POOLS: [usize; 3] = [1, 4, 16];

pub fn unit_threshold(raw: f64) -> f32 {
    (raw / FULL_SCALE) as f32
}

/// `value >= threshold` per element; `threshold` is on the 0..255 scale.
pub fn binarize(frame: &[f32], raw_threshold: f64) -> Vec<bool> {
    let thr = unit_threshold(raw_threshold);
    frame.iter().map(|&v| v >= thr).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    /// No event in either field.
    pub fn is_vacuous(&self) -> bool {
        self.hits + self.misses + self.false_alarms == 0
    }

    pub fn add(&mut self, o: &ContingencyCounts) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.false_alarms += o.false_alarms;
        self.correct_negatives += o.correct_negatives;
    }

    /// `H / (H + M + F)`, 1 for a vacuous table.
    pub fn csi(&self) -> f64 {
        let d = self.hits + self.misses + self.false_alarms;
        if d == 0 {
            1.0
        } else {
            self.hits as f64 / d as f64
        }
    }

    /// `2(HC - MF) / ((H+M)(M+C) + (H+F)(F+C))`, 0 when the denominator vanishes.
    pub fn hss(&self) -> f64 {
        let (h, m, f, c) = (
            self.hits as f64,
            self.misses as f64,
            self.false_alarms as f64,
            self.correct_negatives as f64,
        );
        let den = (h + m) * (m + c) + (h + f) * (f + c);
        if den == 0.0 {
            0.0
        } else {
            2.0 * (h * c - m * f) / den
        }
    }
}

pub fn contingency(pred: &[bool], gt: &[bool]) -> Result<ContingencyCounts> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "contingency over {} predicted and {} observed pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ContingencyCounts::default();
    for (&p, &o) in pred.iter().zip(gt) {
        match (p, o) {
            (true, true) => c.hits += 1,
            (false, true) => c.misses += 1,
            (true, false) => c.false_alarms += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

fn frame_dims(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::dim(format!("frames need at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.len() / (h * w).max(1), h, w))
}

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "forecast shape {:?} differs from observation {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// `k x k` max pooling over the last two dims; partial blocks are zero padded.
pub fn max_pool(t: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    if k == 0 {
        return Err(Error::Config("pooling size must be positive".into()));
    }
    let (frames, h, w) = frame_dims(t)?;
    if k == 1 {
        return Ok(t.clone());
    }
    let (ph, pw) = (h.div_ceil(k), w.div_ceil(k));
    let src = t.data();
    let mut out = vec![0f32; frames * ph * pw];
    for f in 0..frames {
        let plane = &src[f * h * w..(f + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[f * ph * pw + (y / k) * pw + x / k];
                *o = o.max(plane[y * w + x]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ph;
    shape[n - 1] = pw;
    Tensor::from_vec(shape, out)
}

/// Counts after `k x k` max pooling of both fields.
pub fn pooled_counts(pred: &Tensor<f32>, gt: &Tensor<f32>, k: usize, raw_threshold: f64) -> Result<ContingencyCounts> {
    check_pair(pred, gt)?;
    let (p, g) = (max_pool(pred, k)?, max_pool(gt, k)?);
    contingency(&binarize(p.data(), raw_threshold), &binarize(g.data(), raw_threshold))
}

fn mean_of(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// CSI after `k x k` pooling, averaged over thresholds and frames (leading
/// index), skipping vacuous cells. `None` if every cell is vacuous.
pub fn pooled_csi(pred: &Tensor<f32>, gt: &Tensor<f32>, k: usize, thresholds: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let (p, g) = (max_pool(pred, k)?, max_pool(gt, k)?);
    let lead = p.dim(0);
    let per = p.len() / lead.max(1);
    let mut cells = Vec::new();
    for l in 0..lead {
        let (pf, gf) = (&p.data()[l * per..(l + 1) * per], &g.data()[l * per..(l + 1) * per]);
        for &thr in thresholds {
            let c = contingency(&binarize(pf, thr), &binarize(gf, thr))?;
            if !c.is_vacuous() {
                cells.push(c.csi());
            }
        }
    }
    Ok(mean_of(cells))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two `h x w` planes over all valid window positions.
pub fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::dim("SSIM planes do not match their stated size"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let wgt = gi * gj;
                    let p = (y + i) * w + x + j;
                    let (va, vb) = (a[p] as f64, b[p] as f64);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * (va * vb);
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM averaged over every frame of two equally shaped tensors.
pub fn ssim(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (frames, h, w) = frame_dims(pred)?;
    let mut s = 0.0;
    for f in 0..frames {
        let r = f * h * w..(f + 1) * h * w;
        s += ssim_plane(&pred.data()[r.clone()], &gt.data()[r], h, w)?;
    }
    Ok(s / frames as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Precondition("Spearman needs two equal series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Running sums over a test split; forecasts are `[L, ..., H, W]`.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    thresholds: Vec<f64>,
    leads: usize,
    /// `[pool][threshold][lead]`
    counts: Vec<Vec<Vec<ContingencyCounts>>>,
    ssim: Vec<f64>,
    sq_err: Vec<f64>,
    pixels: usize,
    samples: usize,
    with_ssim: bool,
}

impl MetricAccumulator {
    pub fn new(thresholds: &[f64], leads: usize) -> Self {
        MetricAccumulator {
            thresholds: thresholds.to_vec(),
            leads,
            counts: vec![vec![vec![ContingencyCounts::default(); leads]; thresholds.len()]; POOLS.len()],
            ssim: vec![0.0; leads],
            sq_err: vec![0.0; leads],
            pixels: 0,
            samples: 0,
            with_ssim: true,
        }
    }

    /// Skips SSIM, for frames too small for its window.
    pub fn without_ssim(mut self) -> Self {
        self.with_ssim = false;
        self
    }

    pub fn add(&mut self, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
        check_pair(pred, gt)?;
        if pred.dim(0) != self.leads {
            return Err(Error::dim(format!("forecast has {} leads, expected {}", pred.dim(0), self.leads)));
        }
        let (_, h, w) = frame_dims(pred)?;
        let per = pred.len() / self.leads;
        for (pi, &k) in POOLS.iter().enumerate() {
            let (p, g) = (max_pool(pred, k)?, max_pool(gt, k)?);
            let pper = p.len() / self.leads;
            for l in 0..self.leads {
                let (pf, gf) = (&p.data()[l * pper..(l + 1) * pper], &g.data()[l * pper..(l + 1) * pper]);
                for (ti, &thr) in self.thresholds.iter().enumerate() {
                    let c = contingency(&binarize(pf, thr), &binarize(gf, thr))?;
                    self.counts[pi][ti][l].add(&c);
                }
            }
        }
        for l in 0..self.leads {
            let (pf, gf) = (&pred.data()[l * per..(l + 1) * per], &gt.data()[l * per..(l + 1) * per]);
            if self.with_ssim {
                let planes = per / (h * w);
                for q in 0..planes {
                    let r = q * h * w..(q + 1) * h * w;
                    self.ssim[l] += ssim_plane(&pf[r.clone()], &gf[r], h, w)? / planes as f64;
                }
            }
            self.sq_err[l] += pf.iter().zip(gf).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        self.pixels = per;
        self.samples += 1;
        Ok(())
    }

    pub fn counts(&self, pool: usize, threshold: usize, lead: usize) -> ContingencyCounts {
        self.counts[pool][threshold][lead]
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.samples == 0 {
            return Err(Error::Precondition("no forecasts to evaluate".into()));
        }
        let n = self.samples as f64;
        let cell = |pi: usize, f: fn(&ContingencyCounts) -> f64| -> Vec<Vec<Option<f64>>> {
            (0..self.thresholds.len())
                .map(|ti| {
                    (0..self.leads)
                        .map(|l| {
                            let c = &self.counts[pi][ti][l];
                            (!c.is_vacuous()).then(|| f(c))
                        })
                        .collect()
                })
                .collect()
        };
        let csi = [cell(0, ContingencyCounts::csi), cell(1, ContingencyCounts::csi), cell(2, ContingencyCounts::csi)];
        let hss = cell(0, ContingencyCounts::hss);
        let ssim: Vec<Option<f64>> = self.ssim.iter().map(|s| self.with_ssim.then(|| s / n)).collect();
        let mse: Vec<f64> = self.sq_err.iter().map(|s| s / (n * self.pixels as f64)).collect();
        let all = |t: &Vec<Vec<Option<f64>>>| mean_of(t.iter().flatten().flatten().copied());
        let by_lead = |t: &Vec<Vec<Option<f64>>>, l: usize| mean_of(t.iter().filter_map(|row| row[l]));
        let by_thr = |t: &Vec<Vec<Option<f64>>>, ti: usize| mean_of(t[ti].iter().flatten().copied());
        Ok(MetricReport {
            samples: self.samples,
            thresholds: self.thresholds.clone(),
            csi: all(&csi[0]),
            csi4: all(&csi[1]),
            csi16: all(&csi[2]),
            hss: all(&hss),
            ssim: mean_of(ssim.iter().flatten().copied()),
            mse: mean_of(mse.iter().copied()).unwrap_or(0.0),
            per_lead: (0..self.leads)
                .map(|l| LeadScores {
                    lead: l + 1,
                    csi: by_lead(&csi[0], l),
                    csi4: by_lead(&csi[1], l),
                    csi16: by_lead(&csi[2], l),
                    hss: by_lead(&hss, l),
                    ssim: ssim[l],
                    mse: mse[l],
                })
                .collect(),
            per_threshold: (0..self.thresholds.len())
                .map(|ti| ThresholdScores {
                    threshold: self.thresholds[ti],
                    csi: by_thr(&csi[0], ti),
                    csi4: by_thr(&csi[1], ti),
                    csi16: by_thr(&csi[2], ti),
                    hss: by_thr(&hss, ti),
                })
                .collect(),
            cells: CellTable { csi, hss },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadScores {
    pub lead: usize,
    pub csi: Option<f64>,
    pub csi4: Option<f64>,
    pub csi16: Option<f64>,
    pub hss: Option<f64>,
    pub ssim: Option<f64>,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub csi: Option<f64>,
    pub csi4: Option<f64>,
    pub csi16: Option<f64>,
    pub hss: Option<f64>,
}

/// Per-cell scores, `None` for vacuous cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    /// `[pool][threshold][lead]` for pools 1, 4 and 16.
    pub csi: [Vec<Vec<Option<f64>>>; 3],
    /// `[threshold][lead]`
    pub hss: Vec<Vec<Option<f64>>>,
}

/// Aggregate scores; `None` when every contributing cell is vacuous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub thresholds: Vec<f64>,
    pub csi: Option<f64>,
    pub csi4: Option<f64>,
    pub csi16: Option<f64>,
    pub hss: Option<f64>,
    pub ssim: Option<f64>,
    pub mse: f64,
    pub per_lead: Vec<LeadScores>,
    pub per_threshold: Vec<ThresholdScores>,
    pub cells: CellTable,
}

impl MetricReport {
    pub fn leads(&self) -> usize {
        self.per_lead.len()
    }

    pub fn csi_curve(&self) -> Vec<Option<f64>> {
        self.per_lead.iter().map(|l| l.csi).collect()
    }

    pub fn mse_curve(&self) -> Vec<f64> {
        self.per_lead.iter().map(|l| l.mse).collect()
    }

    /// Rows `lead,threshold,metric,value`; per-lead SSIM and MSE use threshold `all`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lead,threshold,metric,value\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        for l in 0..self.leads() {
            for (ti, thr) in self.thresholds.iter().enumerate() {
                for (name, table) in [("csi", &self.cells.csi[0]), ("csi4", &self.cells.csi[1]), ("csi16", &self.cells.csi[2]), ("hss", &self.cells.hss)] {
                    s.push_str(&format!("{},{},{},{}\n", l + 1, thr, name, fmt(table[ti][l])));
                }
            }
            let p = &self.per_lead[l];
            s.push_str(&format!("{},all,ssim,{}\n", l + 1, fmt(p.ssim)));
            s.push_str(&format!("{},all,mse,{:.6e}\n", l + 1, p.mse));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores for aligned forecast/observation pairs, each `[L, 1, H, W]`.
pub fn leadtime_curves(forecasts: &[Tensor<f32>], truths: &[Tensor<f32>], thresholds: &[f64]) -> Result<MetricReport> {
    if forecasts.is_empty() {
        return Err(Error::Precondition("lead-time curves need at least one forecast".into()));
    }
    if forecasts.len() != truths.len() {
        return Err(Error::dim(format!("{} forecasts but {} observations", forecasts.len(), truths.len())));
    }
    let (_, h, w) = frame_dims(&forecasts[0])?;
    let mut acc = MetricAccumulator::new(thresholds, forecasts[0].dim(0));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        acc = acc.without_ssim();
    }
    for (p, g) in forecasts.iter().zip(truths) {
        acc.add(p, g)?;
    }
    acc.finish()
}
