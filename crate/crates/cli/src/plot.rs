//! Lead-time curves as standalone SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub const METRICS: [&str; 6] = ["csi", "csi4", "csi16", "hss", "ssim", "mse"];

/// Per metric, the value at each lead. Threshold-specific metrics are
/// averaged over the thresholds that have events; NA entries are skipped.
pub type Curves = BTreeMap<String, Vec<Option<f64>>>;

pub fn parse_leadtime_csv(path: &Path, text: &str) -> CliResult<Curves> {
    let err = |line: usize, msg: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "lead,threshold,metric,value")) => {}
        Some((_, h)) => return Err(err(1, format!("unexpected header {h:?}"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut sums: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    let mut max_lead = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(line_no, format!("expected 4 fields, found {}", f.len())));
        }
        let lead: usize = f[0]
            .parse()
            .ok()
            .filter(|&l| l > 0)
            .ok_or_else(|| err(line_no, format!("invalid lead {:?}", f[0])))?;
        if f[1] != "all" && f[1].parse::<f64>().is_err() {
            return Err(err(line_no, format!("invalid threshold {:?}", f[1])));
        }
        if !METRICS.contains(&f[2]) {
            return Err(err(line_no, format!("unknown metric {:?}", f[2])));
        }
        max_lead = max_lead.max(lead);
        let entry = sums.entry((f[2].to_string(), lead)).or_insert((0.0, 0));
        if f[3] == "NA" {
            continue;
        }
        let v: f64 = f[3]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err(line_no, format!("invalid value {:?}", f[3])))?;
        entry.0 += v;
        entry.1 += 1;
    }
    if max_lead == 0 {
        return Err(err(2, "no data rows".into()));
    }
    let mut curves = Curves::new();
    for ((metric, lead), (sum, n)) in sums {
        let c = curves.entry(metric).or_insert_with(|| vec![None; max_lead]);
        if n > 0 {
            c[lead - 1] = Some(sum / n as f64);
        }
    }
    Ok(curves)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 45.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per labelled series. The output depends only on the inputs.
pub fn render_svg(metric: &str, series: &[(String, Curves)]) -> String {
    let curves: Vec<(&str, &[Option<f64>])> = series
        .iter()
        .map(|(l, c)| (l.as_str(), c.get(metric).map_or(&[][..], |v| v.as_slice())))
        .collect();
    let leads = curves.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(1);
    let values: Vec<f64> = curves.iter().flat_map(|(_, v)| v.iter().flatten().copied()).collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if metric != "mse" {
        lo = lo.min(0.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x = |lead: usize| LEFT + if leads > 1 { (lead - 1) as f64 / (leads - 1) as f64 * pw } else { pw / 2.0 };
    let y = |v: f64| TOP + (1.0 - (v - lo) / (hi - lo)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{} by lead time</text>"#, LEFT + pw / 2.0, esc(metric));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, yy + 4.0, fmt_tick(v));
    }
    let step = leads.div_ceil(10).max(1);
    for lead in (1..=leads).filter(|l| (l - 1) % step == 0 || *l == leads) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{lead}</text>"#, x(lead), TOP + ph + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">lead (frames)</text>"#, LEFT + pw / 2.0, H - 8.0);
    for (i, (label, vals)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter_map(|(l, v)| v.map(|v| format!("{:.2},{:.2}", x(l + 1), y(v))))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, esc(label));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}
