//! Static SVG line charts: one mean line per arm with a ±1 std band across
//! seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::metrics::MetricsTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Return,
    Fau,
}

impl PlotKind {
    pub fn column(self) -> &'static str {
        match self {
            PlotKind::Return => "episode_return",
            PlotKind::Fau => "phi_critic",
        }
    }

    fn y_label(self) -> &'static str {
        match self {
            PlotKind::Return => "episode return",
            PlotKind::Fau => "critic FAU",
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "return" => Ok(PlotKind::Return),
            "fau" => Ok(PlotKind::Fau),
            _ => Err(LabError::Config(format!("unknown plot kind '{s}' (return|fau)"))),
        }
    }
}

/// Mean and population std of one arm across its seed files.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Arm label of a metrics file: the file stem up to `_seed`.
pub fn arm_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.rfind("_seed") {
        Some(i) => stem[..i].to_string(),
        None => stem,
    }
}

/// Groups files by arm and averages `column` over the steps every file of
/// the group reports.
pub fn aggregate(paths: &[PathBuf], column: &str) -> Result<Vec<PlotSeries>> {
    if paths.is_empty() {
        return Err(LabError::Config("no metrics files to plot".into()));
    }
    let mut tables = Vec::new();
    for p in paths {
        tables.push((p, MetricsTable::read(p)?));
    }
    let reference = &tables[0].1.header;
    let offenders: Vec<String> = tables
        .iter()
        .filter(|(_, t)| &t.header != reference || t.column_index(column).is_none() || t.column_index("step").is_none())
        .map(|(p, _)| p.display().to_string())
        .collect();
    if !offenders.is_empty() {
        return Err(LabError::Format(format!(
            "metrics files with mismatched columns (need 'step' and '{column}'): {}",
            offenders.join(", ")
        )));
    }
    let mut groups: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    for (p, t) in &tables {
        let series = t.series(column).expect("column checked above");
        groups.entry(arm_label(p)).or_default().push(series);
    }
    let mut out = Vec::new();
    for (label, runs) in groups {
        let mut per_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for run in &runs {
            for &(s, v) in run {
                per_step.entry(s.to_bits()).or_default().push(v);
            }
        }
        let mut rows: Vec<(f64, Vec<f64>)> = per_step
            .into_iter()
            .filter(|(_, v)| v.len() == runs.len())
            .map(|(s, v)| (f64::from_bits(s), v))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut series = PlotSeries {
            label,
            steps: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (s, v) in rows {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            series.steps.push(s);
            series.mean.push(mean);
            series.std.push(var.sqrt());
        }
        out.push(series);
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    (0..)
        .map(|i| start + i as f64 * step)
        .take_while(|&t| t <= hi + step * 1e-9)
        .collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{}k", v / 1000.0)
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders the series as an SVG document. Output bytes depend only on the input.
pub fn render_svg(series: &[PlotSeries], title: &str, y_label: &str) -> String {
    let pts = series.iter().flat_map(|s| {
        s.steps
            .iter()
            .zip(s.mean.iter().zip(&s.std))
            .map(|(&x, (&m, &d))| (x, m - d, m + d))
    });
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, lo, hi) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 16.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y0, y1, 5) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">environment step</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if ser.steps.is_empty() {
            continue;
        }
        let upper = ser.steps.iter().zip(ser.mean.iter().zip(&ser.std)).map(|(&x, (&m, &d))| (x, m + d));
        let lower = ser.steps.iter().zip(ser.mean.iter().zip(&ser.std)).map(|(&x, (&m, &d))| (x, m - d)).rev();
        let band: Vec<String> = upper
            .chain(lower)
            .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = ser
            .steps
            .iter()
            .zip(&ser.mean)
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            line.join(" ")
        );
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Aggregates the files and renders the chart for `kind`.
pub fn plot(paths: &[PathBuf], kind: PlotKind) -> Result<String> {
    let series = aggregate(paths, kind.column())?;
    let title = match kind {
        PlotKind::Return => "Training return",
        PlotKind::Fau => "Fraction of active units (critic)",
    };
    Ok(render_svg(&series, title, kind.y_label()))
}
