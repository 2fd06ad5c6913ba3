//! Deterministic SVG charts from the harness CSV files.
//!
//! Line charts accept a sweep data file, a sweep summary file or a capacity
//! file: one solid line per series with a shaded ±1 std band, and the
//! closed-form truth (or capacity reference) as a dashed line. Scatter
//! charts draw a constellation file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Scatter,
}

impl FromStr for PlotKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(PlotKind::Line),
            "scatter" => Ok(PlotKind::Scatter),
            other => Err(HarnessError::Config(format!("plot kind must be line or scatter, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x, y, band half-width)` sorted by x.
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Chart {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed reference curves.
    pub references: Vec<Series>,
    /// Scatter groups; each point is `(x, y)`.
    pub scatter: Vec<(String, Vec<(f64, f64)>)>,
}

struct Table {
    path: std::path::PathBuf,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::csv(path, e))?;
        let header = r
            .headers()
            .map_err(|e| HarnessError::csv(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::csv(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn has(&self, column: &str) -> bool {
        self.header.iter().any(|h| h == column)
    }

    fn col(&self, column: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| HarnessError::MissingColumn {
                path: self.path.clone(),
                column: column.to_string(),
            })
    }

    fn text<'a>(&self, row: &'a csv::StringRecord, col: usize) -> &'a str {
        row.get(col).unwrap_or("")
    }

    fn num(&self, row: &csv::StringRecord, col: usize) -> Result<f64> {
        let s = self.text(row, col);
        s.parse().map_err(|_| HarnessError::BadData {
            path: self.path.clone(),
            msg: format!("`{s}` in column `{}` is not a number", self.header[col]),
        })
    }

    fn opt_num(&self, row: &csv::StringRecord, col: usize) -> Result<Option<f64>> {
        if self.text(row, col).is_empty() {
            Ok(None)
        } else {
            self.num(row, col).map(Some)
        }
    }
}

/// `(x, values, eval stds)` for one x position.
type Column = (f64, Vec<f64>, Vec<f64>);

/// Values collected per (series, x) before averaging.
#[derive(Default)]
struct Groups {
    order: Vec<String>,
    data: HashMap<String, Vec<Column>>,
}

impl Groups {
    /// Adds one observation `y` with an optional spread to `series` at `x`.
    fn add(&mut self, series: &str, x: f64, y: f64, spread: Option<f64>) {
        if !self.data.contains_key(series) {
            self.order.push(series.to_string());
        }
        let points = self.data.entry(series.to_string()).or_default();
        let idx = match points.iter().position(|p| p.0 == x) {
            Some(i) => i,
            None => {
                points.push((x, Vec::new(), Vec::new()));
                points.len() - 1
            }
        };
        points[idx].1.push(y);
        points[idx].2.extend(spread);
    }

    /// Mean per x; the band is the spread across observations when there
    /// are several, otherwise the mean recorded spread.
    fn finish(self) -> Vec<Series> {
        let Groups { order, mut data } = self;
        order
            .into_iter()
            .map(|label| {
                let mut points: Vec<(f64, f64, f64)> = data
                    .remove(&label)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(x, ys, spreads)| {
                        let n = ys.len() as f64;
                        let mean = ys.iter().sum::<f64>() / n;
                        let band = if ys.len() > 1 {
                            (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                        } else if spreads.is_empty() {
                            0.0
                        } else {
                            spreads.iter().sum::<f64>() / spreads.len() as f64
                        };
                        (x, mean, band)
                    })
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { label, points }
            })
            .collect()
    }
}

fn series_label(t: &Table, row: &csv::StringRecord) -> Result<String> {
    let mut label = t.text(row, t.col("estimator")?).to_string();
    for p in ["alpha", "tau"] {
        if t.has(p) {
            let v = t.text(row, t.col(p)?);
            if !v.is_empty() {
                let _ = write!(label, " {p}={v}");
            }
        }
    }
    Ok(label)
}

/// Grid x coordinate: SNR when present, otherwise rho.
fn grid_x(t: &Table, row: &csv::StringRecord) -> Result<(f64, &'static str)> {
    match t.opt_num(row, t.col("snr_db")?)? {
        Some(s) => Ok((s, "SNR (dB)")),
        None => Ok((t.num(row, t.col("rho")?)?, "rho")),
    }
}

fn line_chart(t: &Table) -> Result<Chart> {
    let mut g = Groups::default();
    let mut truth = Groups::default();
    let mut x_label = "SNR (dB)";
    let y_label;
    if t.has("tilde_nats") || t.has("reference_nats") {
        let (h, ts, hs, tss, reference) = (
            t.col("hat_nats")?,
            t.col("tilde_nats")?,
            t.col("hat_std_nats")?,
            t.col("tilde_std_nats")?,
            t.col("reference_nats")?,
        );
        let snr = t.col("snr_db")?;
        let psk = if t.has("psk_nats") { Some(t.col("psk_nats")?) } else { None };
        for row in &t.rows {
            let x = t.num(row, snr)?;
            g.add("hat", x, t.num(row, h)?, Some(t.num(row, hs)?));
            g.add("tilde", x, t.num(row, ts)?, Some(t.num(row, tss)?));
            truth.add("log(1+SNR)", x, t.num(row, reference)?, None);
            if let Some(p) = psk.map(|c| t.opt_num(row, c)).transpose()?.flatten() {
                truth.add("psk", x, p, None);
            }
        }
        y_label = "capacity (nats)";
    } else if t.has("mean_nats") {
        let (m, s, e, tr, reps) = (
            t.col("mean_nats")?,
            t.col("std_nats")?,
            t.col("mean_eval_std_nats")?,
            t.col("truth_nats")?,
            t.col("repeats")?,
        );
        for row in &t.rows {
            let (x, label) = grid_x(t, row)?;
            x_label = label;
            let spread = if t.num(row, reps)? > 1.0 { t.num(row, s)? } else { t.num(row, e)? };
            g.add(&series_label(t, row)?, x, t.num(row, m)?, Some(spread));
            truth.add("truth", x, t.num(row, tr)?, None);
        }
        y_label = "MI (nats)";
    } else {
        let (est, std, tr) = (t.col("estimate_nats")?, t.col("eval_std_nats")?, t.col("truth_nats")?);
        for row in &t.rows {
            let (x, label) = grid_x(t, row)?;
            x_label = label;
            g.add(&series_label(t, row)?, x, t.num(row, est)?, Some(t.num(row, std)?));
            truth.add("truth", x, t.num(row, tr)?, None);
        }
        y_label = "MI (nats)";
    }
    let mut references = truth.finish();
    for r in &mut references {
        for p in &mut r.points {
            p.2 = 0.0;
        }
    }
    Ok(Chart {
        x_label: x_label.to_string(),
        y_label: y_label.to_string(),
        series: g.finish(),
        references,
        scatter: Vec::new(),
    })
}

fn scatter_chart(t: &Table) -> Result<Chart> {
    let (k, re, im) = (t.col("kind")?, t.col("re")?, t.col("im")?);
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in &t.rows {
        let kind = t.text(row, k);
        let p = (t.num(row, re)?, t.num(row, im)?);
        match groups.iter_mut().find(|g| g.0 == kind) {
            Some(g) => g.1.push(p),
            None => groups.push((kind.to_string(), vec![p])),
        }
    }
    // Outputs first so the inputs are drawn on top.
    groups.sort_by_key(|g| if g.0 == "x" { 1 } else { 0 });
    Ok(Chart {
        x_label: "in-phase".into(),
        y_label: "quadrature".into(),
        scatter: groups,
        ..Chart::default()
    })
}

/// Reads `csv` and builds the chart without touching the filesystem
/// further.
pub fn build_chart(csv: &Path, kind: PlotKind) -> Result<Chart> {
    let t = Table::read(csv)?;
    if t.rows.is_empty() {
        return Err(HarnessError::EmptyData(csv.to_path_buf()));
    }
    match kind {
        PlotKind::Line => line_chart(&t),
        PlotKind::Scatter => scatter_chart(&t),
    }
}

/// Renders `csv` as an SVG at `out`. Nothing is written on error.
pub fn write_plot(csv: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    let svg = render(&build_chart(csv, kind)?);
    std::fs::write(out, svg).map_err(|e| HarnessError::io(out, e))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn frame(chart: &Chart) -> Frame {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in chart.series.iter().chain(&chart.references) {
        for &(x, y, b) in &s.points {
            xs.push(x);
            ys.extend([y - b, y + b]);
        }
    }
    for (_, pts) in &chart.scatter {
        for &(x, y) in pts {
            xs.push(x);
            ys.push(y);
        }
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        padded(lo, hi)
    };
    Frame {
        x: range(&xs),
        y: range(&ys),
    }
}

fn polyline_points(f: &Frame, pts: impl Iterator<Item = (f64, f64)>) -> String {
    pts.map(|(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(chart: &Chart) -> String {
    let f = frame(chart);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let (px, py) = (f.px(xv), f.py(yv));
        let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{:.2}" stroke="#888"/>"##, y1 + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#, y1 + 16.0);
        let _ = writeln!(s, r##"<line x1="{:.2}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="#888"/>"##, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, x0 - 6.0, py + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(&chart.y_label)
    );

    let mut legend = Vec::new();
    for (i, series) in chart.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if series.points.iter().any(|p| p.2 > 0.0) {
            let upper = series.points.iter().map(|p| (p.0, p.1 + p.2));
            let lower = series.points.iter().rev().map(|p| (p.0, p.1 - p.2));
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                polyline_points(&f, upper.chain(lower))
            );
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            polyline_points(&f, series.points.iter().map(|p| (p.0, p.1)))
        );
        legend.push((series.label.as_str(), color, false));
    }
    for (i, r) in chart.references.iter().enumerate() {
        let color = if i == 0 { "black" } else { "#666" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
            polyline_points(&f, r.points.iter().map(|p| (p.0, p.1)))
        );
        legend.push((r.label.as_str(), color, true));
    }
    for (i, (label, pts)) in chart.scatter.iter().enumerate() {
        let (color, radius, opacity) = if label == "x" {
            ("#d62728", 3.0, 1.0)
        } else {
            (COLORS[i % COLORS.len()], 1.5, 0.35)
        };
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}" fill-opacity="{opacity}"/>"#,
                f.px(x),
                f.py(y)
            );
        }
        legend.push((label.as_str(), color, false));
    }
    for (i, (label, color, dashed)) in legend.into_iter().enumerate() {
        let y = TOP + 12.0 + 16.0 * i as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, y + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}
