//! Hand-written SVG charts. Output depends only on the input values, so
//! identical input yields identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlotInput {
    /// Evaluation reports. Reports tagged with `eta` become an ablation
    /// curve with one line per `tier` tag; otherwise a grouped bar chart
    /// with one group per environment and one bar per algorithm.
    Reports(Vec<EvalReport>),
    Curves {
        title: String,
        x_label: String,
        y_label: String,
        series: Vec<Series>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    Bars,
    Lines,
}

/// What was drawn, for callers that want to check the layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChartSummary {
    pub kind: ChartKind,
    pub groups: usize,
    pub bars: usize,
    pub lines: usize,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn label_of(r: &EvalReport) -> String {
    r.tags.get("algo").cloned().unwrap_or_else(|| r.policy.clone())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Value drawn for a report: normalized score when every report has one.
fn value_fn(reports: &[EvalReport]) -> (bool, &'static str) {
    if reports.iter().all(|r| r.normalized_score.is_some()) {
        (true, "normalized score")
    } else {
        (false, "joint return")
    }
}

/// Several reports for the same cell (seeds) collapse to mean and spread of
/// their means; a single report keeps its own spread over groups.
fn aggregate(cell: &[&EvalReport], normalized: bool) -> Point {
    let value = |r: &EvalReport| {
        if normalized {
            r.normalized_score.unwrap()
        } else {
            r.mean
        }
    };
    if cell.len() == 1 {
        let r = cell[0];
        let scale = if normalized { value(r) / r.mean } else { 1.0 };
        let std = if scale.is_finite() { r.std * scale.abs() } else { 0.0 };
        return Point {
            x: 0.0,
            mean: value(r),
            std,
        };
    }
    let vals: Vec<f64> = cell.iter().map(|r| value(r)).collect();
    let (mean, std) = mean_std(&vals);
    Point { x: 0.0, mean, std }
}

pub fn emit_plots(input: &PlotInput, out: &Path) -> Result<ChartSummary> {
    let (svg, summary) = render(input)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))?;
    Ok(summary)
}

pub fn render(input: &PlotInput) -> Result<(String, ChartSummary)> {
    match input {
        PlotInput::Reports(reports) => {
            if reports.is_empty() {
                return Err(Error::contract("nothing to plot"));
            }
            if reports.iter().any(|r| r.tags.contains_key("eta")) {
                ablation(reports)
            } else {
                bars(reports)
            }
        }
        PlotInput::Curves {
            title,
            x_label,
            y_label,
            series,
        } => {
            if series.iter().all(|s| s.points.is_empty()) {
                return Err(Error::contract("nothing to plot"));
            }
            lines(title, x_label, y_label, series, false)
        }
    }
}

fn ablation(reports: &[EvalReport]) -> Result<(String, ChartSummary)> {
    let (normalized, y_label) = value_fn(reports);
    let mut cells: BTreeMap<String, Vec<(f64, &EvalReport)>> = BTreeMap::new();
    for r in reports {
        let eta = r
            .tags
            .get("eta")
            .ok_or_else(|| Error::contract("mixed ablation and non-ablation reports"))?;
        let eta: f64 = eta
            .parse()
            .map_err(|_| Error::contract(format!("eta tag {eta:?} is not a number")))?;
        let tier = r.tags.get("tier").cloned().unwrap_or_else(|| label_of(r));
        cells.entry(tier).or_default().push((eta, r));
    }
    let series: Vec<Series> = cells
        .into_iter()
        .map(|(tier, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut points = Vec::new();
            let mut i = 0;
            while i < pts.len() {
                let mut j = i;
                while j < pts.len() && pts[j].0 == pts[i].0 {
                    j += 1;
                }
                let cell: Vec<&EvalReport> = pts[i..j].iter().map(|p| p.1).collect();
                points.push(Point {
                    x: pts[i].0,
                    ..aggregate(&cell, normalized)
                });
                i = j;
            }
            Series { label: tier, points }
        })
        .collect();
    let log_x = series.iter().flat_map(|s| &s.points).all(|p| p.x > 0.0);
    lines(
        "eta ablation",
        if log_x { "eta (log scale)" } else { "eta" },
        y_label,
        &series,
        log_x,
    )
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    log_x: bool,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let (x, a, b) = if self.log_x {
            (x.ln(), self.x0.ln(), self.x1.ln())
        } else {
            (x, self.x0, self.x1)
        };
        let span = if b > a { b - a } else { 1.0 };
        LEFT + (x - a) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - BOTTOM - (y - self.y0) / span * (H - TOP - BOTTOM)
    }
}

fn y_range(points: impl Iterator<Item = Point>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = if include_zero {
        (0.0, 0.0)
    } else {
        (f64::INFINITY, f64::NEG_INFINITY)
    };
    for p in points {
        if p.mean.is_finite() {
            let s = if p.std.is_finite() { p.std } else { 0.0 };
            lo = lo.min(p.mean - s);
            hi = hi.max(p.mean + s);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(svg: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        svg,
        r#"<path d="M{l:.1} {t:.1}V{b:.1}H{r:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let py = f.py(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{l:.1}" y1="{py:.1}" x2="{r:.1}" y2="{py:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.1}</text>"##,
            l - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (t + b) / 2.0,
        escape(y_label)
    );
}

fn legend(svg: &mut String, labels: &[String]) {
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 14.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            color(i),
            x + 18.0,
            y,
            escape(label)
        );
    }
}

fn whisker(svg: &mut String, f: &Frame, x: f64, p: Point) {
    if !(p.std > 0.0 && p.std.is_finite()) {
        return;
    }
    let (lo, hi) = (f.py(p.mean - p.std), f.py(p.mean + p.std));
    let _ = writeln!(
        svg,
        r#"<path d="M{x:.1} {lo:.1}V{hi:.1}M{:.1} {lo:.1}H{:.1}M{:.1} {hi:.1}H{:.1}" stroke="black" fill="none"/>"#,
        x - 4.0,
        x + 4.0,
        x - 4.0,
        x + 4.0
    );
}

fn bars(reports: &[EvalReport]) -> Result<(String, ChartSummary)> {
    let (normalized, y_label) = value_fn(reports);
    let mut envs: Vec<String> = reports.iter().map(|r| r.env_id.clone()).collect();
    envs.sort();
    envs.dedup();
    let mut algos: Vec<String> = reports.iter().map(label_of).collect();
    algos.sort();
    algos.dedup();

    let mut cells: BTreeMap<(usize, usize), Point> = BTreeMap::new();
    for (gi, env) in envs.iter().enumerate() {
        for (bi, algo) in algos.iter().enumerate() {
            let cell: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| &r.env_id == env && &label_of(r) == algo)
                .collect();
            if !cell.is_empty() {
                cells.insert((gi, bi), aggregate(&cell, normalized));
            }
        }
    }
    let (y0, y1) = y_range(cells.values().copied(), true);
    let f = Frame {
        x0: 0.0,
        x1: envs.len() as f64,
        y0,
        y1,
        log_x: false,
    };
    let mut svg = String::new();
    header(&mut svg, "evaluation");
    axes(&mut svg, &f, "environment", y_label);
    let slot = 0.8 / algos.len() as f64;
    for ((gi, bi), p) in &cells {
        let xl = f.px(*gi as f64 + 0.1 + slot * *bi as f64);
        let xr = f.px(*gi as f64 + 0.1 + slot * (*bi + 1) as f64);
        let (top, base) = (f.py(p.mean.max(0.0)), f.py(p.mean.min(0.0)));
        let _ = writeln!(
            svg,
            r#"<rect x="{xl:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            (xr - xl - 2.0).max(1.0),
            (base - top).max(0.5),
            color(*bi)
        );
        whisker(&mut svg, &f, (xl + xr - 2.0) / 2.0, *p);
    }
    for (gi, env) in envs.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(gi as f64 + 0.5),
            H - BOTTOM + 18.0,
            escape(env)
        );
    }
    legend(&mut svg, &algos);
    svg.push_str("</svg>\n");
    Ok((
        svg,
        ChartSummary {
            kind: ChartKind::Bars,
            groups: envs.len(),
            bars: cells.len(),
            lines: 0,
        },
    ))
}

fn lines(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> Result<(String, ChartSummary)> {
    let xs = series
        .iter()
        .flat_map(|s| &s.points)
        .map(|p| p.x)
        .filter(|x| x.is_finite());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = y_range(series.iter().flat_map(|s| s.points.iter().copied()), false);
    let f = Frame { x0, x1, y0, y1, log_x };
    let mut svg = String::new();
    header(&mut svg, title);
    axes(&mut svg, &f, x_label, y_label);
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| &s.points).map(|p| p.x).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    if ticks.len() <= 8 {
        for x in ticks {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
                f.px(x),
                H - BOTTOM + 18.0
            );
        }
    } else {
        for (x, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{x}</text>"#,
                f.px(x),
                H - BOTTOM + 18.0
            );
        }
    }
    let mut drawn = 0;
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<&Point> = s
            .points
            .iter()
            .filter(|p| p.mean.is_finite() && p.x.is_finite())
            .collect();
        if pts.is_empty() {
            continue;
        }
        drawn += 1;
        let mut d = String::new();
        for (j, p) in pts.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.1} {:.1}",
                if j == 0 { "M" } else { "L" },
                f.px(p.x),
                f.py(p.mean)
            );
        }
        let _ = writeln!(
            svg,
            r#"<path d="{d}" fill="none" stroke="{}" stroke-width="2"/>"#,
            color(i)
        );
        for p in pts {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
                f.px(p.x),
                f.py(p.mean),
                color(i)
            );
            whisker(&mut svg, &f, f.px(p.x), *p);
        }
    }
    let labels: Vec<String> = series.iter().map(|s| s.label.clone()).collect();
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    Ok((
        svg,
        ChartSummary {
            kind: ChartKind::Lines,
            groups: 0,
            bars: 0,
            lines: drawn,
        },
    ))
}
