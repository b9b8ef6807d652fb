//! Trend plots of a results table as self-contained SVG.
//!
//! Each method is one series: the across-seed mean at every x value, joined
//! by a line, with a shaded normal-approximation 95% band
//! `mean ± 1.96·sd/√seeds`. The band is left out wherever a point has a
//! single seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::experiment::ResultRow;
use crate::policy::Method;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    /// CF metric against training sample size, at one delta.
    CfVsN,
    /// Mean return against CF metric, one point per sample size, at one delta.
    ReturnVsCf,
    /// CF metric against delta, at one sample size.
    CfVsDelta,
}

impl Panel {
    pub const ALL: [Panel; 3] = [Panel::CfVsN, Panel::ReturnVsCf, Panel::CfVsDelta];

    pub fn name(&self) -> &'static str {
        match self {
            Panel::CfVsN => "cf_vs_n",
            Panel::ReturnVsCf => "return_vs_cf",
            Panel::CfVsDelta => "cf_vs_delta",
        }
    }
}

impl std::str::FromStr for Panel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Panel::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown panel `{s}` (expected cf_vs_n, return_vs_cf or cf_vs_delta)")))
    }
}

/// Mean and 95% half-width of a sample; the half-width is `None` for one value.
fn summarize(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(1.96 * (var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub y: f64,
    /// Half-widths of the 95% band along each axis.
    pub x_ci: Option<f64>,
    pub y_ci: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub method: Method,
    pub points: Vec<SeriesPoint>,
}

/// The delta (or N) at which the other axis was swept most widely.
fn densest<K: Ord + Copy, V: Ord>(rows: &[ResultRow], key: impl Fn(&ResultRow) -> K, other: impl Fn(&ResultRow) -> V) -> Option<K> {
    let mut spread: BTreeMap<K, std::collections::BTreeSet<V>> = BTreeMap::new();
    for r in rows {
        spread.entry(key(r)).or_default().insert(other(r));
    }
    // Ties go to the key seen first in the table.
    let best = spread.values().map(|s| s.len()).max()?;
    rows.iter().map(&key).find(|k| spread[k].len() == best)
}

fn ordered_f64(x: f64) -> i64 {
    let bits = x.to_bits() as i64;
    if bits < 0 { bits ^ i64::MAX } else { bits }
}

/// Aggregates `rows` into per-method series for `panel`.
pub fn panel_series(rows: &[ResultRow], panel: Panel) -> Result<Vec<Series>> {
    if rows.is_empty() {
        return arg_err("results table is empty");
    }
    if let Some(r) = rows.iter().find(|r| r.env != rows[0].env) {
        return arg_err(format!("table mixes environments {} and {}", rows[0].env, r.env));
    }
    let selected: Vec<&ResultRow> = match panel {
        Panel::CfVsN | Panel::ReturnVsCf => {
            let delta = densest(rows, |r| ordered_f64(r.delta), |r| r.n).expect("nonempty");
            rows.iter().filter(|r| ordered_f64(r.delta) == delta).collect()
        }
        Panel::CfVsDelta => {
            let n = densest(rows, |r| r.n, |r| ordered_f64(r.delta)).expect("nonempty");
            rows.iter().filter(|r| r.n == n).collect()
        }
    };
    let mut groups: BTreeMap<(Method, i64), (f64, Vec<&ResultRow>)> = BTreeMap::new();
    for r in selected {
        let x = match panel {
            Panel::CfVsN | Panel::ReturnVsCf => r.n as f64,
            Panel::CfVsDelta => r.delta,
        };
        groups.entry((r.method, ordered_f64(x))).or_insert((x, Vec::new())).1.push(r);
    }
    let mut series: Vec<Series> = Vec::new();
    for ((method, _), (x, group)) in groups {
        let cf: Vec<f64> = group.iter().map(|r| r.cf_metric).collect();
        let (cf_mean, cf_ci) = summarize(&cf);
        let point = match panel {
            Panel::CfVsN | Panel::CfVsDelta => SeriesPoint { x, y: cf_mean, x_ci: None, y_ci: cf_ci, seeds: group.len() },
            Panel::ReturnVsCf => {
                let ret: Vec<f64> = group.iter().map(|r| r.mean_return).collect();
                let (ret_mean, ret_ci) = summarize(&ret);
                SeriesPoint { x: cf_mean, y: ret_mean, x_ci: cf_ci, y_ci: ret_ci, seeds: group.len() }
            }
        };
        match series.last_mut() {
            Some(s) if s.method == method => s.points.push(point),
            _ => series.push(Series { method, points: vec![point] }),
        }
    }
    Ok(series)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn color(method: Method) -> &'static str {
    match method {
        Method::Ours => "#d62728",
        Method::Full => "#1f77b4",
        Method::Unaware => "#2ca02c",
        Method::Oracle => "#9467bd",
        Method::Random => "#7f7f7f",
        Method::Behavior => "#ff7f0e",
    }
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn render(series: &[Series], panel: Panel) -> String {
    let (title, xlabel, ylabel) = match panel {
        Panel::CfVsN => ("CF metric vs sample size", "N", "CF metric"),
        Panel::ReturnVsCf => ("Discounted return vs CF metric", "CF metric", "mean discounted return"),
        Panel::CfVsDelta => ("CF metric vs attribute strength", "delta", "CF metric"),
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in series.iter().flat_map(|s| &s.points) {
        let (dx, dy) = (p.x_ci.unwrap_or(0.0), p.y_ci.unwrap_or(0.0));
        xs.extend([p.x - dx, p.x + dx]);
        ys.extend([p.y - dy, p.y + dy]);
    }
    let bounds = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5f64.max(lo.abs() * 0.1) };
        (lo - pad, hi + pad)
    };
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#, LEFT + plot_w / 2.0);
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );
    for t in ticks(x0, x1) {
        let x = px(t);
        let _ = writeln!(svg, r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/>"##, TOP + plot_h, TOP + plot_h + 5.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + plot_h + 18.0, label(t));
    }
    for t in ticks(y0, y1) {
        let y = py(t);
        let _ = writeln!(svg, r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#333"/>"##, LEFT - 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 8.0, y + 4.0, label(t));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, LEFT + plot_w / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{ylabel}</text>"#,
        TOP + plot_h / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let c = color(s.method);
        let _ = writeln!(svg, r#"<g class="series" data-method="{}">"#, s.method);
        // Vertical band along the line, where every point has a spread.
        if s.points.len() > 1 && s.points.iter().all(|p| p.y_ci.is_some()) {
            let upper = s.points.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y + p.y_ci.unwrap())));
            let lower = s.points.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y - p.y_ci.unwrap())));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(svg, r#"<polygon class="band" points="{}" fill="{c}" fill-opacity="0.18" stroke="none"/>"#, pts.join(" "));
        } else {
            for p in &s.points {
                if let Some(dy) = p.y_ci {
                    let (x, top, bottom) = (px(p.x), py(p.y + dy), py(p.y - dy));
                    let _ = writeln!(svg, r#"<line class="band" x1="{x:.2}" y1="{top:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="{c}" stroke-opacity="0.5" stroke-width="4"/>"#);
                }
            }
        }
        for p in &s.points {
            if let Some(dx) = p.x_ci {
                let (y, left, right) = (py(p.y), px(p.x - dx), px(p.x + dx));
                let _ = writeln!(svg, r#"<line class="band" x1="{left:.2}" y1="{y:.2}" x2="{right:.2}" y2="{y:.2}" stroke="{c}" stroke-opacity="0.5" stroke-width="2"/>"#);
            }
        }
        if s.points.len() > 1 {
            let pts: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y))).collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        }
        for p in &s.points {
            let _ = writeln!(svg, r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3.5" fill="{c}"/>"#, px(p.x), py(p.y));
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, s.method);
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the SVG for `panel` to `out_svg`.
pub fn plot_trends(rows: &[ResultRow], panel: Panel, out_svg: &Path) -> Result<()> {
    let series = panel_series(rows, panel)?;
    std::fs::write(out_svg, render(&series, panel))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::EnvKind;

    fn row(method: Method, delta: f64, n: usize, seed: usize, cf: f64, ret: f64) -> ResultRow {
        ResultRow { method, env: EnvKind::Linear, delta, n, seed, cf_metric: cf, mean_return: ret, stderr_return: 0.1 }
    }

    #[test]
    fn empty_table_is_an_argument_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(plot_trends(&[], Panel::CfVsN, &dir.path().join("x.svg")), Err(Error::Argument(_))));
    }

    #[test]
    fn single_point_has_marker_and_no_band() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.svg");
        plot_trends(&[row(Method::Ours, 1.0, 100, 0, 0.2, 1.0)], Panel::CfVsN, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("class=\"marker\"").count(), 1);
        assert_eq!(svg.matches("class=\"band\"").count(), 0);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bands_follow_the_normal_approximation() {
        let rows: Vec<ResultRow> = (0..4)
            .flat_map(|k| [100, 200].map(|n| row(Method::Full, 1.0, n, k, 0.1 * k as f64, 0.0)))
            .collect();
        let series = panel_series(&rows, Panel::CfVsN).unwrap();
        assert_eq!(series.len(), 1);
        let p = &series[0].points[0];
        assert!((p.y - 0.15).abs() < 1e-12);
        let sd = (0.05f64 / 3.0).sqrt();
        assert!((p.y_ci.unwrap() - 1.96 * sd / 2.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        plot_trends(&rows, Panel::CfVsN, &dir.path().join("b.svg")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("b.svg")).unwrap();
        assert_eq!(svg.matches("<polygon class=\"band\"").count(), 1);
    }

    #[test]
    fn panels_pick_their_slice_of_a_sweep() {
        let mut rows = Vec::new();
        for n in [100, 500, 1000] {
            rows.push(row(Method::Ours, 1.0, n, 0, 0.1, 1.0));
        }
        for delta in [0.0, 2.0] {
            rows.push(row(Method::Ours, delta, 1000, 0, 0.3, 1.0));
        }
        let by_n = panel_series(&rows, Panel::CfVsN).unwrap();
        assert_eq!(by_n[0].points.iter().map(|p| p.x).collect::<Vec<_>>(), vec![100.0, 500.0, 1000.0]);
        let by_delta = panel_series(&rows, Panel::CfVsDelta).unwrap();
        assert_eq!(by_delta[0].points.iter().map(|p| p.x).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        assert_eq!(panel_series(&rows, Panel::ReturnVsCf).unwrap()[0].points.len(), 3);
        assert!("cf_vs_q".parse::<Panel>().is_err());
    }
}
