//! Static dashboard rendering and CSV export of tracking logs.
//!
//! The SVG output is a pure function of the events: no timestamps, fixed panel
//! order, fixed number formatting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::log::TrackEvent;
use crate::quantities::{Hist1d, Hist2d, QuantityValue};
use crate::runner::Instrument;

pub const DEFAULT_LAST_FRACTION: f64 = 0.1;

const WIDTH: f64 = 1200.0;
const HEIGHT: f64 = 1060.0;
const MARGIN: f64 = 20.0;
const PANEL_W: f64 = (WIDTH - 4.0 * MARGIN) / 3.0;
const PANEL_H: f64 = 260.0;
const STRIP_H: f64 = 150.0;
const TITLE_H: f64 = 40.0;

const PALETTE: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PanelKind {
    AlphaDistribution,
    Distances,
    GradNorm,
    GradientTests,
    Hist1d,
    Hist2d,
    HessMaxEv,
    HessTrace,
    TicDiag,
    Loss,
    LearningRate,
}

/// A panel's title, the quantities it draws, and its position.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelSpec {
    pub title: &'static str,
    pub quantities: &'static [&'static str],
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    kind: PanelKind,
}

/// Three columns of three panels plus a bottom strip for loss and learning rate.
pub fn dashboard_spec() -> Vec<PanelSpec> {
    use PanelKind::*;
    let grid: [[(&'static str, &'static [&'static str], PanelKind); 3]; 3] = [
        [
            ("Alpha distribution", &["Alpha"], AlphaDistribution),
            ("Distance / update size", &["Distance", "UpdateSize"], Distances),
            ("Gradient norm", &["GradNorm"], GradNorm),
        ],
        [
            (
                "Gradient tests",
                &["NormTest", "InnerTest", "OrthoTest"],
                GradientTests,
            ),
            ("Gradient elements", &["GradHist1d"], Hist1d),
            ("Parameters vs gradients", &["GradHist2d"], Hist2d),
        ],
        [
            ("Max Hessian eigenvalue", &["HessMaxEV"], HessMaxEv),
            ("Hessian trace", &["HessTrace"], HessTrace),
            ("TIC (diagonal)", &["TICDiag"], TicDiag),
        ],
    ];
    let mut panels = Vec::new();
    for (col, column) in grid.iter().enumerate() {
        for (row, &(title, quantities, kind)) in column.iter().enumerate() {
            panels.push(PanelSpec {
                title,
                quantities,
                x: MARGIN + col as f64 * (PANEL_W + MARGIN),
                y: TITLE_H + row as f64 * (PANEL_H + MARGIN),
                w: PANEL_W,
                h: PANEL_H,
                kind,
            });
        }
    }
    let strip_y = TITLE_H + 3.0 * (PANEL_H + MARGIN);
    let strip_w = (WIDTH - 3.0 * MARGIN) / 2.0;
    panels.push(PanelSpec {
        title: "Loss",
        quantities: &["Loss"],
        x: MARGIN,
        y: strip_y,
        w: strip_w,
        h: STRIP_H,
        kind: Loss,
    });
    panels.push(PanelSpec {
        title: "Learning rate",
        quantities: &["LearningRate"],
        x: 2.0 * MARGIN + strip_w,
        y: strip_y,
        w: strip_w,
        h: STRIP_H,
        kind: LearningRate,
    });
    panels
}

/// Alpha values split into the early part of training and the last `fraction` of
/// the events that carry an Alpha reading. NaN readings are dropped after splitting.
pub fn alpha_split(events: &[TrackEvent], fraction: f64) -> (Vec<f64>, Vec<f64>) {
    let alphas: Vec<f64> = events.iter().filter_map(|e| e.scalar("Alpha")).collect();
    let n = alphas.len();
    let last = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let (early, late) = alphas.split_at(n - last.min(n));
    let keep = |v: &[f64]| v.iter().copied().filter(|a| !a.is_nan()).collect();
    (keep(early), keep(late))
}

/// True for names the dashboard and exporter know about.
pub fn is_known_quantity(name: &str) -> bool {
    let base = name.split('.').next().unwrap_or(name);
    let known = name.parse::<Instrument>().is_ok();
    known || (name.contains('.') && matches!(base, "GradHist1d" | "GradHist2d"))
}

/// Warnings about quantities the renderer skips.
pub fn unknown_quantities(events: &[TrackEvent]) -> Vec<String> {
    let names: BTreeSet<&str> = events
        .iter()
        .flat_map(|e| e.quantities.keys().map(String::as_str))
        .filter(|n| !is_known_quantity(n))
        .collect();
    names
        .into_iter()
        .map(|n| format!("skipping unknown quantity {n:?}"))
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    out: String,
}

impl Canvas {
    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, extra: &str) {
        let _ = writeln!(
            self.out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"{extra}/>"#
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str) {
        if points.is_empty() {
            return;
        }
        let mut p = String::new();
        for (i, (x, y)) in points.iter().enumerate() {
            if i > 0 {
                p.push(' ');
            }
            let _ = write!(p, "{x:.2},{y:.2}");
        }
        let _ = writeln!(
            self.out,
            r#"<polyline points="{p}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
    }
}

/// Plot area inside a panel, below its title.
#[derive(Clone, Copy)]
struct Area {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Area {
    fn of(p: &PanelSpec) -> Self {
        Self {
            x: p.x + 50.0,
            y: p.y + 28.0,
            w: p.w - 62.0,
            h: p.h - 52.0,
        }
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        Some((lo - pad, hi + pad))
    } else {
        Some((lo, hi))
    }
}

fn axes(c: &mut Canvas, a: Area, x: (f64, f64), y: (f64, f64)) {
    c.rect(a.x, a.y, a.w, a.h, "none", r##" stroke="#888""##);
    c.text(a.x - 4.0, a.y + 8.0, 9.0, "end", &fmt_num(y.1));
    c.text(a.x - 4.0, a.y + a.h, 9.0, "end", &fmt_num(y.0));
    c.text(a.x, a.y + a.h + 12.0, 9.0, "start", &fmt_num(x.0));
    c.text(a.x + a.w, a.y + a.h + 12.0, 9.0, "end", &fmt_num(x.1));
}

fn project(a: Area, x: (f64, f64), y: (f64, f64), px: f64, py: f64) -> (f64, f64) {
    (
        a.x + (px - x.0) / (x.1 - x.0) * a.w,
        a.y + a.h - (py - y.0) / (y.1 - y.0) * a.h,
    )
}

fn series(events: &[TrackEvent], name: &str) -> Vec<(f64, f64)> {
    events
        .iter()
        .filter_map(|e| e.scalar(name).map(|v| (e.iteration as f64, v)))
        .filter(|(_, v)| v.is_finite())
        .collect()
}

fn line_panel(c: &mut Canvas, p: &PanelSpec, events: &[TrackEvent]) -> bool {
    let lines: Vec<(&str, Vec<(f64, f64)>)> = p
        .quantities
        .iter()
        .map(|&q| (q, series(events, q)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    if lines.is_empty() {
        return false;
    }
    let all = || lines.iter().flat_map(|(_, s)| s.iter());
    let x = range_of(all().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let y = range_of(all().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let a = Area::of(p);
    axes(c, a, x, y);
    for (i, (name, s)) in lines.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s.iter().map(|&(px, py)| project(a, x, y, px, py)).collect();
        let color = PALETTE[i % PALETTE.len()];
        c.polyline(&pts, color);
        if lines.len() > 1 {
            let _ = writeln!(
                c.out,
                r#"<text x="{:.2}" y="{:.2}" font-size="9" fill="{color}">{name}</text>"#,
                a.x + 4.0,
                a.y + 12.0 + 11.0 * i as f64
            );
        }
    }
    true
}

fn alpha_panel(c: &mut Canvas, p: &PanelSpec, events: &[TrackEvent], fraction: f64) -> bool {
    if !events.iter().any(|e| e.quantities.contains_key("Alpha")) {
        return false;
    }
    let (early, late) = alpha_split(events, fraction);
    let bins = 40;
    let count = |v: &[f64]| {
        let mut h = vec![0u64; bins];
        for a in v {
            let i = ((a + 2.0) / 4.0 * bins as f64).floor().clamp(0.0, (bins - 1) as f64);
            h[i as usize] += 1;
        }
        h
    };
    let (he, hl) = (count(&early), count(&late));
    let norm = |h: &[u64]| {
        let t: u64 = h.iter().sum();
        h.iter()
            .map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect::<Vec<f64>>()
    };
    let (de, dl) = (norm(&he), norm(&hl));
    let top = de.iter().chain(&dl).copied().fold(0.0, f64::max).max(1e-12);
    let a = Area::of(p);
    axes(c, a, (-2.0, 2.0), (0.0, top));
    let bw = a.w / bins as f64;
    for (i, (e, l)) in de.iter().zip(&dl).enumerate() {
        let x0 = a.x + i as f64 * bw;
        let he = e / top * a.h;
        let hl = l / top * a.h;
        c.rect(x0, a.y + a.h - he, bw * 0.5, he, PALETTE[0], "");
        c.rect(x0 + bw * 0.5, a.y + a.h - hl, bw * 0.5, hl, PALETTE[1], "");
    }
    let zero = a.x + a.w / 2.0;
    let _ = writeln!(
        c.out,
        r##"<line x1="{zero:.2}" y1="{:.2}" x2="{zero:.2}" y2="{:.2}" stroke="#444" stroke-dasharray="3,3"/>"##,
        a.y,
        a.y + a.h
    );
    let legend = format!("early {} / last {}", early.len(), late.len());
    c.text(a.x + a.w - 4.0, a.y + 12.0, 9.0, "end", &legend);
    true
}

fn last_value<'a>(events: &'a [TrackEvent], name: &str) -> Option<&'a QuantityValue> {
    events
        .iter()
        .rev()
        .find_map(|e| e.quantities.get(name).map(|r| &r.value))
}

fn hist1d_panel(c: &mut Canvas, p: &PanelSpec, h: &Hist1d) {
    let a = Area::of(p);
    let lo = *h.edges.first().unwrap_or(&-1.0);
    let hi = *h.edges.last().unwrap_or(&1.0);
    let logs: Vec<f64> = h.counts.iter().map(|&c| (c as f64 + 1.0).log10()).collect();
    let top = logs.iter().copied().fold(0.0, f64::max).max(1e-12);
    axes(c, a, (lo, hi), (0.0, top));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for (i, l) in logs.iter().enumerate() {
        let x0 = a.x + (h.edges[i] - lo) / span * a.w;
        let x1 = a.x + (h.edges[i + 1] - lo) / span * a.w;
        let hh = l / top * a.h;
        c.rect(x0, a.y + a.h - hh, (x1 - x0).max(0.0), hh, PALETTE[0], "");
    }
    c.text(a.x + 4.0, a.y + 12.0, 9.0, "start", "log10(count + 1)");
}

fn hist2d_panel(c: &mut Canvas, p: &PanelSpec, h: &Hist2d) {
    let a = Area::of(p);
    let (nx, ny) = (h.x_bins(), h.y_bins());
    let x = (h.x_edges[0], h.x_edges[nx]);
    let y = (h.y_edges[0], h.y_edges[ny]);
    axes(c, a, x, y);
    let top = h
        .counts
        .iter()
        .map(|&c| (c as f64 + 1.0).ln())
        .fold(0.0, f64::max)
        .max(1e-12);
    let (cw, ch) = (a.w / nx as f64, a.h / ny as f64);
    for i in 0..nx {
        for j in 0..ny {
            let n = h.count(i, j);
            if n == 0 {
                continue;
            }
            let shade = 235.0 - 200.0 * (n as f64 + 1.0).ln() / top;
            let g = shade.round() as u8;
            let fill = format!("#{g:02x}{g:02x}ff");
            c.rect(
                a.x + i as f64 * cw,
                a.y + a.h - (j + 1) as f64 * ch,
                cw,
                ch,
                &fill,
                "",
            );
        }
    }
}

fn placeholder(c: &mut Canvas, p: &PanelSpec) {
    let a = Area::of(p);
    c.rect(a.x, a.y, a.w, a.h, "#f4f4f4", r##" stroke="#bbb" stroke-dasharray="4,3""##);
    c.text(
        a.x + a.w / 2.0,
        a.y + a.h / 2.0,
        13.0,
        "middle",
        &format!("not tracked: {}", p.quantities.join(", ")),
    );
}

/// The dashboard as an SVG 1.1 document.
pub fn render_svg(events: &[TrackEvent], last_fraction: f64) -> String {
    let mut c = Canvas { out: String::new() };
    let _ = writeln!(
        c.out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    c.rect(0.0, 0.0, WIDTH, HEIGHT, "white", "");
    let last_iteration = events.last().map_or(0, |e| e.iteration);
    c.text(
        MARGIN,
        26.0,
        16.0,
        "start",
        &format!("Training dashboard: {} events, last iteration {last_iteration}", events.len()),
    );
    for p in dashboard_spec() {
        let bottom = matches!(p.kind, PanelKind::Loss | PanelKind::LearningRate);
        let frame = if bottom { "#eeeeee" } else { "#ffffff" };
        let _ = writeln!(c.out, r#"<g id="panel-{}">"#, p.quantities[0]);
        c.rect(p.x, p.y, p.w, p.h, frame, r##" stroke="#ccc""##);
        c.text(p.x + 8.0, p.y + 17.0, 12.0, "start", p.title);
        let drawn = match p.kind {
            PanelKind::AlphaDistribution => alpha_panel(&mut c, &p, events, last_fraction),
            PanelKind::Hist1d => match last_value(events, "GradHist1d") {
                Some(QuantityValue::Hist1d(h)) => {
                    hist1d_panel(&mut c, &p, h);
                    true
                }
                _ => false,
            },
            PanelKind::Hist2d => match last_value(events, "GradHist2d") {
                Some(QuantityValue::Hist2d(h)) if h.x_bins() > 0 && h.y_bins() > 0 => {
                    hist2d_panel(&mut c, &p, h);
                    true
                }
                _ => false,
            },
            _ => line_panel(&mut c, &p, events),
        };
        if !drawn {
            placeholder(&mut c, &p);
        }
        c.out.push_str("</g>\n");
    }
    c.out.push_str("</svg>\n");
    c.out
}

fn csv_float(v: f64) -> String {
    format!("{v:?}")
}

/// Parses a float written by the CSV exporter.
pub fn parse_csv_float(s: &str) -> Option<f64> {
    match s {
        "NaN" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn sidecar_path(main: &Path, name: &str) -> PathBuf {
    let stem = main.file_stem().and_then(|s| s.to_str()).unwrap_or("export");
    main.with_file_name(format!("{stem}.{name}.csv"))
}

/// Writes one row per event with a column per scalar quantity, plus one sidecar
/// file per vector or histogram quantity. Returns the sidecar paths.
pub fn export_csv(events: &[TrackEvent], path: &Path) -> Result<Vec<PathBuf>> {
    let mut scalars = BTreeSet::new();
    let mut others: BTreeMap<&str, &'static str> = BTreeMap::new();
    for e in events {
        for (name, r) in &e.quantities {
            if !is_known_quantity(name) {
                continue;
            }
            match r.value {
                QuantityValue::Scalar(_) => {
                    scalars.insert(name.as_str());
                }
                ref v => {
                    others.insert(name.as_str(), v.kind());
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string(), "time_s".to_string()];
    header.extend(scalars.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for e in events {
        let mut row = vec![e.iteration.to_string(), csv_float(e.time_s)];
        for name in &scalars {
            row.push(e.scalar(name).map(csv_float).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut sidecars = Vec::new();
    for (name, kind) in others {
        let side = sidecar_path(path, name);
        let mut w = csv::Writer::from_path(&side)?;
        let header: &[&str] = match kind {
            "vector" => &["iteration", "index", "value"],
            "hist1d" => &["iteration", "bin", "lower", "upper", "count"],
            _ => &[
                "iteration", "x_bin", "y_bin", "x_lower", "x_upper", "y_lower", "y_upper", "count",
            ],
        };
        w.write_record(header)?;
        for e in events {
            let it = e.iteration.to_string();
            match e.quantities.get(name).map(|r| &r.value) {
                Some(QuantityValue::Vector(v)) => {
                    for (i, x) in v.iter().enumerate() {
                        w.write_record([it.clone(), i.to_string(), csv_float(*x)])?;
                    }
                }
                Some(QuantityValue::Hist1d(h)) => {
                    for (i, n) in h.counts.iter().enumerate() {
                        w.write_record([
                            it.clone(),
                            i.to_string(),
                            csv_float(h.edges[i]),
                            csv_float(h.edges[i + 1]),
                            n.to_string(),
                        ])?;
                    }
                }
                Some(QuantityValue::Hist2d(h)) => {
                    for i in 0..h.x_bins() {
                        for j in 0..h.y_bins() {
                            w.write_record([
                                it.clone(),
                                i.to_string(),
                                j.to_string(),
                                csv_float(h.x_edges[i]),
                                csv_float(h.x_edges[i + 1]),
                                csv_float(h.y_edges[j]),
                                csv_float(h.y_edges[j + 1]),
                                h.count(i, j).to_string(),
                            ])?;
                        }
                    }
                }
                _ => {}
            }
        }
        w.flush()?;
        sidecars.push(side);
    }
    Ok(sidecars)
}
