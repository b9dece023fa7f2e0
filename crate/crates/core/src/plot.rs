//! Minimal SVG figures: balancing weights over a run, spherical-PCA scatter and
//! sweep curves with error bars.
//!
//! Data points are emitted as `<circle class="point">` and error bars as
//! `<line class="errorbar">`, so figures can be checked by counting elements.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::experiment::SweepRow;
use crate::metrics::read_metrics_csv;
use crate::tta::MetricsRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
/// Allowed deviation of spherical-PCA coordinates from the unit circle.
pub const CIRCLE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Weights,
    Spca,
    Sweep,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(PlotKind::Weights),
            "spca" => Ok(PlotKind::Spca),
            "sweep" => Ok(PlotKind::Sweep),
            _ => Err(Error::Config(format!("unknown plot `{s}` (weights|spca|sweep)"))),
        }
    }
}

/// Linear map from a data box to the drawing area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(svg: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(fx),
            b + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            f.py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(svg: &mut String, entries: &[(String, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 130.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 18.0,
            x + 24.0,
            y + 4.0,
            escape(name)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(svg: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, class: &str) {
    let mut d = String::new();
    for (x, y) in pts {
        let _ = write!(d, "{:.2},{:.2} ", f.px(*x), f.py(*y));
    }
    let _ = writeln!(
        svg,
        r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        d.trim_end()
    );
}

/// `w` and `1/w` against step for each labeled run.
pub fn weights_svg(runs: &[(String, Vec<MetricsRecord>)]) -> String {
    let all = runs.iter().flat_map(|(_, r)| r.iter());
    let xs = all.clone().map(|r| r.step as f64);
    let ys = all.clone().flat_map(|r| [r.w, 1.0 / r.w]);
    let f = Frame::new(xs, ys);
    let mut svg = String::new();
    header(&mut svg, "balancing weights");
    axes(&mut svg, &f, "step", "weight");
    let mut entries = Vec::new();
    for (i, (name, recs)) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let w: Vec<(f64, f64)> = recs.iter().map(|r| (r.step as f64, r.w)).collect();
        let inv: Vec<(f64, f64)> = recs.iter().map(|r| (r.step as f64, 1.0 / r.w)).collect();
        polyline(&mut svg, &f, &w, color, "w");
        let _ = writeln!(svg, r#"<g stroke-dasharray="5 3">"#);
        polyline(&mut svg, &f, &inv, color, "inv_w");
        let _ = writeln!(svg, "</g>");
        entries.push((format!("{name} w (dashed 1/w)"), color));
    }
    legend(&mut svg, &entries);
    svg.push_str("</svg>\n");
    svg
}

/// One projected point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpcaPoint {
    pub set: String,
    pub x: f64,
    pub y: f64,
}

fn parse_f64(field: Option<&str>, line: usize, name: &str) -> Result<f64> {
    field
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("missing column `{name}`"),
        })?
        .trim()
        .parse()
        .map_err(|e| Error::Parse {
            line,
            msg: format!("`{name}`: {e}"),
        })
}

fn csv_rows(text: &str, expected: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        out.push((line, rec));
    }
    Ok(out)
}

/// Parses `set,x,y` rows; every point must lie on the unit circle.
pub fn parse_spca_csv(text: &str) -> Result<Vec<SpcaPoint>> {
    let mut out = Vec::new();
    for (line, rec) in csv_rows(text, &["set", "x", "y"])? {
        let x = parse_f64(rec.get(1), line, "x")?;
        let y = parse_f64(rec.get(2), line, "y")?;
        let r = (x * x + y * y).sqrt();
        if (r - 1.0).abs() > CIRCLE_TOL {
            return Err(Error::Parse {
                line,
                msg: format!("point ({x}, {y}) has radius {r}, expected 1"),
            });
        }
        out.push(SpcaPoint {
            set: rec[0].to_string(),
            x,
            y,
        });
    }
    Ok(out)
}

pub fn spca_svg(points: &[SpcaPoint]) -> String {
    let f = Frame {
        x0: -1.2,
        x1: 1.2,
        y0: -1.2,
        y1: 1.2,
    };
    let mut svg = String::new();
    header(&mut svg, "spherical PCA");
    let r = f.px(1.0) - f.px(0.0);
    let ry = f.py(0.0) - f.py(1.0);
    let _ = writeln!(
        svg,
        r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{r:.2}" ry="{ry:.2}" fill="none" stroke="#999"/>"##,
        f.px(0.0),
        f.py(0.0)
    );
    let mut sets: Vec<&str> = Vec::new();
    for p in points {
        if !sets.contains(&p.set.as_str()) {
            sets.push(&p.set);
        }
    }
    for p in points {
        let i = sets.iter().position(|s| *s == p.set).unwrap_or(0);
        let color = PALETTE[i % PALETTE.len()];
        let size = if p.set == "text" { 5.0 } else { 3.0 };
        let _ = writeln!(
            svg,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="{size}" fill="{color}" fill-opacity="0.7"/>"#,
            f.px(p.x),
            f.py(p.y)
        );
    }
    let entries: Vec<(String, &str)> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), PALETTE[i % PALETTE.len()]))
        .collect();
    legend(&mut svg, &entries);
    svg.push_str("</svg>\n");
    svg
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    csv_rows(text, &["value", "mean", "std"])?
        .into_iter()
        .map(|(line, rec)| {
            Ok(SweepRow {
                value: parse_f64(rec.get(0), line, "value")?,
                mean: parse_f64(rec.get(1), line, "mean")?,
                std: parse_f64(rec.get(2), line, "std")?,
            })
        })
        .collect()
}

pub fn sweep_svg(rows: &[SweepRow], param: &str) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    let xs = sorted.iter().map(|r| r.value);
    let ys = sorted.iter().flat_map(|r| [r.mean - r.std, r.mean + r.std]);
    let f = Frame::new(xs, ys);
    let mut svg = String::new();
    header(&mut svg, &format!("sensitivity to {param}"));
    axes(&mut svg, &f, param, "accuracy");
    let color = PALETTE[0];
    let pts: Vec<(f64, f64)> = sorted.iter().map(|r| (r.value, r.mean)).collect();
    polyline(&mut svg, &f, &pts, color, "mean");
    for r in &sorted {
        let x = f.px(r.value);
        let _ = writeln!(
            svg,
            r#"<line class="errorbar" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
            f.py(r.mean - r.std),
            f.py(r.mean + r.std)
        );
        let _ = writeln!(
            svg,
            r#"<circle class="point" cx="{x:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
            f.py(r.mean)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Renders `kind` from the input CSVs and writes the SVG to `out`.
pub fn plot_files(kind: PlotKind, inputs: &[&Path], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input files".into()));
    }
    let svg = match kind {
        PlotKind::Weights => {
            let runs = inputs
                .iter()
                .map(|p| Ok((p.display().to_string(), read_metrics_csv(p)?)))
                .collect::<Result<Vec<_>>>()?;
            weights_svg(&runs)
        }
        PlotKind::Spca => {
            let mut pts = Vec::new();
            for p in inputs {
                pts.extend(parse_spca_csv(&read_text(p)?)?);
            }
            spca_svg(&pts)
        }
        PlotKind::Sweep => {
            let mut rows = Vec::new();
            for p in inputs {
                rows.extend(parse_sweep_csv(&read_text(p)?)?);
            }
            let param = inputs[0]
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("sweep_"))
                .unwrap_or("value")
                .to_string();
            sweep_svg(&rows, &param)
        }
    };
    write_atomic(out, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(svg: &str, needle: &str) -> usize {
        svg.matches(needle).count()
    }

    fn points_of(svg: &str, class: &str) -> Vec<Vec<(f64, f64)>> {
        svg.lines()
            .filter(|l| l.contains(&format!(r#"class="{class}""#)))
            .map(|l| {
                let start = l.find("points=\"").unwrap() + 8;
                let end = start + l[start..].find('"').unwrap();
                l[start..end]
                    .split_whitespace()
                    .map(|p| {
                        let (x, y) = p.split_once(',').unwrap();
                        (x.parse().unwrap(), y.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn constant_weight_gives_two_flat_lines() {
        let recs: Vec<MetricsRecord> = (0..5)
            .map(|s| MetricsRecord {
                step: s,
                loss_ent: 0.0,
                loss_unif: 0.0,
                loss_pl: 0.0,
                mi: 0.0,
                w: 2.0,
                acc_teacher: None,
                acc_student: None,
                uniformity_metric: 0.0,
                marginal_entropy: 0.0,
            })
            .collect();
        let svg = weights_svg(&[("run".into(), recs)]);
        for class in ["w", "inv_w"] {
            let lines = points_of(&svg, class);
            assert_eq!(lines.len(), 1);
            assert!(lines[0].iter().all(|p| p.1 == lines[0][0].1));
        }
        assert_ne!(points_of(&svg, "w")[0][0].1, points_of(&svg, "inv_w")[0][0].1);
    }

    #[test]
    fn spca_rejects_points_off_the_circle() {
        let ok = "set,x,y\nimage,1,0\ntext,0,-1\n";
        assert_eq!(parse_spca_csv(ok).unwrap().len(), 2);
        let bad = "set,x,y\nimage,1,0\nimage,0.5,0.5\n";
        assert!(matches!(parse_spca_csv(bad), Err(Error::Parse { line: 3, .. })));
        let svg = spca_svg(&parse_spca_csv(ok).unwrap());
        assert_eq!(count(&svg, r#"class="point""#), 2);
    }

    #[test]
    fn sweep_has_one_marker_per_row() {
        let text = "value,mean,std\n0,0.2,0.01\n0.5,0.25,0.02\n1,0.3,0.01\n2,0.28,0\n4,0.22,0.03\n";
        let rows = parse_sweep_csv(text).unwrap();
        let svg = sweep_svg(&rows, "lambda");
        assert_eq!(count(&svg, r#"class="point""#), 5);
        assert_eq!(count(&svg, r#"class="errorbar""#), 5);
        assert!(matches!(
            parse_sweep_csv("value,mean,std\n1,x,0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
