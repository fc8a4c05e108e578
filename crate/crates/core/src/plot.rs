//! Self-contained SVG charts from a metrics CSV: success rates and tier
//! fractions against the training step.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

const REQUIRED: [&str; 7] = [
    "step",
    "n_hard",
    "n_medium",
    "n_easy",
    "train_pass",
    "eval_split",
    "eval_avg",
];

/// Series extracted from a metrics CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curves {
    pub steps: Vec<f64>,
    pub train_pass: Vec<f64>,
    /// `(hard, medium, easy)` fractions per step.
    pub tiers: Vec<(f64, f64, f64)>,
    /// Evaluation averages keyed by split name, as `(step, value)`.
    pub evals: BTreeMap<String, Vec<(f64, f64)>>,
}

fn field(rec: &csv::StringRecord, idx: usize) -> &str {
    rec.get(idx).unwrap_or("")
}

fn number(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let s = field(rec, idx);
    s.parse()
        .map_err(|_| Error::Parse(format!("column {name}: cannot parse {s:?} as a number")))
}

impl Curves {
    pub fn from_csv(text: &str) -> Result<Curves> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let mut col = BTreeMap::new();
        for name in REQUIRED {
            let idx = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("missing column {name}")))?;
            col.insert(name, idx);
        }
        let mut curves = Curves::default();
        for rec in reader.records() {
            let rec = rec?;
            let step = number(&rec, col["step"], "step")?;
            let split = field(&rec, col["eval_split"]);
            if split.is_empty() {
                let h = number(&rec, col["n_hard"], "n_hard")?;
                let m = number(&rec, col["n_medium"], "n_medium")?;
                let e = number(&rec, col["n_easy"], "n_easy")?;
                let n = (h + m + e).max(1.0);
                curves.steps.push(step);
                curves
                    .train_pass
                    .push(number(&rec, col["train_pass"], "train_pass")?);
                curves.tiers.push((h / n, m / n, e / n));
            } else {
                let v = number(&rec, col["eval_avg"], "eval_avg")?;
                curves
                    .evals
                    .entry(split.to_string())
                    .or_default()
                    .push((step, v));
            }
        }
        if curves.steps.is_empty() {
            return Err(Error::Parse("metrics CSV has no step rows".into()));
        }
        Ok(curves)
    }
}

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];

struct Panel {
    top: f64,
    x_max: f64,
}

impl Panel {
    fn x(&self, step: f64) -> f64 {
        MARGIN + (WIDTH - 2.0 * MARGIN) * step / self.x_max
    }

    fn y(&self, v: f64) -> f64 {
        self.top + PANEL_H - MARGIN - (PANEL_H - 2.0 * MARGIN) * v.clamp(0.0, 1.0)
    }

    fn frame(&self, out: &mut String, title: &str) {
        let (x0, x1) = (MARGIN, WIDTH - MARGIN);
        let (y0, y1) = (self.y(0.0), self.y(1.0));
        let _ = writeln!(
            out,
            r##"<text x="{x0:.2}" y="{:.2}" font-size="14">{title}</text>"##,
            self.top + 20.0
        );
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#888"/>"##,
            x1 - x0,
            y0 - y1
        );
        for v in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                out,
                r##"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.1}</text>"##,
                x0 - 4.0,
                self.y(v) + 3.0
            );
        }
        let _ = writeln!(
            out,
            r##"<text x="{x1:.2}" y="{:.2}" font-size="10" text-anchor="end">step {}</text>"##,
            y0 + 16.0,
            self.x_max
        );
    }

    fn line(&self, out: &mut String, points: &[(f64, f64)], color: &str, label: &str, slot: usize) {
        let pts: Vec<String> = points
            .iter()
            .map(|&(s, v)| format!("{:.2},{:.2}", self.x(s), self.y(v)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
        let lx = MARGIN + 10.0 + 120.0 * slot as f64;
        let ly = self.top + PANEL_H - 12.0;
        let _ = writeln!(
            out,
            r##"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{ly:.2}" font-size="11">{label}</text>"##,
            ly - 9.0,
            lx + 14.0
        );
    }
}

/// Renders both panels as one SVG document. Every step row gets a marker
/// carrying its step number.
pub fn render_svg(curves: &Curves) -> String {
    let x_max = curves.steps.iter().copied().fold(1.0, f64::max);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{}" viewBox="0 0 {WIDTH} {}">"##,
        2.0 * PANEL_H,
        2.0 * PANEL_H
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);

    let top = Panel { top: 0.0, x_max };
    top.frame(&mut out, "Success rate");
    let train: Vec<(f64, f64)> = curves
        .steps
        .iter()
        .copied()
        .zip(curves.train_pass.iter().copied())
        .collect();
    top.line(&mut out, &train, COLORS[0], "train", 0);
    for (i, (split, pts)) in curves.evals.iter().enumerate() {
        top.line(&mut out, pts, COLORS[(i + 1) % COLORS.len()], split, i + 1);
    }
    for &(s, v) in &train {
        let _ = writeln!(
            out,
            r##"<circle data-step="{s}" cx="{:.2}" cy="{:.2}" r="1.2" fill="{}"/>"##,
            top.x(s),
            top.y(v),
            COLORS[0]
        );
    }

    let bottom = Panel {
        top: PANEL_H,
        x_max,
    };
    bottom.frame(&mut out, "Tier fractions");
    let tier = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<(f64, f64)> {
        curves
            .steps
            .iter()
            .copied()
            .zip(curves.tiers.iter().map(f))
            .collect()
    };
    bottom.line(&mut out, &tier(|t| t.0), COLORS[1], "hard", 0);
    bottom.line(&mut out, &tier(|t| t.1), COLORS[3], "medium", 1);
    bottom.line(&mut out, &tier(|t| t.2), COLORS[2], "easy", 2);
    out.push_str("</svg>\n");
    out
}
