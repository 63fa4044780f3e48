//! Self-contained SVG line charts of a trajectory CSV.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::TrajectoryTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    /// One curve per unit: `P_i(t)`.
    Alloc,
    /// Unpenalized total cost, with optional reference levels.
    Cost,
    /// `1'P - P_l`.
    Mismatch,
    /// `1'P` together with the load.
    Generation,
}

impl Panel {
    pub const ALL: [Panel; 4] = [
        Panel::Alloc,
        Panel::Cost,
        Panel::Mismatch,
        Panel::Generation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Panel::Alloc => "alloc",
            Panel::Cost => "cost",
            Panel::Mismatch => "mismatch",
            Panel::Generation => "generation",
        }
    }
}

impl fmt::Display for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Panel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Panel::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown panel {s:?} (expected alloc, cost, mismatch or generation)"
                ))
            })
    }
}

/// A horizontal reference level drawn over `[t0, t1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub t0: f64,
    pub t1: f64,
    pub value: f64,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

struct Series {
    points: Vec<Option<(f64, f64)>>,
    color: &'static str,
    width: f64,
    dash: bool,
}

/// Tick spacing from {1, 2, 5} × 10^k giving about `target` intervals.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let step = nice_step(hi - lo, 6.0);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), decimals)
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    (lo <= hi).then_some((lo, hi))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        let d = lo.abs().max(1.0) * 0.05;
        (lo - d, hi + d)
    } else {
        let d = 0.05 * (hi - lo);
        (lo - d, hi + d)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Renders one panel. `references` are only drawn on the cost panel.
pub fn render_svg(
    table: &TrajectoryTable,
    panel: Panel,
    references: &[Reference],
    title: &str,
) -> Result<String> {
    if table.is_empty() {
        return Err(Error::Csv("empty trajectory".into()));
    }
    let t = &table.t;
    let line = |ys: &[f64], color, width| Series {
        points: t.iter().zip(ys).map(|(&x, &y)| Some((x, y))).collect(),
        color,
        width,
        dash: false,
    };
    let (series, y_label): (Vec<Series>, &str) = match panel {
        Panel::Alloc => (
            table
                .p
                .iter()
                .enumerate()
                .map(|(i, col)| Series {
                    points: t.iter().zip(col).map(|(&x, y)| y.map(|y| (x, y))).collect(),
                    color: PALETTE[i % PALETTE.len()],
                    width: 1.0,
                    dash: false,
                })
                .collect(),
            "power allocation",
        ),
        Panel::Cost => {
            let mut s = vec![line(&table.total_cost, PALETTE[0], 1.5)];
            for r in references {
                s.push(Series {
                    points: vec![Some((r.t0, r.value)), Some((r.t1, r.value))],
                    color: PALETTE[3],
                    width: 1.0,
                    dash: true,
                });
            }
            (s, "total cost")
        }
        Panel::Mismatch => (
            vec![line(&table.mismatch, PALETTE[0], 1.5)],
            "total mismatch",
        ),
        Panel::Generation => {
            let gen = table.total_generation();
            let load: Vec<f64> = gen
                .iter()
                .zip(&table.mismatch)
                .map(|(g, m)| g - m)
                .collect();
            let mut load_series = line(&load, PALETTE[3], 1.0);
            load_series.dash = true;
            (
                vec![line(&gen, PALETTE[0], 1.5), load_series],
                "total generation",
            )
        }
    };

    let (x0, x1) =
        bounds(t.iter().copied()).ok_or_else(|| Error::Csv("no finite time stamps".into()))?;
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0, x0 + 1.0) };
    let all_y = series
        .iter()
        .flat_map(|s| s.points.iter().flatten().map(|p| p.1));
    let (y0, y1) = bounds(all_y).ok_or_else(|| Error::Csv("no finite values to plot".into()))?;
    let (y0, y1) = padded(y0, y1);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (xt, xd) = ticks(x0, x1);
    for x in xt {
        let px = sx(x);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{x:.xd$}</text>"##,
            TOP + ph,
            TOP + ph + 16.0
        );
    }
    let (yt, yd) = ticks(y0, y1);
    for y in yt {
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{y:.yd$}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">time</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{y_label}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for s in &series {
        let dash = if s.dash {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, svg: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{}" stroke-width="{}"{dash} points="{}"/>"#,
                    s.color,
                    s.width,
                    run.join(" ")
                );
            }
            run.clear();
        };
        for p in &s.points {
            match p {
                Some((x, y)) if x.is_finite() && y.is_finite() => {
                    run.push(format!("{:.2},{:.2}", sx(*x), sy(*y)))
                }
                _ => flush(&mut run, &mut svg),
            }
        }
        flush(&mut run, &mut svg);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
