//! Minimal SVG line plots of single paths.

use std::fmt::Write as _;

const WIDTH: f64 = 760.0;
const PANEL_HEIGHT: f64 = 220.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
    pub color: &'static str,
    pub dashed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    /// Shaded `(lower, upper)` band on the grid.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
    /// Observation markers `(t, value)`.
    pub markers: Vec<(f64, f64)>,
}

struct Scale {
    t0: f64,
    t1: f64,
    lo: f64,
    hi: f64,
    y0: f64,
}

impl Scale {
    fn x(&self, t: f64) -> f64 {
        LEFT + (t - self.t0) / (self.t1 - self.t0) * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let h = PANEL_HEIGHT - TOP - BOTTOM;
        self.y0 + TOP + h - (v - self.lo) / (self.hi - self.lo) * h
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn polyline(times: &[f64], values: &[f64], sc: &Scale) -> String {
    times
        .iter()
        .zip(values)
        .filter(|(_, v)| v.is_finite())
        .map(|(&t, &v)| format!("{:.2},{:.2}", sc.x(t), sc.y(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn value_range(panel: &Panel) -> (f64, f64) {
    let mut vals: Vec<f64> = panel
        .series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .collect();
    vals.extend(panel.markers.iter().map(|m| m.1));
    if let Some((lo, hi)) = &panel.band {
        vals.extend(lo.iter().chain(hi).copied());
    }
    let (mut lo, mut hi) = vals
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Renders the panels stacked vertically over a shared time axis.
pub fn render_svg(times: &[f64], panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (t0, t1) = match (times.first(), times.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        _ => (0.0, 1.0),
    };
    for (p, panel) in panels.iter().enumerate() {
        let (lo, hi) = value_range(panel);
        let sc = Scale {
            t0,
            t1,
            lo,
            hi,
            y0: p as f64 * PANEL_HEIGHT,
        };
        let (x0, x1) = (sc.x(t0), sc.x(t1));
        let (ylo, yhi) = (sc.y(lo), sc.y(hi));
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="{:.1}" font-size="13">{}</text>"#,
            sc.y0 + 18.0,
            escape(&panel.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{yhi:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            x1 - x0,
            ylo - yhi
        );
        for i in 0..=4 {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            let y = sc.y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                format_tick(v)
            );
            let t = t0 + (t1 - t0) * i as f64 / 4.0;
            let x = sc.x(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{ylo:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                ylo + 4.0,
                ylo + 16.0,
                format_tick(t)
            );
        }
        if let Some((lower, upper)) = &panel.band {
            let fwd = polyline(times, upper, &sc);
            let back: Vec<f64> = lower.iter().rev().copied().collect();
            let rtimes: Vec<f64> = times.iter().rev().copied().collect();
            let bwd = polyline(&rtimes, &back, &sc);
            let _ = writeln!(
                s,
                r##"<polygon points="{fwd} {bwd}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##
            );
        }
        for (i, series) in panel.series.iter().enumerate() {
            let dash = if series.dashed {
                r#" stroke-dasharray="6,4""#
            } else {
                ""
            };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
                polyline(times, &series.values, &sc),
                series.color
            );
            let ly = sc.y0 + TOP + 14.0 * i as f64 + 6.0;
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                x1 + 10.0,
                x1 + 30.0,
                series.color,
                x1 + 36.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        for &(t, v) in &panel.markers {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
                sc.x(t),
                sc.y(v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{:.3}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        format!("{v:.2e}")
    }
}
