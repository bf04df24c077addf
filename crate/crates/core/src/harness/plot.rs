//! Hand-written SVG line plot of mean RMSE against ensemble size.

use std::fmt::Write;
use std::path::Path;

use super::{ErrorBars, SummaryRow};
use crate::error::Result;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

pub fn render_svg(rows: &[SummaryRow], bars: ErrorBars, title: &str) -> String {
    let finite: Vec<&SummaryRow> = rows.iter().filter(|r| r.mean_rmse.is_finite()).collect();
    let mut series: Vec<&str> = Vec::new();
    for r in rows {
        if !series.contains(&r.filter.as_str()) {
            series.push(&r.filter);
        }
    }
    let (mut x_lo, mut x_hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        let n = r.ensemble_size as f64;
        (a.min(n), b.max(n))
    });
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if x_hi - x_lo < 1.0 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    let bar = |r: &SummaryRow| {
        let b = r.error_bar(bars);
        if b.is_finite() { b } else { 0.0 }
    };
    let y_hi = finite.iter().map(|r| r.mean_rmse + bar(r)).fold(0.0, f64::max);
    let y_hi = if y_hi > 0.0 { y_hi * 1.08 } else { 1.0 };
    let y_lo = 0.0;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |n: f64| LEFT + (n - x_lo) / (x_hi - x_lo) * pw;
    let py = |v: f64| TOP + ph - (v.clamp(y_lo, y_hi) - y_lo) / (y_hi - y_lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let mut xs: Vec<usize> = finite.iter().map(|r| r.ensemble_size).collect();
    xs.sort_unstable();
    xs.dedup();
    // Thin crowded N ticks.
    let stride = xs.len().div_ceil(20).max(1);
    for n in xs.iter().step_by(stride) {
        let x = px(*n as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{n}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 19.0
        );
    }
    for t in ticks(y_lo, y_hi) {
        let y = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            format_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">ensemble size N</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 18.0
    );
    let label = match bars {
        ErrorBars::Std => "RMSE (mean ± 1 std)",
        ErrorBars::Sem3 => "RMSE (mean ± 3 SEM)",
    };
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{label}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, name) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<&SummaryRow> = finite.iter().copied().filter(|r| r.filter == *name).collect();
        pts.sort_by_key(|r| r.ensemble_size);
        let _ = writeln!(s, r#"<g class="series" data-filter="{}">"#, escape(name));
        if pts.len() > 1 {
            let path: Vec<String> = pts
                .iter()
                .map(|r| format!("{:.1},{:.1}", px(r.ensemble_size as f64), py(r.mean_rmse)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        for r in &pts {
            let x = px(r.ensemble_size as f64);
            let b = bar(r);
            let (y0, y1) = (py(r.mean_rmse - b), py(r.mean_rmse + b));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{y1:.1}" stroke="{color}"/><line x1="{:.1}" y1="{y0:.1}" x2="{:.1}" y2="{y0:.1}" stroke="{color}"/><line x1="{:.1}" y1="{y1:.1}" x2="{:.1}" y2="{y1:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#,
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0,
                py(r.mean_rmse)
            );
        }
        let ly = TOP + 12.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn write_svg(path: &Path, rows: &[SummaryRow], bars: ErrorBars, title: &str) -> Result<()> {
    crate::training::write_file(path, &render_svg(rows, bars, title))
}
