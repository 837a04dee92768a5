//! Minimal hand-written SVG line charts.
//!
//! Output is self-contained (no external references, no scripts) and depends
//! only on the input numbers, so identical trajectories give identical bytes.

use std::fmt::Write as _;

use crate::trainer::TrajectoryPoint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y)` points; non-finite values are skipped.
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Tick label with just enough precision for the axis span.
fn tick_label(v: f64, span: f64) -> String {
    let digits = if span <= 0.0 {
        2
    } else {
        (2 - span.log10().floor() as i32).clamp(0, 6) as usize
    };
    let s = format!("{v:.digits$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    let pad = (hi - lo) * 0.05;
    Some((lo - pad, hi + pad))
}

/// Renders one chart. Series with no finite points are listed in the legend
/// but draw nothing; a chart with no data at all says so.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite = |s: &Series| -> Vec<(f64, f64)> {
        s.points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect()
    };
    let all: Vec<(f64, f64)> = series.iter().flat_map(finite).collect();
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );

    let (Some((x0, x1)), Some((y0, y1))) = (bounds(all.iter().map(|p| p.0)), bounds(all.iter().map(|p| p.1))) else {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="gray">no data</text>"#,
            LEFT + plot_w / 2.0,
            TOP + plot_h / 2.0
        );
        out.push_str("</svg>\n");
        return out;
    };
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0,
            tick_label(xv, x1 - x0)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{py:.1}" x2="{LEFT}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv, y1 - y0)
        );
    }

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts = finite(s);
        if !pts.is_empty() {
            let mut path = String::with_capacity(pts.len() * 14);
            for (i, (x, y)) in pts.iter().enumerate() {
                if i > 0 {
                    path.push(' ');
                }
                let _ = write!(path, "{:.1},{:.1}", sx(*x), sy(*y));
            }
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{path}"/>"#
            );
        }
        let ly = TOP + 12.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn series_of(traj: &[TrajectoryPoint], name: &str, f: impl Fn(&TrajectoryPoint) -> Option<f64>) -> Series {
    Series::new(
        name,
        traj.iter().filter_map(|p| f(p).map(|v| (p.step as f64, v))).collect(),
    )
}

/// The four per-run charts as `(file name, svg)`.
pub fn run_charts(run_name: &str, traj: &[TrajectoryPoint]) -> Vec<(String, String)> {
    vec![
        (
            "cosine.svg".into(),
            line_chart(
                &format!("{run_name}: gradient cosine"),
                "step",
                "cos(g_U, g_G)",
                &[series_of(traj, "cos_ug", |p| p.cos_ug)],
            ),
        ),
        (
            "weights.svg".into(),
            line_chart(
                &format!("{run_name}: task weights"),
                "step",
                "weight",
                &[
                    series_of(traj, "w_u", |p| Some(p.w_u)),
                    series_of(traj, "w_g", |p| Some(p.w_g)),
                ],
            ),
        ),
        (
            "task_losses.svg".into(),
            line_chart(
                &format!("{run_name}: task losses"),
                "step",
                "DPO loss",
                &[
                    series_of(traj, "loss_u", |p| p.loss_u),
                    series_of(traj, "loss_g", |p| p.loss_g),
                ],
            ),
        ),
        (
            "combined_loss.svg".into(),
            line_chart(
                &format!("{run_name}: combined loss"),
                "step",
                "loss",
                &[series_of(traj, "loss_combined", |p| Some(p.loss_combined))],
            ),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_self_contained_and_stable() {
        let s = [Series::new("a", vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)])];
        let a = line_chart("t", "x", "y", &s);
        assert_eq!(a, line_chart("t", "x", "y", &s));
        assert!(a.starts_with("<svg"));
        assert!(!a.contains("href"));
        assert!(a.contains("<polyline"));
    }

    #[test]
    fn empty_chart_says_so() {
        assert!(line_chart("t", "x", "y", &[Series::new("a", vec![])]).contains("no data"));
    }

    #[test]
    fn labels_are_escaped() {
        assert!(line_chart("a<b", "x", "y", &[]).contains("a&lt;b"));
    }
}
