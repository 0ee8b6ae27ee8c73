//! Static polyline charts. Output depends only on the data, never on time.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 80.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Plotted against the right-hand axis, dashed.
    pub secondary: bool,
}

impl Series {
    pub fn primary(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            secondary: false,
        }
    }

    pub fn secondary(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            secondary: true,
        }
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range<'a>(values: impl Iterator<Item = &'a f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders a line chart with an optional secondary axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, y2_label: &str, series: &[Series]) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| &p.0))).unwrap_or((0.0, 1.0));
    let y_of = |secondary: bool| {
        range(
            series
                .iter()
                .filter(|s| s.secondary == secondary)
                .flat_map(|s| s.points.iter().map(|p| &p.1)),
        )
        .unwrap_or((0.0, 1.0))
    };
    let (y1, y2) = (y_of(false), y_of(true));
    let has_secondary = series.iter().any(|s| s.secondary);
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * plot_w;
    let sy = |y: f64, r: (f64, f64)| TOP + plot_h - (y - r.0) / (r.1 - r.0) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = xr.0 + f * (xr.1 - xr.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + plot_h + 16.0,
            fmt_tick(x)
        );
        let y = y1.0 + f * (y1.1 - y1.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(y, y1) + 4.0,
            fmt_tick(y)
        );
        if has_secondary {
            let y = y2.0 + f * (y2.1 - y2.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="start" fill="gray">{}</text>"#,
                LEFT + plot_w + 6.0,
                sy(y, y2) + 4.0,
                fmt_tick(y)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 20.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    if has_secondary {
        let x = WIDTH - 14.0;
        let y = TOP + plot_h / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="middle" fill="gray" transform="rotate(90 {x:.1} {y:.1})">{}</text>"#,
            escape(y2_label)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let r = if s.secondary { y2 } else { y1 };
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y, r)))
            .collect();
        let dash = if s.secondary { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/>
<text x="{:.1}" y="{:.1}">{}</text>"#,
            LEFT + 10.0,
            LEFT + 34.0,
            LEFT + 40.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_balanced() {
        let s = vec![
            Series::primary("ours <a&b>", vec![(1.0, 0.1), (2.0, 0.5), (4.0, 0.4)]),
            Series::secondary("reference", vec![(1.0, 10.0), (4.0, 30.0)]),
        ];
        let a = line_chart("t", "steps", "y", "y2", &s);
        assert_eq!(a, line_chart("t", "steps", "y", "y2", &s));
        assert!(a.contains("&lt;a&amp;b&gt;"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert_eq!(a.matches("<svg").count(), a.matches("</svg>").count());
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let a = line_chart("c", "x", "y", "", &[Series::primary("flat", vec![(1.0, 0.0), (2.0, 0.0)])]);
        assert!(!a.contains("NaN") && !a.contains("inf"));
    }
}
