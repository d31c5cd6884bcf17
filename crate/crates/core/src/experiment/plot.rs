//! Minimal SVG line and scatter charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points }
    }
}

#[derive(Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        (f.x0, f.x1) = pad(f.x0, f.x1);
        (f.y0, f.y1) = pad(f.y0, f.y1);
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(title: &str, xlabel: &str, ylabel: &str, f: Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, anchor, x, y) in [
        (f.x0, "start", MARGIN, H - MARGIN + 16.0),
        (f.x1, "end", W - MARGIN, H - MARGIN + 16.0),
        (f.y0, "end", MARGIN - 4.0, H - MARGIN),
        (f.y1, "end", MARGIN - 4.0, MARGIN + 10.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#, tick(v));
    }
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN + 16.0 + 16.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, W - MARGIN - 120.0, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, W - MARGIN - 104.0, escape(label));
    }
}

fn polyline(s: &mut String, f: Frame, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
        coords.join(" ")
    );
}

/// One polyline per series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut s = header(title, xlabel, ylabel, f);
    for (i, ser) in series.iter().enumerate() {
        polyline(&mut s, f, &ser.points, COLORS[i % COLORS.len()], 1.8, 1.0);
    }
    legend(&mut s, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// One dot per point, colored by series.
pub fn scatter_chart(title: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut s = header(title, "x0", "x1", f);
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        for &(x, y) in ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{c}" fill-opacity="0.5"/>"#, f.px(x), f.py(y));
        }
    }
    legend(&mut s, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Overlaid trajectory groups; each group is a set of paths in one color.
pub fn trajectory_chart(title: &str, groups: &[(String, Vec<Vec<(f64, f64)>>)]) -> String {
    let f = Frame::fit(groups.iter().flat_map(|(_, paths)| paths.iter().flatten()));
    let mut s = header(title, "x0", "x1", f);
    for (i, (_, paths)) in groups.iter().enumerate() {
        for p in paths {
            polyline(&mut s, f, p, COLORS[i % COLORS.len()], 0.8, 0.5);
        }
    }
    legend(&mut s, &groups.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart("a<b", "step", "loss", &[Series::new("fm", vec![(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b") && s.contains("<polyline"));
        let s = scatter_chart("pts", &[Series::new("x", vec![(1.0, 1.0)])]);
        assert_eq!(s.matches("<circle").count(), 1);
        let s = trajectory_chart("t", &[("fm".into(), vec![vec![(0.0, 0.0), (1.0, 1.0)]; 3])]);
        assert_eq!(s.matches("<polyline").count(), 3);
        let empty = line_chart("e", "x", "y", &[]);
        assert!(empty.contains("</svg>"));
    }
}
