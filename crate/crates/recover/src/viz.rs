//! Minimal SVG charts for sweep and profiler reports. No external renderer;
//! the output is a standalone .svg file.

use std::fmt::Write as _;

const PALETTE: [&str; 8] =
    ["#4878cf", "#d65f5f", "#59a14f", "#b07aa1", "#e49444", "#76b7b2", "#937860", "#808080"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 86.0;
const MR: f64 = 24.0;
const MT: f64 = 42.0;
const MB: f64 = 58.0;

impl Frame {
    fn from_ranges(xs: (f64, f64), ys: (f64, f64)) -> Frame {
        let pad = |lo: f64, hi: f64| {
            let d = (hi - lo).abs().max(1e-12);
            (lo - 0.03 * d, hi + 0.03 * d)
        };
        let (x0, x1) = (xs.0, xs.1.max(xs.0 + 1e-12));
        let (y0, y1) = pad(ys.0.min(0.0_f64.min(ys.0)), ys.1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>
"#,
        W / 2.0
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        r#"<line x1="{ml}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/>
<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{yb}" stroke="black"/>
<text x="{xc}" y="{xl}" font-family="sans-serif" font-size="12" text-anchor="middle">{xlabel}</text>
<text x="16" y="{yc}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {yc})">{ylabel}</text>
"#,
        ml = ML,
        mt = MT,
        yb = H - MB,
        xr = W - MR,
        xc = (ML + W - MR) / 2.0,
        xl = H - 16.0,
        yc = (MT + H - MB) / 2.0,
    );
    for i in 0..=4 {
        let xv = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let yv = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>
<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>
"#,
            f.px(xv),
            H - MB + 16.0,
            fmt_tick(xv),
            ML - 6.0,
            f.py(yv) + 3.0,
            fmt_tick(yv),
        );
    }
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e9 {
        format!("{:.1}G", v / 1e9)
    } else if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MT + 14.0 * i as f64;
        let _ = write!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>
<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>
"#,
            ML + 10.0,
            y,
            PALETTE[i % PALETTE.len()],
            ML + 24.0,
            y + 9.0,
            label,
        );
    }
}

/// Multi-series line chart.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            xs = (xs.0.min(x), xs.1.max(x));
            ys = (ys.0.min(y), ys.1.max(y));
        }
    }
    let f = Frame::from_ranges(xs, ys);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let mut path = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(path, "{}{:.1},{:.1} ", if j == 0 { "M" } else { "L" }, f.px(x), f.py(y));
        }
        let _ = write!(
            out,
            r#"<path d="{path}" fill="none" stroke="{}" stroke-width="1.8"/>
"#,
            PALETTE[i % PALETTE.len()]
        );
        for &(x, y) in &s.points {
            let _ = write!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="2.4" fill="{}"/>
"#,
                f.px(x),
                f.py(y),
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Stacked area chart: series are stacked bottom-up in the given order.
pub fn stacked_area_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    assert!(!series.is_empty());
    let n = series[0].points.len();
    let xs: Vec<f64> = series[0].points.iter().map(|p| p.0).collect();
    let mut cumulative = vec![0.0f64; n];
    let mut layers = Vec::new();
    for s in series {
        assert_eq!(s.points.len(), n, "series must share x samples");
        let lower = cumulative.clone();
        for (i, &(_, y)) in s.points.iter().enumerate() {
            cumulative[i] += y;
        }
        layers.push((lower, cumulative.clone()));
    }
    let top = cumulative.iter().cloned().fold(0.0, f64::max);
    let f = Frame::from_ranges(
        (xs[0], *xs.last().unwrap()),
        (0.0, top),
    );
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, xlabel, ylabel);
    for (i, (lower, upper)) in layers.iter().enumerate() {
        let mut path = String::new();
        for (j, &x) in xs.iter().enumerate() {
            let _ = write!(path, "{}{:.1},{:.1} ", if j == 0 { "M" } else { "L" }, f.px(x), f.py(upper[j]));
        }
        for (j, &x) in xs.iter().enumerate().rev() {
            let _ = write!(path, "L{:.1},{:.1} ", f.px(x), f.py(lower[j]));
        }
        let _ = write!(
            out,
            r#"<path d="{path}Z" fill="{}" fill-opacity="0.75" stroke="none"/>
"#,
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
