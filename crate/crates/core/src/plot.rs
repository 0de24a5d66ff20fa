//! Minimal static SVG line plots with a shaded interval band.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const TICKS: usize = 5;

pub(crate) struct BandPlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x: &'a [f64],
    pub mean: &'a [f64],
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub points: &'a [(f64, f64)],
    /// Fixed y range; fitted to the data when `None`.
    pub y_range: Option<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn tick_label(v: f64, range: f64) -> String {
    if range >= 100.0 {
        format!("{v:.0}")
    } else if range >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

impl BandPlot<'_> {
    pub fn render(&self) -> String {
        let (x0, x1) = match (self.x.first(), self.x.last()) {
            (Some(&a), Some(&b)) if b > a => (a, b),
            _ => (0.0, 1.0),
        };
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            span(
                self.lower
                    .iter()
                    .chain(self.upper)
                    .chain(self.mean)
                    .copied()
                    .chain(self.points.iter().map(|p| p.1)),
            )
        });
        let f = Frame { x0, x1, y0, y1 };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );

        // axes and ticks
        let (bx, by) = (f.py(y0), f.px(x0));
        let _ = writeln!(
            s,
            r#"<line x1="{by:.2}" y1="{bx:.2}" x2="{:.2}" y2="{bx:.2}" stroke="black"/>"#,
            f.px(x1)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{by:.2}" y1="{bx:.2}" x2="{by:.2}" y2="{:.2}" stroke="black"/>"#,
            f.py(y1)
        );
        for i in 0..=TICKS {
            let t = i as f64 / TICKS as f64;
            let xv = x0 + t * (x1 - x0);
            let yv = y0 + t * (y1 - y0);
            let (xp, yp) = (f.px(xv), f.py(yv));
            let _ = writeln!(
                s,
                r#"<line x1="{xp:.2}" y1="{bx:.2}" x2="{xp:.2}" y2="{:.2}" stroke="black"/><text x="{xp:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                bx + 5.0,
                bx + 19.0,
                tick_label(xv, x1 - x0)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{yp:.2}" x2="{by:.2}" y2="{yp:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                by - 5.0,
                by - 8.0,
                yp + 4.0,
                tick_label(yv, y1 - y0)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (LEFT + WIDTH - RIGHT) / 2.0,
            HEIGHT - 12.0,
            escape(self.x_label)
        );
        let cy = (TOP + HEIGHT - BOTTOM) / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="16" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 16 {cy:.1})">{}</text>"#,
            escape(self.y_label)
        );

        // interval band: upper edge left to right, lower edge back
        if !self.x.is_empty() {
            let mut pts = String::new();
            for (x, y) in self.x.iter().zip(self.upper) {
                let _ = write!(pts, "{:.2},{:.2} ", f.px(*x), f.py(*y));
            }
            for (x, y) in self.x.iter().zip(self.lower).rev() {
                let _ = write!(pts, "{:.2},{:.2} ", f.px(*x), f.py(*y));
            }
            let _ = writeln!(
                s,
                r##"<polygon points="{}" fill="#4a7ab5" fill-opacity="0.25" stroke="none"/>"##,
                pts.trim_end()
            );
            let mut line = String::new();
            for (x, y) in self.x.iter().zip(self.mean) {
                let _ = write!(line, "{:.2},{:.2} ", f.px(*x), f.py(*y));
            }
            let _ = writeln!(
                s,
                r##"<polyline points="{}" fill="none" stroke="#1f4e8c" stroke-width="2"/>"##,
                line.trim_end()
            );
        }
        for (x, y) in self.points {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#c0392b" fill-opacity="0.7"/>"##,
                f.px(*x),
                f.py(*y)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
