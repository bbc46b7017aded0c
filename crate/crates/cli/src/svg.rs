//! Minimal deterministic SVG plotting: axes, bars, polylines, markers.
//!
//! Every coordinate is printed with fixed precision, so identical inputs give
//! identical bytes.

use std::fmt::Write as _;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const TICKS: usize = 5;

pub const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Short tick label: fixed notation trimmed of trailing zeros, scientific
/// for very large or very small magnitudes.
pub fn tick_label(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        return "0".into();
    }
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Range covering `values`, widened when degenerate or empty.
pub fn data_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.into_iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    }
}

/// Range padded by `frac` of its width on both sides.
pub fn padded(range: (f64, f64), frac: f64) -> (f64, f64) {
    let w = range.1 - range.0;
    (range.0 - frac * w, range.1 + frac * w)
}

pub struct Canvas {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
    legend: Vec<(String, String, bool)>,
    notes: Vec<String>,
}

impl Canvas {
    pub fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let mut c = Canvas {
            x,
            y,
            body: String::new(),
            legend: Vec::new(),
            notes: Vec::new(),
        };
        c.axes(title, xlabel, ylabel);
        c
    }

    fn sx(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn sy(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&mut self, title: &str, xlabel: &str, ylabel: &str) {
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        let b = &mut self.body;
        let _ = writeln!(
            b,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#000" stroke-width="1"/>"##,
            px(x0),
            px(y1),
            px(x1 - x0),
            px(y0 - y1)
        );
        let _ = writeln!(
            b,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            px(WIDTH / 2.0),
            escape(title)
        );
        let _ = writeln!(
            b,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
            px((x0 + x1) / 2.0),
            px(HEIGHT - 14.0),
            escape(xlabel)
        );
        let _ = writeln!(
            b,
            r#"<text x="16" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
            px((y0 + y1) / 2.0),
            px((y0 + y1) / 2.0),
            escape(ylabel)
        );
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (tx, ty) = (self.sx(xv), self.sy(yv));
            let b = &mut self.body;
            let _ = writeln!(
                b,
                r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#000"/><text x="{0}" y="{3}" text-anchor="middle" font-size="11">{4}</text>"##,
                px(tx),
                px(y0),
                px(y0 + 5.0),
                px(y0 + 18.0),
                tick_label(xv)
            );
            let _ = writeln!(
                b,
                r##"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="#000"/><text x="{3}" y="{4}" text-anchor="end" font-size="11">{5}</text>"##,
                px(x0 - 5.0),
                px(ty),
                px(x0),
                px(x0 - 8.0),
                px(ty + 4.0),
                tick_label(yv)
            );
        }
    }

    /// Filled bar from `y = max(y_min, 0)` up to `height`.
    pub fn bar(&mut self, x0: f64, x1: f64, height: f64, fill: &str) {
        let base = self.sy(self.y.0.max(0.0));
        let top = self.sy(height);
        let (a, b) = (self.sx(x0), self.sx(x1));
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" fill-opacity="0.6" stroke="{fill}"/>"#,
            px(a),
            px(top.min(base)),
            px((b - a).max(0.0)),
            px((base - top).abs())
        );
    }

    pub fn polyline(&mut self, xs: &[f64], ys: &[f64], stroke: &str, dashed: bool) {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{},{}", px(self.sx(x)), px(self.sy(y))))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        );
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, dashed: bool) {
        self.polyline(&[a.0, b.0], &[a.1, b.1], stroke, dashed);
    }

    pub fn marker(&mut self, x: f64, y: f64, fill: &str) {
        if !(x.is_finite() && y.is_finite()) {
            return;
        }
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="3" fill="{fill}" fill-opacity="0.7"/>"#,
            px(self.sx(x)),
            px(self.sy(y))
        );
    }

    /// Vertical error bar with caps.
    pub fn error_bar(&mut self, x: f64, lo: f64, hi: f64, stroke: &str) {
        let (cx, a, b) = (self.sx(x), self.sy(lo), self.sy(hi));
        let _ = writeln!(
            self.body,
            r#"<path d="M{0} {1}V{2}M{3} {1}H{4}M{3} {2}H{4}" stroke="{stroke}" fill="none"/>"#,
            px(cx),
            px(a),
            px(b),
            px(cx - 4.0),
            px(cx + 4.0)
        );
    }

    pub fn legend(&mut self, label: &str, color: &str, dashed: bool) {
        self.legend.push((label.to_string(), color.to_string(), dashed));
    }

    /// Text line in the top-left corner of the plot area.
    pub fn note(&mut self, text: &str) {
        self.notes.push(text.to_string());
    }

    pub fn finish(mut self) -> String {
        for (i, note) in self.notes.iter().enumerate() {
            let _ = writeln!(
                self.body,
                r#"<text x="{}" y="{}" font-size="12">{}</text>"#,
                px(LEFT + 10.0),
                px(TOP + 18.0 + 16.0 * i as f64),
                escape(note)
            );
        }
        for (i, (label, color, dashed)) in self.legend.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let x = WIDTH - RIGHT - 150.0;
            let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                self.body,
                r#"<line x1="{0}" y1="{2}" x2="{1}" y2="{2}" stroke="{color}" stroke-width="2"{dash}/><text x="{3}" y="{4}" font-size="11">{5}</text>"#,
                px(x),
                px(x + 22.0),
                px(y),
                px(x + 28.0),
                px(y + 4.0),
                escape(label)
            );
        }
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body,
            w = WIDTH,
            h = HEIGHT
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_labels() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(2.5), "2.5");
        assert_eq!(tick_label(10.0), "10");
        assert_eq!(tick_label(-0.0001), "-1.00e-4");
        assert_eq!(tick_label(123456.0), "1.23e5");
    }

    #[test]
    fn degenerate_range_is_widened() {
        assert_eq!(data_range([3.0, 3.0]), (2.7, 3.3));
        assert_eq!(data_range([0.0]), (-0.5, 0.5));
        assert_eq!(data_range(Vec::<f64>::new()), (0.0, 1.0));
        assert_eq!(data_range([1.0, f64::NAN, 4.0]), (1.0, 4.0));
    }

    #[test]
    fn canvas_maps_corners_and_escapes() {
        let mut c = Canvas::new("a<b", "x", "y", (0.0, 1.0), (0.0, 1.0));
        assert_eq!(c.sx(0.0), LEFT);
        assert_eq!(c.sx(1.0), WIDTH - RIGHT);
        assert_eq!(c.sy(0.0), HEIGHT - BOTTOM);
        assert_eq!(c.sy(1.0), TOP);
        c.polyline(&[0.0, 1.0], &[0.0, 1.0], COLORS[0], false);
        let s = c.finish();
        assert!(s.starts_with("<svg"));
        assert!(s.contains("a&lt;b"));
        assert!(s.contains("72.00,364.00 616.00,40.00"));
    }

    #[test]
    fn same_input_same_bytes() {
        let draw = || {
            let mut c = Canvas::new("t", "x", "y", (0.0, 2.0), (-1.0, 1.0));
            c.bar(0.0, 1.0, 0.5, COLORS[1]);
            c.marker(1.5, 0.25, COLORS[2]);
            c.error_bar(1.0, -0.5, 0.5, COLORS[0]);
            c.legend("series", COLORS[0], true);
            c.note("R² = 0.99");
            c.finish()
        };
        assert_eq!(draw(), draw());
    }
}
