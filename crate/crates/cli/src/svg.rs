//! Minimal SVG line charts.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed vertical markers with a caption.
    pub markers: Vec<(f64, String)>,
    /// X ticks are placed on multiples of this value.
    pub x_unit: f64,
    pub config_hash: String,
}

/// Tick spacing: `unit` times 1, 2 or 5 times a power of ten, the smallest
/// giving at most `max_ticks` intervals over `span`.
pub fn tick_step(span: f64, unit: f64, max_ticks: usize) -> f64 {
    let mut scale = 1.0;
    loop {
        for m in [1.0, 2.0, 5.0] {
            let step = unit * m * scale;
            if span / step <= max_ticks as f64 {
                return step;
            }
        }
        scale *= 10.0;
    }
}

fn nice_step(span: f64, max_ticks: usize) -> f64 {
    let span = if span > 0.0 { span } else { 1.0 };
    let unit = 10f64.powf((span / max_ticks as f64).log10().floor());
    tick_step(span, unit, max_ticks)
}

fn fmt_num(v: f64) -> String {
    if v == v.round() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else if v.abs() >= 0.01 {
        format!("{:.2}", v)
    } else {
        format!("{:.1e}", v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let x_max = pts().map(|p| p.0).fold(0.0, f64::max).max(self.x_unit);
        let mut y_min = pts().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let mut y_max = pts().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if !y_min.is_finite() {
            (y_min, y_max) = (0.0, 1.0);
        }
        if y_max - y_min < 1e-12 {
            (y_min, y_max) = (y_min - 0.5, y_max + 0.5);
        }
        let step = nice_step(y_max - y_min, 6);
        (
            (0.0),
            x_max,
            (y_min / step).floor() * step,
            (y_max / step).ceil() * step,
        )
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, "<!-- config_hash={} -->", self.config_hash);
        let _ = writeln!(s, r#"<metadata>config_hash={}</metadata>"#, self.config_hash);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );

        let x_step = tick_step(x1 - x0, self.x_unit, 10);
        let mut x = 0.0;
        while x <= x1 + 1e-9 {
            let px = sx(x);
            let _ = writeln!(
                s,
                r##"<g class="xtick"><line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="#ddd"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text></g>"##,
                TOP,
                TOP + ph,
                TOP + ph + 18.0,
                fmt_num(x)
            );
            x += x_step;
        }
        let y_step = nice_step(y1 - y0, 6);
        let mut y = y0;
        while y <= y1 + y_step * 1e-6 {
            let py = sy(y);
            let _ = writeln!(
                s,
                r##"<g class="ytick"><line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text></g>"##,
                LEFT + pw,
                LEFT - 6.0,
                py + 4.0,
                fmt_num(y)
            );
            y += y_step;
        }
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (mx, label) in &self.markers {
            let px = sx(*mx);
            let _ = writeln!(
                s,
                r##"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{}" stroke="#888" stroke-dasharray="4 3"/><text x="{:.2}" y="{}" font-size="10" fill="#555">{}</text>"##,
                TOP + ph,
                px + 3.0,
                TOP + 12.0,
                escape(label)
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(&series.name),
                path.join(" ")
            );
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        if self.series.iter().all(|s| s.points.is_empty()) {
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" text-anchor="middle" fill="#888">no data</text>"##,
                LEFT + pw / 2.0,
                TOP + ph / 2.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
