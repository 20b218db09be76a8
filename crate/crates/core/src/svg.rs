//! Minimal SVG line plots for run artifacts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed vertical marker, e.g. the end of the first stage.
    pub v_rule: Option<(f64, String)>,
    pub log_y: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    fn ty(&self, y: f64) -> Option<f64> {
        if self.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            y.is_finite().then_some(y)
        }
    }

    /// Renders the plot. A `stamp` string, when given, is written as a
    /// comment; deterministic output passes `None`.
    pub fn render(&self, stamp: Option<&str>) -> String {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().filter_map(|&(x, y)| self.ty(y).map(|v| (x, v))))
            .collect();
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if pts.is_empty() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#).unwrap();
        if let Some(stamp) = stamp {
            writeln!(s, "<!-- generated {} -->", esc(stamp)).unwrap();
        }
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(s, r#"<text x="{}" y="22" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#, LEFT + pw / 2.0, esc(&self.title)).unwrap();
        writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();

        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let ylab = if self.log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" font-family="sans-serif">{fx:.0}</text>"#, sx(fx), TOP + ph + 16.0).unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" font-family="sans-serif">{ylab}</text>"#, LEFT - 6.0, sy(fy) + 4.0).unwrap();
            writeln!(s, r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, LEFT + pw, sy(fy), sy(fy)).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 12.0, esc(&self.x_label)).unwrap();
        writeln!(s, r#"<text x="16" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, esc(&self.y_label)).unwrap();

        if let Some((x, label)) = &self.v_rule {
            let px = sx(*x);
            writeln!(s, r#"<line x1="{px:.1}" x2="{px:.1}" y1="{TOP}" y2="{}" stroke="gray" stroke-dasharray="5,4"/>"#, TOP + ph).unwrap();
            writeln!(s, r#"<text x="{:.1}" y="{}" font-size="11" font-family="sans-serif" fill="gray">{}</text>"#, px + 4.0, TOP + 14.0, esc(label)).unwrap();
        }

        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter_map(|&(x, y)| self.ty(y).map(|v| format!("{:.2},{:.2}", sx(x), sy(v))))
                .collect();
            if !path.is_empty() {
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#, path.join(" ")).unwrap();
            }
            let ly = TOP + 16.0 + 18.0 * k as f64;
            let lx = LEFT + pw + 12.0;
            writeln!(s, r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
            writeln!(s, r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif">{}</text>"#, lx + 26.0, ly + 4.0, esc(&series.name)).unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}
