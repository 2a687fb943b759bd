//! Minimal deterministic SVG plotting: line/point series, bars and
//! horizontal or vertical rules on linear axes.

use std::fmt::Write as _;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 340.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const TICKS: usize = 5;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
    pub markers: bool,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>, color: &'static str) -> Self {
        Series { label: label.into(), points, color, dashed: false, markers: false }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }

    pub fn with_markers(mut self) -> Self {
        self.markers = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// A full-width line at a fixed coordinate.
#[derive(Debug, Clone)]
pub struct Rule {
    pub label: String,
    /// `X` draws a vertical line at `x = at`.
    pub axis: Axis,
    pub at: f64,
    pub color: &'static str,
    pub dashed: bool,
}

#[derive(Debug, Clone)]
pub struct Bar {
    pub x0: f64,
    pub x1: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
    pub rules: Vec<Rule>,
    pub bars: Vec<Bar>,
}

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Plot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Plot::default()
        }
    }

    fn range(&self, axis: Axis) -> (f64, f64) {
        let fixed = match axis {
            Axis::X => self.x_range,
            Axis::Y => self.y_range,
        };
        if let Some(r) = fixed {
            return r;
        }
        let mut vals: Vec<f64> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(move |p| if axis == Axis::X { p.0 } else { p.1 }))
            .collect();
        vals.extend(self.rules.iter().filter(|r| r.axis == axis).map(|r| r.at));
        for b in &self.bars {
            match axis {
                Axis::X => vals.extend([b.x0, b.x1]),
                Axis::Y => vals.extend([0.0, b.height]),
            }
        }
        let vals: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
            _ => (0.0, 1.0),
        }
    }

    fn render_panel(&self, out: &mut String, ox: f64) {
        let (x0, x1) = self.range(Axis::X);
        let (y0, y1) = self.range(Axis::Y);
        let pw = PANEL_W - MARGIN_L - MARGIN_R;
        let ph = PANEL_H - MARGIN_T - MARGIN_B;
        let sx = |x: f64| ox + MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + ph - (y - y0) / (y1 - y0) * ph;

        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            ox + PANEL_W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            ox + MARGIN_L, MARGIN_T, pw, ph
        );
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
                sx(xv), MARGIN_T + ph + 14.0, tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                ox + MARGIN_L - 4.0, sy(yv) + 3.0, tick(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            ox + MARGIN_L + pw / 2.0, PANEL_H - 12.0, escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            ox + 14.0, MARGIN_T + ph / 2.0, ox + 14.0, MARGIN_T + ph / 2.0, escape(&self.y_label)
        );

        for b in &self.bars {
            let top = sy(b.height.max(y0));
            let _ = writeln!(
                out,
                r##"<rect class="bar" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="#3182bd"/>"##,
                sx(b.x0), top, (sx(b.x1) - sx(b.x0)).max(0.0), (sy(y0) - top).max(0.0)
            );
        }
        for r in &self.rules {
            let (a, b, c, d) = match r.axis {
                Axis::X => (sx(r.at), MARGIN_T, sx(r.at), MARGIN_T + ph),
                Axis::Y => (ox + MARGIN_L, sy(r.at), ox + MARGIN_L + pw, sy(r.at)),
            };
            let _ = writeln!(
                out,
                r#"<line class="rule" data-label="{}" x1="{a:.2}" y1="{b:.2}" x2="{c:.2}" y2="{d:.2}" stroke="{}" stroke-width="1.5"{}/>"#,
                escape(&r.label), r.color, dash(r.dashed)
            );
        }
        for s in &self.series {
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{}" stroke-width="2"{}/>"#,
                escape(&s.label), pts.join(" "), s.color, dash(s.dashed)
            );
            if s.markers {
                for p in &pts {
                    let (x, y) = p.split_once(',').expect("formatted pair");
                    let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{}"/>"#, s.color);
                }
            }
        }

        let legend: Vec<(&str, &str, bool)> = self
            .series
            .iter()
            .map(|s| (s.label.as_str(), s.color, s.dashed))
            .chain(self.rules.iter().map(|r| (r.label.as_str(), r.color, r.dashed)))
            .filter(|l| !l.0.is_empty())
            .collect();
        for (i, (label, color, dashed)) in legend.iter().enumerate() {
            let y = MARGIN_T + 12.0 + 14.0 * i as f64;
            let x = ox + MARGIN_L + 8.0;
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"{}/>"#,
                x + 18.0, dash(*dashed)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
                x + 22.0, y + 3.0, escape(label)
            );
        }
    }
}

/// Lays panels out left to right in one document.
pub fn render(panels: &[Plot]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, p) in panels.iter().enumerate() {
        p.render_panel(&mut out, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

fn dash(dashed: bool) -> &'static str {
    if dashed {
        r#" stroke-dasharray="6 4""#
    } else {
        ""
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_rules_and_bars() {
        let mut p = Plot::new("t", "x", "y");
        p.series.push(Series::line("a<b", vec![(0.0, 0.0), (1.0, 2.0)], PALETTE[0]).with_markers());
        p.rules.push(Rule { label: "r".into(), axis: Axis::Y, at: 1.0, color: PALETTE[1], dashed: true });
        p.bars.push(Bar { x0: 0.0, x1: 0.5, height: 1.0 });
        let svg = render(&[p.clone(), p]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
        assert_eq!(svg.matches("class=\"bar\"").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn degenerate_ranges_do_not_produce_nan() {
        let mut p = Plot::new("", "", "");
        p.series.push(Series::line("flat", vec![(1.0, 3.0), (1.0, 3.0)], PALETTE[0]));
        let svg = render(&[p]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert!(!render(&[Plot::new("", "", "")]).contains("NaN"));
    }

    #[test]
    fn ticks_are_compact() {
        assert_eq!(tick(0.5), "0.5");
        assert_eq!(tick(2.0), "2");
        assert_eq!(tick(-0.0001), "0");
    }
}
