//! Minimal static SVG charts. Every chart has a matching CSV with the plotted
//! values, so these only need to be readable, not pretty.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 110.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

pub(crate) const SURVIVED: &str = "#1f77b4";
pub(crate) const DIED: &str = "#d62728";

/// Maps `[lo, hi]` onto the plot box.
pub(crate) struct Chart {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Chart {
    pub fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        Chart { x: padded(x.0, x.1), y: padded(y.0, y.1), body: String::new() }
    }

    /// Exact ranges, for bar charts that should start at 0.
    pub fn exact(x: (f64, f64), y: (f64, f64)) -> Self {
        let fix = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
        Chart { x: fix(x), y: fix(y), body: String::new() }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    pub fn point(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#,
            self.px(x),
            self.py(y)
        );
    }

    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-opacity="0.5"/>"#,
            self.px(a.0),
            self.py(a.1),
            self.px(b.0),
            self.py(b.1)
        );
        let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, self.px(b.0), self.py(b.1));
    }

    pub fn bar(&mut self, x0: f64, x1: f64, height: f64, color: &str) {
        let (l, r) = (self.px(x0), self.px(x1));
        let (t, b) = (self.py(height), self.py(self.y.0));
        let _ = writeln!(
            self.body,
            r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="{color}" stroke="white"/>"#,
            (r - l).max(0.0),
            (b - t).max(0.0)
        );
    }

    /// Legend entries drawn to the right of the plot box.
    pub fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = TOP + 20.0 + 18.0 * i as f64;
            let _ = writeln!(self.body, r#"<rect x="{:.0}" y="{:.0}" width="10" height="10" fill="{color}"/>"#, W - RIGHT + 12.0, y - 9.0);
            let _ = writeln!(self.body, r#"<text x="{:.0}" y="{y:.0}" font-size="11">{}</text>"#, W - RIGHT + 27.0, escape(label));
        }
    }

    /// Vertical color bar for a continuous color scale.
    pub fn colorbar(&mut self, lo: f64, hi: f64) {
        let steps = 20;
        let h = (H - TOP - BOTTOM) / steps as f64;
        for i in 0..steps {
            let t = 1.0 - (i as f64 + 0.5) / steps as f64;
            let _ = writeln!(
                self.body,
                r#"<rect x="{:.0}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
                W - RIGHT + 15.0,
                TOP + i as f64 * h,
                h + 0.5,
                ramp(t)
            );
        }
        for (v, y) in [(hi, TOP + 4.0), (lo, H - BOTTOM)] {
            let _ = writeln!(self.body, r#"<text x="{:.0}" y="{y:.0}" font-size="11">{}</text>"#, W - RIGHT + 34.0, tick(v));
        }
    }

    pub fn render(self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.0}" y="24" font-size="15" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y1 - y0
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let _ = writeln!(s, r#"<line x1="{xp:.2}" y1="{y1}" x2="{xp:.2}" y2="{:.0}" stroke="black"/>"#, y1 + 5.0);
            let _ = writeln!(s, r#"<text x="{xp:.2}" y="{:.0}" font-size="11" text-anchor="middle">{}</text>"#, y1 + 18.0, tick(xv));
            let _ = writeln!(s, r#"<line x1="{:.0}" y1="{yp:.2}" x2="{x0}" y2="{yp:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(s, r#"<text x="{:.0}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, x0 - 8.0, yp + 4.0, tick(yv));
        }
        let _ = writeln!(s, r#"<text x="{:.0}" y="{:.0}" font-size="12" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 15.0, escape(x_label));
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.0}" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.0})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue to yellow through green, `t ∈ [0, 1]`.
pub(crate) fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 4] = [(68.0, 1.0, 84.0), (49.0, 104.0, 142.0), (53.0, 183.0, 121.0), (253.0, 231.0, 37.0)];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }

    #[test]
    fn chart_is_well_formed() {
        let mut c = Chart::new((0.0, 1.0), (0.0, 0.0));
        c.point(0.5, 0.0, SURVIVED);
        c.legend(&[("a<b", DIED)]);
        let s = c.render("t", "x", "y");
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<circle").count(), 1);
        assert!(s.contains("a&lt;b"));
        assert!(!s.contains("NaN"));
    }
}
