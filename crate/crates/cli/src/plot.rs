//! Plot data tables and minimal SVG renderings.

use std::fmt::Write as _;

use forcefit::contact::{contact_probability, ContactParams};

/// Contact widths drawn in the probability curve, in meters.
const CURVE_WIDTHS: [f64; 5] = [0.030, 0.015, 0.008, 0.004, 0.002];
const CURVE_RANGE_MM: (f64, f64) = (-10.0, 30.0);
const CURVE_STEP_MM: f64 = 0.25;
const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn curve_points() -> Vec<f64> {
    let n = ((CURVE_RANGE_MM.1 - CURVE_RANGE_MM.0) / CURVE_STEP_MM).round() as usize;
    (0..=n).map(|k| CURVE_RANGE_MM.0 + k as f64 * CURVE_STEP_MM).collect()
}

fn probability(d_mm: f64, z: f64, p0: f64) -> f64 {
    let params = ContactParams::new(z, p0).expect("valid curve parameters");
    contact_probability(d_mm * 1e-3, &params)
}

/// Probability of contact against distance for several widths.
pub fn contact_curve_table(p0: f64) -> String {
    let mut s = String::from("distance_mm");
    for z in CURVE_WIDTHS {
        let _ = write!(s, "\tz_{}mm", z * 1e3);
    }
    s.push('\n');
    for d in curve_points() {
        let _ = write!(s, "{d}");
        for z in CURVE_WIDTHS {
            let _ = write!(s, "\t{:.6e}", probability(d, z, p0));
        }
        s.push('\n');
    }
    s
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN / 2.0,
        b = H - MARGIN,
        r = W - MARGIN / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="14" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    s
}

fn to_px(x: f64, y: f64, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> (f64, f64) {
    let px = MARGIN + (x - x0) / (x1 - x0) * (W - 1.5 * MARGIN);
    let py = H - MARGIN - (y - y0) / (y1 - y0) * (H - 1.5 * MARGIN);
    (px, py)
}

pub fn contact_curve_svg(p0: f64) -> String {
    let mut s = frame("probability of contact", "distance (mm)", "p");
    let xs = curve_points();
    for (k, z) in CURVE_WIDTHS.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .map(|&d| {
                let (x, y) = to_px(d, probability(d, *z, p0), CURVE_RANGE_MM, (0.0, 1.0));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let shade = 40 + 40 * k;
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="rgb({shade},{shade},220)"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bin counts over `bins` equal-width bins spanning the data.
pub fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let mut counts = vec![0; bins];
    for v in values {
        let k = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

pub fn histogram_svg(values: &[f64], label: &str) -> String {
    let (lo, hi, counts) = histogram(values, 10);
    let top = *counts.iter().max().unwrap_or(&1) as f64;
    let mut s = frame(label, label, "scenes");
    let width = (hi - lo) / counts.len() as f64;
    for (k, &c) in counts.iter().enumerate() {
        let (x0, y0) = to_px(lo + k as f64 * width, c as f64, (lo, hi), (0.0, top));
        let (x1, y1) = to_px(lo + (k + 1) as f64 * width, 0.0, (lo, hi), (0.0, top));
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="steelblue" stroke="white"/>"#,
            x1 - x0,
            y1 - y0
        );
    }
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}">{lo:.3}</text>"#, H - MARGIN + 14.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#,
        W - MARGIN / 2.0,
        H - MARGIN + 14.0
    );
    s.push_str("</svg>\n");
    s
}
