//! Minimal SVG emitters for line charts and heatmaps.

use std::fmt::Write;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with markers; `y_range` fixes the vertical axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: (f64, f64)) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 55.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (y0, y1) = y_range;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, left + pw / 2.0, escape(title));
    for i in 0..=5 {
        let y = y0 + (y1 - y0) * i as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(out, r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{y:.1}</text>"#, left - 6.0, py + 4.0);
    }
    let ticks: Vec<f64> = {
        let mut t: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    };
    for x in ticks {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{x}</text>"#, sx(x), top + ph + 16.0);
    }
    let _ = writeln!(out, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, h - 14.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 20.0 * i as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 22.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, lx + 28.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Diverging blue-white-red color for `v` in `[lo, hi]`.
fn diverging(v: f64, lo: f64, hi: f64) -> String {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 2.0 - 1.0;
    let (r, g, b) = if t < 0.0 {
        let a = -t;
        (255.0 * (1.0 - a) + 33.0 * a, 255.0 * (1.0 - a) + 102.0 * a, 255.0 * (1.0 - a) + 172.0 * a)
    } else {
        (255.0 * (1.0 - t) + 178.0 * t, 255.0 * (1.0 - t) + 24.0 * t, 255.0 * (1.0 - t) + 43.0 * t)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Heatmap of `values` (row-major) with a fixed color scale.
pub fn heatmap(title: &str, values: &[Vec<f64>], range: (f64, f64), row_label: &str, col_label: &str) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let cell = (360.0 / rows.max(cols).max(1) as f64).clamp(4.0, 24.0);
    let (left, top) = (60.0, 44.0);
    let pw = cell * cols as f64;
    let ph = cell * rows as f64;
    let w = left + pw + 110.0;
    let h = top + ph + 50.0;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif">"#);
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}"><title>{v:.4}</title></rect>"#,
                left + cell * j as f64,
                top + cell * i as f64,
                diverging(v, range.0, range.1)
            );
        }
    }
    let _ = writeln!(out, r#"<rect x="{left}" y="{top}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, left + pw / 2.0, top + ph + 22.0, escape(col_label));
    let _ = writeln!(
        out,
        r#"<text x="30" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 30 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(row_label)
    );
    let bar_x = left + pw + 30.0;
    let steps = 20;
    let bar_h = ph.max(80.0);
    for k in 0..steps {
        let v = range.1 - (range.1 - range.0) * (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{bar_x:.1}" y="{:.1}" width="16" height="{:.2}" fill="{}"/>"#,
            top + bar_h * k as f64 / steps as f64,
            bar_h / steps as f64 + 0.5,
            diverging(v, range.0, range.1)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{:.1}</text>"#, bar_x + 20.0, top + 8.0, range.1);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{:.1}</text>"#, bar_x + 20.0, top + bar_h, range.0);
    out.push_str("</svg>\n");
    out
}
