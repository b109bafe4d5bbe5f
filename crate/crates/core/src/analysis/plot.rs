//! Minimal SVG figures: a line plot of per-layer statistics and an
//! attention heatmap.

use std::fmt::Write;

const W: f64 = 560.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per series over a shared x axis; `log_y` plots log10.
pub fn line_plot(title: &str, x_label: &str, x: &[f64], series: &[(String, Vec<f64>)], log_y: bool) -> String {
    let tf = |v: f64| if log_y { v.max(1e-12).log10() } else { v };
    let ys: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().map(|&y| tf(y))).collect();
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (x0, x1) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |v: f64| MARGIN + (v - x0) / xspan * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (tf(v) - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{0}" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    for (lo, label) in [(y0, "min"), (y1, "max")] {
        let v = if log_y { 10f64.powf(lo) } else { lo };
        let y = if label == "min" { H - MARGIN } else { MARGIN };
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0, y + 4.0);
    }
    for &xv in x {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xv}</text>"#, px(xv), H - MARGIN + 14.0);
    }
    for (i, (name, v)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = x.iter().zip(v).map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - MARGIN - 120.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale heatmap, darker for larger values; `values` is rows × cols.
/// Columns before `marker` (if any) are outlined as prefix columns.
pub fn heatmap(title: &str, values: &[Vec<f64>], marker: Option<usize>) -> String {
    let rows = values.len().max(1);
    let cols = values.first().map_or(1, Vec::len).max(1);
    let cell = ((W - 2.0 * MARGIN) / cols as f64).min((H - 2.0 * MARGIN) / rows as f64);
    let max = values.iter().flatten().fold(0.0f64, |a, &v| a.max(v)).max(1e-12);
    let mut s = String::new();
    let (w, h) = (2.0 * MARGIN + cell * cols as f64, 2.0 * MARGIN + cell * rows as f64);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - (v / max).clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                MARGIN + c as f64 * cell,
                MARGIN + r as f64 * cell
            );
        }
    }
    if let Some(m) = marker.filter(|&m| m > 0) {
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{:.2}" height="{:.2}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            cell * m as f64,
            cell * rows as f64,
            COLORS[1]
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">key position</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">query position</text>"#, h / 2.0, h / 2.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed() {
        let p = line_plot("a<b", "layer", &[0.0, 1.0], &[("top-1".into(), vec![1.0, 10.0])], true);
        assert!(p.starts_with("<svg") && p.trim_end().ends_with("</svg>"));
        assert!(p.contains("a&lt;b"));
        let h = heatmap("attn", &[vec![1.0, 0.0], vec![0.5, 0.5]], Some(1));
        assert_eq!(h.matches("<rect").count(), 1 + 4 + 1);
    }
}
