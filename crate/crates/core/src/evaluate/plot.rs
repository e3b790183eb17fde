//! Minimal SVG renderings of PR curves and the confusion matrix.

use std::fmt::Write;

use super::EvalReport;

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Precision against recall for every class, with per-class AP in the legend.
pub fn pr_curve_svg(r: &EvalReport) -> String {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let (x, y) = (m + t * pw, m + ph - t * ph);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t:.1}</text>"#, m + ph + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.1}</text>"#, m - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Recall</text>"#, m + pw / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">Precision</text>"#, m + ph / 2.0, m + ph / 2.0);
    for (k, c) in r.classes.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut pts = format!("{:.2},{:.2}", m, m + ph - ph * c.curve.points.first().map_or(0.0, |p| p.precision));
        for p in &c.curve.points {
            let _ = write!(pts, " {:.2},{:.2}", m + p.recall * pw, m + ph - p.precision * ph);
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>"#);
        let ly = m + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}">{} {:.3}</text>"#, m + 8.0, escape(&c.name), c.ap);
    }
    let ly = m + 14.0 + 16.0 * r.classes.len() as f64;
    let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">all classes {:.3} mAP@{}</text>"#, m + 8.0, r.map50, r.iou_threshold);
    s.push_str("</svg>\n");
    s
}

/// Row-normalised heatmap with raw counts printed in each cell.
pub fn confusion_svg(r: &EvalReport) -> String {
    let mut names = r.class_names();
    names.push("background".into());
    let n = names.len();
    let (cell, m) = (56.0, 100.0);
    let size = m + cell * n as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    for (i, row) in r.confusion.counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let frac = if total > 0 { v as f64 / total as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (m + j as f64 * cell, m + i as f64 * cell);
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="gray"/>"#);
            let ink = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{v}</text>"#, x + cell / 2.0, y + cell / 2.0 + 4.0);
        }
    }
    for (k, name) in names.iter().enumerate() {
        let c = m + (k as f64 + 0.5) * cell;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{c:.1}" text-anchor="end">{}</text>"#, m - 6.0, escape(name));
        let _ = writeln!(s, r#"<text x="{c:.1}" y="{:.1}" text-anchor="start" transform="rotate(-45 {c:.1} {:.1})">{}</text>"#, m - 6.0, m - 6.0, escape(name));
    }
    let _ = writeln!(s, r#"<text x="8" y="16">rows: truth, columns: predicted</text>"#);
    s.push_str("</svg>\n");
    s
}
