//! Static SVG plots for `eval --report`.

use std::fmt::Write;

const W: f64 = 420.0;
const H: f64 = 420.0;
const M: f64 = 50.0;

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{cx}" y="20" text-anchor="middle" font-size="14">{title}</text>
<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>
<text x="{cx}" y="{xl}" text-anchor="middle">{x_label}</text>
<text x="14" y="{cy}" text-anchor="middle" transform="rotate(-90 14 {cy})">{y_label}</text>
"##,
        cx = W / 2.0,
        cy = H / 2.0,
        b = H - M,
        r = W - M,
        xl = H - 12.0,
    );
    s
}

fn px(x: f64) -> f64 {
    M + x * (W - 2.0 * M)
}

fn py(y: f64) -> f64 {
    H - M - y * (H - 2.0 * M)
}

/// ROC curve from `(fpr, tpr)` points with the chance diagonal.
pub fn roc_svg(points: &[(f64, f64)], auc: f64) -> String {
    let mut s = frame(&format!("ROC (AUC = {auc:.4})"), "false positive rate", "true positive rate");
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
    s.push_str("</svg>\n");
    s
}

fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = (((v + 1.0) / 2.0) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
        h[b] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter().map(|c| c / n).collect()
}

/// Overlaid normalized histograms of positive and negative cosines on [-1, 1].
pub fn cosine_svg(pos: &[f64], neg: &[f64], bins: usize) -> String {
    let (hp, hn) = (histogram(pos, bins), histogram(neg, bins));
    let top = hp.iter().chain(&hn).copied().fold(0.0, f64::max).max(1e-12);
    let mut s = frame("cosine similarity", "cosine", "fraction of pairs");
    let bw = 1.0 / bins as f64;
    for (hist, color) in [(&hn, "indianred"), (&hp, "steelblue")] {
        for (i, c) in hist.iter().enumerate() {
            let (x0, y0) = (px(i as f64 * bw), py(c / top));
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                px(bw) - M,
                py(0.0) - y0
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="40" fill="steelblue">positive ({})</text>"#, M + 10.0, pos.len());
    let _ = writeln!(s, r#"<text x="{}" y="56" fill="indianred">negative ({})</text>"#, M + 10.0, neg.len());
    for (v, label) in [(0.0, "-1"), (0.5, "0"), (1.0, "1")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#, px(v), H - M + 15.0);
    }
    s.push_str("</svg>\n");
    s
}
