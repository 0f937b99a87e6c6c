//! Plain-text fit summaries and SVG scatter plots with the fitted curve.

use std::fmt::Write;

use super::model::{ModelKind, PowerModel};

/// Standardized residual beyond which a point is listed as anomalous.
/// Points are only listed; the fit always uses every point.
const ANOMALY_SIGMA: f64 = 2.5;

pub fn fit_report(model: &PowerModel, points: &[(f64, f64)]) -> String {
    let mut out = String::new();
    let what = match model.kind {
        ModelKind::LogCores => "package power vs log2(average active cores)",
        ModelKind::LinearMemory => "DRAM power vs LLC misses per second",
    };
    let _ = writeln!(out, "model: {what}");
    let _ = writeln!(out, "fit: {}", model.equation());
    let _ = writeln!(out, "slope: {}", model.slope);
    let _ = writeln!(out, "intercept: {}", model.intercept);
    match model.r_squared {
        Some(r) => {
            let _ = writeln!(out, "r_squared: {r}");
        }
        None => {
            let _ = writeln!(out, "r_squared: undefined (no variance in power)");
        }
    }
    let _ = writeln!(out, "points: {}", points.len());
    if model.kind == ModelKind::LogCores {
        let _ = writeln!(out, "watts_per_doubling: {}", model.slope);
    }

    let residuals: Vec<f64> = points.iter().map(|&(x, y)| model.power_at(x).map_or(f64::NAN, |p| y - p)).collect();
    let n = residuals.len() as f64;
    let sd = if residuals.len() > 2 { (residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2.0)).sqrt() } else { 0.0 };
    let anomalies: Vec<usize> =
        (0..points.len()).filter(|&i| sd > 0.0 && (residuals[i] / sd).abs() > ANOMALY_SIGMA).collect();
    let _ = writeln!(out, "residual_sd: {sd}");
    let _ = writeln!(out, "anomalous_points: {}", anomalies.len());
    for i in anomalies {
        let (x, y) = points[i];
        let _ = writeln!(out, "  x={x} y={y} residual={:.4} ({:.2} sd)", residuals[i], residuals[i] / sd);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A scatter of `points` with the fitted model drawn across the data range.
/// The log model is drawn on a log2 x axis.
pub fn scatter_svg(model: &PowerModel, points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 55.0;
    let log_x = model.kind == ModelKind::LogCores;
    let tx = |x: f64| if log_x { x.log2() } else { x };

    let shown: Vec<(f64, f64)> =
        points.iter().map(|&(x, y)| (tx(x), y)).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x0, mut x1) = shown.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    let curve: Vec<(f64, f64)> =
        (0..=100).map(|i| x0 + (x1 - x0) * i as f64 / 100.0).map(|u| (u, model.slope * u + model.intercept)).collect();
    let ys = shown.iter().chain(&curve).map(|p| p.1);
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if y1 - y0 <= 0.0 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let pad = (y1 - y0) * 0.05;
    (y0, y1) = (y0 - pad, y1 + pad);

    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{0}" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let xt = if log_x { format!("{:.3}", xv.exp2()) } else { format!("{xv:.3e}") };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{xt}</text>"#,
            px(xv),
            H - B + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{yv:.1}</text>"#,
            L - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        (L + W - R) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(y_label)
    );
    for &(x, y) in &shown {
        let _ =
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue" fill-opacity="0.7"/>"#, px(x), py(y));
    }
    let path: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="firebrick" stroke-width="2"/>"#, path.join(" "));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="firebrick">{}</text>"#,
        L + 10.0,
        T + 14.0,
        escape(&model.equation())
    );
    s.push_str("</svg>\n");
    s
}
