//! Minimal SVG line plots of median metrics against the grid variable.

use std::fmt::Write as _;

use crate::simlab::MetricsRow;

const W: f64 = 360.0;
const H: f64 = 260.0;
const PAD: f64 = 44.0;
const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#a6761d"];

fn metric(r: &MetricsRow, name: &str) -> Option<f64> {
    match name {
        "mse" => Some(r.mse),
        "bias" => Some(r.bias),
        "variance" => Some(r.variance),
        "coverage" => r.coverage,
        "inflation" => r.inflation,
        _ => None,
    }
    .filter(|v| v.is_finite())
}

fn panel(out: &mut String, rows: &[&MetricsRow], name: &str, x0: f64, methods: &[String]) {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| metric(r, name).map(|v| (r.grid_value, v))).collect();
    let _ = write!(out, r##"<g transform="translate({x0},0)">"##);
    let _ = write!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = write!(out, r##"<text x="{}" y="24" text-anchor="middle" font-size="13">{name}</text>"##, W / 2.0);
    if pts.is_empty() {
        out.push_str("</g>");
        return;
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| PAD + (x - xmin) / (xmax - xmin) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - ymin) / (ymax - ymin) * (H - 2.0 * PAD);
    let _ = write!(out, r##"<text x="{PAD}" y="{}" font-size="10">{xmin:.3}</text>"##, H - PAD + 14.0);
    let _ = write!(out, r##"<text x="{}" y="{}" font-size="10" text-anchor="end">{xmax:.3}</text>"##, W - PAD, H - PAD + 14.0);
    let _ = write!(out, r##"<text x="{}" y="{}" font-size="10" text-anchor="end">{ymin:.3e}</text>"##, PAD - 2.0, H - PAD);
    let _ = write!(out, r##"<text x="{}" y="{}" font-size="10" text-anchor="end">{ymax:.3e}</text>"##, PAD - 2.0, PAD + 8.0);
    for (m, method) in methods.iter().enumerate() {
        let mut line: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.method == method)
            .filter_map(|r| metric(r, name).map(|v| (sx(r.grid_value), sy(v))))
            .collect();
        line.sort_by(|a, b| a.0.total_cmp(&b.0));
        if line.is_empty() {
            continue;
        }
        let color = COLORS[m % COLORS.len()];
        let path: Vec<String> = line.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = write!(out, r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##, path.join(" "));
        for (x, y) in &line {
            let _ = write!(out, r##"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"##);
        }
    }
    out.push_str("</g>");
}

/// Three panels (MSE, coverage, inflation) of the median rows.
pub fn render_svg(rows: &[MetricsRow]) -> String {
    let med = crate::simlab::medians(rows);
    let mut methods: Vec<String> = Vec::new();
    for r in &med {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let panels = ["mse", "coverage", "inflation"];
    let legend_h = 18.0 * methods.len() as f64 + 10.0;
    let mut out = String::new();
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif">"##,
        W * panels.len() as f64,
        H + legend_h
    );
    for (i, p) in panels.iter().enumerate() {
        panel(&mut out, &med, p, W * i as f64, &methods);
    }
    let xlabel = med.first().map_or("grid", |r| r.grid.as_str());
    let _ = write!(out, r##"<text x="8" y="{}" font-size="11">x axis: {xlabel}</text>"##, H + 4.0);
    for (m, method) in methods.iter().enumerate() {
        let y = H + 20.0 + 18.0 * m as f64;
        let color = COLORS[m % COLORS.len()];
        let _ = write!(out, r##"<rect x="100" y="{}" width="12" height="4" fill="{color}"/>"##, y - 4.0);
        let _ = write!(out, r##"<text x="118" y="{y}" font-size="11">{method}</text>"##);
    }
    out.push_str("</svg>\n");
    out
}
