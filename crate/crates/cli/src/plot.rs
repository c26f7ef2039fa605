use std::fmt::Write as _;

use textlip_core::geometry::LipVector40;

const CELL: f64 = 90.0;
const MARGIN: f64 = 40.0;

/// Grid of lip outlines: one row per component, one column per scale.
/// Points 1-12 form the outer contour, 13-20 the inner one.
pub fn component_sweep_svg(shapes: &[Vec<LipVector40>], scales: &[f64]) -> String {
    let (lo, hi) = shapes
        .iter()
        .flatten()
        .flat_map(|v| v.0.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(1e-9);
    let unit = 0.8 * CELL / span;
    let w = MARGIN + CELL * scales.len() as f64;
    let h = MARGIN + CELL * shapes.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (j, s) in scales.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="15" text-anchor="middle">{s:.2}</text>"#,
            MARGIN + CELL * (j as f64 + 0.5)
        );
    }
    for (i, row) in shapes.iter().enumerate() {
        let cy = MARGIN + CELL * (i as f64 + 0.5);
        let _ = writeln!(svg, r#"<text x="5" y="{:.1}">PC{}</text>"#, cy + 4.0, i + 1);
        for (j, v) in row.iter().enumerate() {
            let cx = MARGIN + CELL * (j as f64 + 0.5);
            // Image y grows downward; the canonical lip space does too.
            let pts: Vec<String> = v
                .points()
                .iter()
                .map(|p| format!("{:.2},{:.2}", cx + p.x * unit, cy + p.y * unit))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="none" stroke="firebrick"/>"#,
                pts[..12].join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="none" stroke="steelblue"/>"#,
                pts[12..].join(" ")
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
