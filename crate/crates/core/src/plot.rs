//! Static SVG space-time plots.
//!
//! Planar trajectories are drawn in an oblique projection with time along the diagonal;
//! one-dimensional ones as `x` against `t`. Each landmark track is colored segment by
//! segment by `‖u_i(t)‖`, normalized by its maximum over the plot.

use std::fmt::Write as _;

use crate::dynamics::{ControlPath, Trajectory};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 40.0;
/// Screen offset per unit of normalized time in the oblique view, as a fraction of the plot size.
const TIME_SHEAR: (f64, f64) = (0.35, -0.35);

const STOPS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let f = v - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + f * (y - x)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Renders the trajectory; `u` supplies the colors (uniform if absent) and `marked`
/// lists node indices whose configurations are outlined.
pub fn space_time_svg(traj: &Trajectory, u: Option<&ControlPath>, marked: &[usize]) -> String {
    let first = &traj.states[0];
    let (n, d) = (first.landmarks(), first.dim);
    let horizon = traj.grid.horizon();
    let planar = d >= 2;

    let raw = |j: usize, i: usize| -> (f64, f64, f64) {
        let x = &traj.states[j].x;
        let t = traj.grid.node(j) / horizon;
        if planar {
            (x[i * d], x[i * d + 1], t)
        } else {
            (t, x[i * d], 0.0)
        }
    };
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for j in 0..traj.states.len() {
        for i in 0..n {
            let (a, b, _) = raw(j, i);
            lo = (lo.0.min(a), lo.1.min(b));
            hi = (hi.0.max(a), hi.1.max(b));
        }
    }
    let span = ((hi.0 - lo.0).max(hi.1 - lo.1)).max(1e-12);
    let (sx, sy) = if planar { TIME_SHEAR } else { (0.0, 0.0) };
    let inner_w = (WIDTH - 2.0 * MARGIN) / (1.0 + sx.abs());
    let inner_h = (HEIGHT - 2.0 * MARGIN) / (1.0 + sy.abs());
    let scale = inner_w.min(inner_h) / span;
    let project = |j: usize, i: usize| -> (f64, f64) {
        let (a, b, t) = raw(j, i);
        let px = MARGIN + (a - lo.0) * scale + sx * t * inner_w;
        let py = HEIGHT - MARGIN - (b - lo.1) * scale + sy * t * inner_h;
        (px, py)
    };

    let norms: Vec<Vec<f64>> = match u {
        Some(u) => u
            .samples
            .iter()
            .map(|s| {
                (0..n)
                    .map(|i| s[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            })
            .collect(),
        None => vec![vec![0.0; n]; traj.states.len()],
    };
    let max = norms.iter().flatten().fold(0.0_f64, |m, v| m.max(*v));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r##"<g fill="none" stroke="#b0b0b0" stroke-width="1">"##);
    for &j in marked.iter().filter(|j| **j < traj.states.len()) {
        let pts: Vec<String> = (0..n)
            .map(|i| project(j, i))
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let tag = if planar && n > 2 { "polygon" } else { "polyline" };
        let _ = writeln!(svg, r#"<{tag} points="{}"/>"#, pts.join(" "));
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g stroke-width="1.5" stroke-linecap="round">"#);
    for i in 0..n {
        for j in 0..traj.states.len() - 1 {
            let (x0, y0) = project(j, i);
            let (x1, y1) = project(j + 1, i);
            let v = if max > 0.0 {
                0.5 * (norms[j][i] + norms[j + 1][i]) / max
            } else {
                0.0
            };
            let _ = writeln!(
                svg,
                r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="{}"/>"#,
                color(v)
            );
        }
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.0}" font-family="sans-serif" font-size="12">max |u| = {max:.4e}, T = {horizon}</text>"#,
        MARGIN * 0.6
    );
    svg.push_str("</svg>\n");
    svg
}
