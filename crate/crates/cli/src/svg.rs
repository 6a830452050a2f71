use std::fmt::Write;

use idm_core::data::Point;
use idm_core::evaluation::{Bounds, DensityGrid};

const SIZE: f64 = 480.0;
const PAD: f64 = 16.0;

struct Frame {
    bounds: Bounds,
    scale: f64,
}

impl Frame {
    fn new(bounds: Bounds) -> Self {
        let w = bounds.max[0] - bounds.min[0];
        let h = bounds.max[1] - bounds.min[1];
        Self {
            bounds,
            scale: (SIZE - 2.0 * PAD) / w.max(h).max(1e-9),
        }
    }

    /// SVG y grows downward, scene y upward.
    fn map(&self, p: Point) -> (f64, f64) {
        (
            PAD + (p[0] - self.bounds.min[0]) * self.scale,
            SIZE - PAD - (p[1] - self.bounds.min[1]) * self.scale,
        )
    }
}

fn open(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#
    );
}

/// One polyline per trajectory; an empty set gives an empty canvas.
pub fn trajectories(trajs: &[Vec<Point>]) -> String {
    let mut out = String::new();
    open(&mut out);
    if let Some(bounds) = Bounds::enclosing(trajs.iter().flatten(), 0.5) {
        let frame = Frame::new(bounds);
        for t in trajs {
            let pts: Vec<String> = t
                .iter()
                .map(|&p| {
                    let (x, y) = frame.map(p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-opacity="0.6" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Filled cells of the selected layers, opacity proportional to density.
pub fn density(grid: &DensityGrid, layers: &[usize]) -> String {
    let mut out = String::new();
    open(&mut out);
    let frame = Frame::new(grid.bounds);
    let n = grid.resolution;
    let cw = (grid.bounds.max[0] - grid.bounds.min[0]) / n as f64;
    let ch = (grid.bounds.max[1] - grid.bounds.min[1]) / n as f64;
    for &t in layers {
        let peak = grid.layers[t].iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            continue;
        }
        let _ = writeln!(out, r#"<g class="layer" data-t="{t}">"#);
        for row in 0..n {
            for col in 0..n {
                let v = grid.cell(t, row, col);
                if v <= 0.0 {
                    continue;
                }
                let lo = [
                    grid.bounds.min[0] + col as f64 * cw,
                    grid.bounds.min[1] + (row + 1) as f64 * ch,
                ];
                let (x, y) = frame.map(lo);
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="darkred" fill-opacity="{:.3}"/>"#,
                    cw * frame.scale,
                    ch * frame.scale,
                    v / peak
                );
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use idm_core::evaluation::density_grid;

    #[test]
    fn empty_set_is_a_valid_canvas() {
        let svg = trajectories(&[]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn one_trajectory_one_polyline() {
        let t: Vec<Point> = (0..12).map(|i| [0.0, i as f64 * 0.4]).collect();
        let svg = trajectories(&[t]);
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(points.split(' ').count(), 12);
    }

    #[test]
    fn density_layers_are_selectable() {
        let b = Bounds {
            min: [0.0, 0.0],
            max: [2.0, 2.0],
        };
        let g = density_grid(&[vec![[0.5, 0.5], [1.5, 1.5]]], b, 2).unwrap();
        let one = density(&g, &[1]);
        assert_eq!(one.matches("<g class=\"layer\"").count(), 1);
        assert!(one.contains("data-t=\"1\""));
        // cell (row 1, col 1) is the upper-right quadrant: top-left corner at the canvas centre row 0
        assert!(
            one.contains(r#"<rect x="240.00" y="16.00" width="224.00" height="224.00""#),
            "{one}"
        );
        let both = density(&g, &[0, 1]);
        assert_eq!(both.matches("<g class=\"layer\"").count(), 2);
    }
}
