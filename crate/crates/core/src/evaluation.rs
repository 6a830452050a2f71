//! Best-of-N displacement metrics, mode coverage, and occupancy grids.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::data::Point;
use crate::error::{shape_err, Error, Result};

/// Prediction counts of the N-sweep.
pub const SWEEP_NS: [usize; 5] = [4, 8, 12, 16, 20];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean point-to-point Euclidean distance.
pub fn ade(pred: &[Point], truth: &[Point]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(shape_err(
            "ade",
            format!("{} vs {} points", pred.len(), truth.len()),
        ));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&a, &b)| dist(a, b))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Distance between the final points.
pub fn fde(pred: &[Point], truth: &[Point]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(shape_err(
            "fde",
            format!("{} vs {} points", pred.len(), truth.len()),
        ));
    }
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

/// Minimum ADE and minimum FDE over the first `n` predictions, minimized independently.
pub fn best_of_n(preds: &[Vec<Point>], truth: &[Point], n: usize) -> Result<(f64, f64)> {
    if n < 1 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    if n > preds.len() {
        return Err(Error::Config(format!(
            "best-of-{n} requested from {} predictions",
            preds.len()
        )));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in &preds[..n] {
        best.0 = best.0.min(ade(p, truth)?);
        best.1 = best.1.min(fde(p, truth)?);
    }
    Ok(best)
}

/// Fraction of `modes` with at least one predicted endpoint within `radius`.
pub fn mode_recall(endpoints: &[Point], modes: &[Point], radius: f64) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::Config("mode_recall needs at least one mode".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!(
            "mode_recall radius must be positive, got {radius}"
        )));
    }
    let hit = modes
        .iter()
        .filter(|&&m| endpoints.iter().any(|&e| dist(e, m) <= radius))
        .count();
    Ok(hit as f64 / modes.len() as f64)
}

/// Axis-aligned region covered by a density grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    /// Smallest box containing every point, padded by `margin` on each side.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Point>, margin: f64) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (mut min, mut max) = (first, first);
        for p in it {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        Some(Self {
            min: [min[0] - margin, min[1] - margin],
            max: [max[0] + margin, max[1] + margin],
        })
    }
}

/// Per-timestep normalized 2-D histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub bounds: Bounds,
    pub resolution: usize,
    /// `layers[t][row * resolution + col]`; row 0 is the lowest y.
    pub layers: Vec<Vec<f64>>,
}

impl DensityGrid {
    pub fn cell(&self, t: usize, row: usize, col: usize) -> f64 {
        self.layers[t][row * self.resolution + col]
    }

    /// One CSV block per timestep: a `t=<index>` line followed by `resolution`
    /// rows from the lowest y upward.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "# bounds {} {} {} {} resolution {}",
            self.bounds.min[0],
            self.bounds.min[1],
            self.bounds.max[0],
            self.bounds.max[1],
            self.resolution
        )?;
        for (t, layer) in self.layers.iter().enumerate() {
            writeln!(f, "t={t}")?;
            for row in layer.chunks(self.resolution) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(f, "{}", line.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let err = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        let nums: Vec<f64> = head
            .trim_start_matches("# bounds")
            .split_whitespace()
            .filter(|w| *w != "resolution")
            .map(|w| w.parse().map_err(|_| err(1, "bad header")))
            .collect::<Result<_>>()?;
        if nums.len() != 5 {
            return Err(err(1, "header needs four bounds and a resolution"));
        }
        let resolution = nums[4] as usize;
        let mut layers: Vec<Vec<f64>> = Vec::new();
        for (i, line) in lines {
            if line.starts_with("t=") {
                layers.push(Vec::with_capacity(resolution * resolution));
                continue;
            }
            let layer = layers
                .last_mut()
                .ok_or_else(|| err(i + 1, "values before first t= line"))?;
            for v in line.split(',') {
                layer.push(v.trim().parse().map_err(|_| err(i + 1, "bad value"))?);
            }
        }
        if layers.iter().any(|l| l.len() != resolution * resolution) {
            return Err(err(1, "layer size does not match resolution"));
        }
        Ok(Self {
            bounds: Bounds {
                min: [nums[0], nums[1]],
                max: [nums[2], nums[3]],
            },
            resolution,
            layers,
        })
    }
}

/// Histograms the position at every timestep over all `trajectories`; each
/// layer sums to 1. Points outside `bounds` are clamped into the edge cells.
pub fn density_grid(
    trajectories: &[Vec<Point>],
    bounds: Bounds,
    resolution: usize,
) -> Result<DensityGrid> {
    if resolution < 2 {
        return Err(Error::Config(format!(
            "density grid resolution must be >= 2, got {resolution}"
        )));
    }
    let w = bounds.max[0] - bounds.min[0];
    let h = bounds.max[1] - bounds.min[1];
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::Config(format!("degenerate grid bounds {bounds:?}")));
    }
    let Some(first) = trajectories.first() else {
        return Err(Error::Data(
            "density grid needs at least one trajectory".into(),
        ));
    };
    let steps = first.len();
    if trajectories.iter().any(|t| t.len() != steps) {
        return Err(shape_err("density_grid", "trajectories differ in length"));
    }
    let cell = |v: f64, lo: f64, span: f64| {
        (((v - lo) / span * resolution as f64).floor().max(0.0) as usize).min(resolution - 1)
    };
    let mut counts = vec![vec![0u64; resolution * resolution]; steps];
    for traj in trajectories {
        for (t, p) in traj.iter().enumerate() {
            let c = cell(p[0], bounds.min[0], w);
            let r = cell(p[1], bounds.min[1], h);
            counts[t][r * resolution + c] += 1;
        }
    }
    let n = trajectories.len() as f64;
    Ok(DensityGrid {
        bounds,
        resolution,
        layers: counts
            .into_iter()
            .map(|layer| layer.into_iter().map(|c| c as f64 / n).collect())
            .collect(),
    })
}

/// Aggregated best-of-N metrics over a set of agents.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub agents: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    /// `(n, mean min_ade, mean min_fde)` for each swept `n`.
    pub sweep: Vec<(usize, f64, f64)>,
    pub mode_recall: Option<f64>,
    pub denoiser_calls: u64,
    pub network_ms_per_agent: f64,
    pub total_ms_per_agent: f64,
}

/// Per-agent inputs of [`evaluate`].
pub struct AgentPredictions<'a> {
    pub trajectories: &'a [Vec<Point>],
    pub truth: &'a [Point],
    /// Candidate endpoints of this agent's intention modes, when known.
    pub modes: Option<&'a [Point]>,
}

/// Averages best-of-N over agents for `n = min(count, 20)` and each swept `n`
/// that does not exceed the prediction count.
pub fn evaluate(
    agents: &[AgentPredictions<'_>],
    recall_radius: Option<f64>,
) -> Result<MetricReport> {
    if agents.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let count = agents
        .iter()
        .map(|a| a.trajectories.len())
        .min()
        .unwrap_or(0);
    if count == 0 {
        return Err(Error::Data("an agent has no predictions".into()));
    }
    let mean_at = |n: usize| -> Result<(f64, f64)> {
        let mut s = (0.0, 0.0);
        for a in agents {
            let (x, y) = best_of_n(a.trajectories, a.truth, n)?;
            s.0 += x;
            s.1 += y;
        }
        Ok((s.0 / agents.len() as f64, s.1 / agents.len() as f64))
    };
    let headline = count.min(20);
    let (min_ade, min_fde) = mean_at(headline)?;
    let sweep = SWEEP_NS
        .iter()
        .filter(|&&n| n <= count)
        .map(|&n| mean_at(n).map(|(a, f)| (n, a, f)))
        .collect::<Result<Vec<_>>>()?;
    let mode_recall = match recall_radius {
        Some(radius) => {
            let mut sum = 0.0;
            let mut seen = 0;
            for a in agents {
                if let Some(modes) = a.modes {
                    let ends: Vec<Point> = a.trajectories[..headline]
                        .iter()
                        .filter_map(|t| t.last().copied())
                        .collect();
                    sum += mode_recall(&ends, modes, radius)?;
                    seen += 1;
                }
            }
            (seen > 0).then(|| sum / seen as f64)
        }
        None => None,
    };
    Ok(MetricReport {
        agents: agents.len(),
        min_ade,
        min_fde,
        sweep,
        mode_recall,
        denoiser_calls: 0,
        network_ms_per_agent: 0.0,
        total_ms_per_agent: 0.0,
    })
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,n,value";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let _ = writeln!(s, "agents,,{}", self.agents);
        let _ = writeln!(s, "min_ade,,{:?}", self.min_ade);
        let _ = writeln!(s, "min_fde,,{:?}", self.min_fde);
        for (n, a, f) in &self.sweep {
            let _ = writeln!(s, "min_ade,{n},{a:?}");
            let _ = writeln!(s, "min_fde,{n},{f:?}");
        }
        if let Some(r) = self.mode_recall {
            let _ = writeln!(s, "mode_recall,,{r:?}");
        }
        let _ = writeln!(s, "denoiser_calls,,{}", self.denoiser_calls);
        let _ = writeln!(s, "network_ms_per_agent,,{:?}", self.network_ms_per_agent);
        let _ = writeln!(s, "total_ms_per_agent,,{:?}", self.total_ms_per_agent);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "agents:        {}", self.agents);
        let _ = writeln!(
            s,
            "minADE / minFDE: {:.4} / {:.4}",
            self.min_ade, self.min_fde
        );
        for (n, a, f) in &self.sweep {
            let _ = writeln!(s, "  N={n:<3} minADE {a:.4}  minFDE {f:.4}");
        }
        if let Some(r) = self.mode_recall {
            let _ = writeln!(s, "mode recall:   {r:.3}");
        }
        if self.denoiser_calls > 0 {
            let _ = writeln!(s, "denoiser calls: {}", self.denoiser_calls);
            let _ = writeln!(
                s,
                "ms per agent:  {:.3} (networks) {:.3} (with encoding)",
                self.network_ms_per_agent, self.total_ms_per_agent
            );
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.txt`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.summary())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, v: Point) -> Vec<Point> {
        (0..n).map(|i| [v[0] * i as f64, v[1] * i as f64]).collect()
    }

    #[test]
    fn ade_fde_basic_cases() {
        let truth = line(12, [0.3, 0.4]);
        assert_eq!(ade(&truth, &truth).unwrap(), 0.0);
        let shifted: Vec<Point> = truth.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((ade(&shifted, &truth).unwrap() - 5.0).abs() < 1e-12);
        let mut last = truth.clone();
        last[11] = [last[11][0] + 3.0, last[11][1] - 4.0];
        assert_eq!(fde(&last, &truth).unwrap(), 5.0);
        assert_eq!(fde(&truth, &truth).unwrap(), 0.0);
        assert!(ade(&truth[..3], &truth).is_err());
    }

    #[test]
    fn best_of_n_cases() {
        let truth = line(5, [1.0, 0.0]);
        let preds = vec![line(5, [0.0, 1.0]), truth.clone(), line(5, [1.0, 1.0])];
        let one = best_of_n(&preds, &truth, 1).unwrap();
        assert_eq!(
            one,
            (
                ade(&preds[0], &truth).unwrap(),
                fde(&preds[0], &truth).unwrap()
            )
        );
        assert_eq!(best_of_n(&preds, &truth, 3).unwrap(), (0.0, 0.0));
        assert!(best_of_n(&preds, &truth, 0).is_err());
        assert!(best_of_n(&preds, &truth, 4).is_err());
    }

    #[test]
    fn mode_recall_cases() {
        let modes = [[0.0, 5.0], [-5.0, 0.0], [5.0, 0.0]];
        assert_eq!(mode_recall(&modes, &modes, 0.1).unwrap(), 1.0);
        assert!((mode_recall(&[[0.0, 5.0]; 4], &modes, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(mode_recall(&modes, &[], 1.0).is_err());
        assert!(mode_recall(&modes, &modes, 0.0).is_err());
    }

    #[test]
    fn density_grid_cases() {
        let b = Bounds {
            min: [0.0, 0.0],
            max: [4.0, 4.0],
        };
        let g = density_grid(&vec![vec![[1.5, 2.5]; 3]; 7], b, 4).unwrap();
        assert_eq!(g.layers.len(), 3);
        assert_eq!(g.cell(0, 2, 1), 1.0);
        assert_eq!(g.layers[0].iter().filter(|&&v| v != 0.0).count(), 1);
        let spread: Vec<Vec<Point>> = (0..13)
            .map(|i| vec![[i as f64 * 0.3, 4.0 - i as f64 * 0.3]])
            .collect();
        let g = density_grid(&spread, b, 5).unwrap();
        assert!((g.layers[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(density_grid(&spread, b, 1).is_err());
        let flat = Bounds {
            min: [0.0, 1.0],
            max: [4.0, 1.0],
        };
        assert!(density_grid(&spread, flat, 4).is_err());
    }

    #[test]
    fn density_grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = Bounds {
            min: [-1.0, -2.0],
            max: [3.0, 2.5],
        };
        let trajs: Vec<Vec<Point>> = (0..9).map(|i| line(3, [0.1 * i as f64, 0.2])).collect();
        let g = density_grid(&trajs, b, 6).unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        assert_eq!(DensityGrid::read_csv(&p).unwrap(), g);
    }

    #[test]
    fn report_lists_sweep_and_recall() {
        let truth = line(4, [1.0, 0.0]);
        let preds: Vec<Vec<Point>> = (0..20).map(|i| line(4, [1.0, 0.05 * i as f64])).collect();
        let modes = [[3.0, 0.0]];
        let agents = [AgentPredictions {
            trajectories: &preds,
            truth: &truth,
            modes: Some(&modes),
        }];
        let r = evaluate(&agents, Some(0.5)).unwrap();
        assert_eq!(
            r.sweep.iter().map(|s| s.0).collect::<Vec<_>>(),
            SWEEP_NS.to_vec()
        );
        assert_eq!(r.mode_recall, Some(1.0));
        assert_eq!((r.min_ade, r.min_fde), (0.0, 0.0));
        assert!(r.to_csv().contains("min_fde,20,0.0"));
    }
}
