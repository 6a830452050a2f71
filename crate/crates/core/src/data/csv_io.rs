use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Point, TrajectorySample};
use crate::error::{Error, Result};

/// Identifies one prediction window: agent plus the time of its first future point.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowKey {
    pub scene_id: String,
    pub agent_id: String,
    /// First future timestamp, rounded to 1e-6 so text round trips compare equal.
    pub t_micros: i64,
}

impl WindowKey {
    pub fn new(scene_id: &str, agent_id: &str, t: f64) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            agent_id: agent_id.to_string(),
            t_micros: (t * 1e6).round() as i64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeLabel {
    pub scene_id: String,
    pub agent_id: String,
    pub mode: String,
}

/// Candidate intention endpoints for one agent window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeEndpoints {
    pub scene_id: String,
    pub agent_id: String,
    pub modes: Vec<(String, Point)>,
}

struct Row {
    line: usize,
    t: f64,
    p: Point,
}

/// Agent ids in first-seen order plus each agent's rows.
type Scene = (Vec<String>, HashMap<String, Vec<Row>>);

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}")))
}

/// Reads `scene_id, agent_id, t, x, y` rows and cuts every agent track into
/// sliding windows of `t_p + t_q` points.
///
/// Timestamps must increase within each agent. A jump larger than the scene's
/// base spacing splits a track; windows never cross such a gap. Neighbors of a
/// window are the other agents of the same scene observed at every history
/// timestamp of that window.
pub fn load_trajectory_csv(path: &Path, t_p: usize, t_q: usize, stride: usize) -> Result<Dataset> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = [
        column(&headers, "scene_id", path)?,
        column(&headers, "agent_id", path)?,
        column(&headers, "t", path)?,
        column(&headers, "x", path)?,
        column(&headers, "y", path)?,
    ];

    // scene -> agents in first-appearance order
    let mut scene_order: Vec<String> = Vec::new();
    let mut scenes: HashMap<String, Scene> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        let field = |c: usize| {
            record
                .get(c)
                .ok_or_else(|| parse_err(path, line, "short row"))
        };
        let num = |c: usize, name: &str| -> Result<f64> {
            let raw = field(c)?;
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(path, line, format!("{name}: not a number: {raw:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("{name}: non-finite")));
            }
            Ok(v)
        };
        let scene = field(cols[0])?.to_string();
        let agent = field(cols[1])?.to_string();
        let row = Row {
            line,
            t: num(cols[2], "t")?,
            p: [num(cols[3], "x")?, num(cols[4], "y")?],
        };
        let entry = scenes.entry(scene.clone()).or_insert_with(|| {
            scene_order.push(scene.clone());
            (Vec::new(), HashMap::new())
        });
        let track = entry.1.entry(agent.clone()).or_insert_with(|| {
            entry.0.push(agent.clone());
            Vec::new()
        });
        if let Some(prev) = track.last() {
            if row.t <= prev.t {
                return Err(parse_err(
                    path,
                    line,
                    format!(
                        "non-monotone t for agent {agent}: {} after {}",
                        row.t, prev.t
                    ),
                ));
            }
        }
        track.push(row);
    }

    let window = t_p + t_q;
    let mut samples = Vec::new();
    for scene in &scene_order {
        let (agent_order, tracks) = &scenes[scene];
        let dt = tracks
            .values()
            .flat_map(|rows| rows.windows(2).map(|w| w[1].t - w[0].t))
            .fold(f64::INFINITY, f64::min);
        if !dt.is_finite() {
            continue; // every agent has a single row
        }
        let t0 = tracks
            .values()
            .flat_map(|rows| rows.iter().map(|r| r.t))
            .fold(f64::INFINITY, f64::min);
        let tick = |t: f64| ((t - t0) / dt).round() as i64;
        for (r, rows) in tracks
            .values()
            .flat_map(|rows| rows.windows(2))
            .map(|w| (w[1].line, w))
        {
            let steps = (rows[1].t - rows[0].t) / dt;
            if (steps - steps.round()).abs() > 1e-6 {
                return Err(parse_err(
                    path,
                    r,
                    format!(
                        "t spacing {} is not a multiple of {dt}",
                        rows[1].t - rows[0].t
                    ),
                ));
            }
        }
        let by_tick: HashMap<&str, HashMap<i64, Point>> = tracks
            .iter()
            .map(|(a, rows)| (a.as_str(), rows.iter().map(|r| (tick(r.t), r.p)).collect()))
            .collect();

        for agent in agent_order {
            let rows = &tracks[agent];
            for segment in contiguous_segments(rows, &tick) {
                if segment.len() < window {
                    continue;
                }
                let mut start = 0;
                while start + window <= segment.len() {
                    let w = &segment[start..start + window];
                    let history: Vec<Point> = w[..t_p].iter().map(|r| r.p).collect();
                    let future: Vec<Point> = w[t_p..].iter().map(|r| r.p).collect();
                    let ticks: Vec<i64> = w[..t_p].iter().map(|r| tick(r.t)).collect();
                    let neighbors = agent_order
                        .iter()
                        .filter(|other| *other != agent)
                        .filter_map(|other| {
                            let track = &by_tick[other.as_str()];
                            ticks
                                .iter()
                                .map(|k| track.get(k).copied())
                                .collect::<Option<Vec<Point>>>()
                        })
                        .collect();
                    samples.push(TrajectorySample {
                        scene_id: scene.clone(),
                        agent_id: agent.clone(),
                        t_start: w[0].t,
                        dt,
                        history,
                        future,
                        neighbors,
                    });
                    start += stride;
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{}: no track has {window} consecutive points",
            path.display()
        )));
    }
    Dataset::new(t_p, t_q, samples)
}

fn contiguous_segments<'a>(rows: &'a [Row], tick: &impl Fn(f64) -> i64) -> Vec<&'a [Row]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..rows.len() {
        if tick(rows[i].t) != tick(rows[i - 1].t) + 1 {
            out.push(&rows[start..i]);
            start = i;
        }
    }
    if !rows.is_empty() {
        out.push(&rows[start..]);
    }
    out
}

/// Writes each sample as its own scene: the agent's full window plus one
/// history-only track per neighbor (`agent_id` `n0`, `n1`, ...).
///
/// Scene ids must be unique per sample so reloading reproduces the dataset.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in &dataset.samples {
        if !seen.insert(s.scene_id.as_str()) {
            return Err(Error::Data(format!(
                "scene {} holds more than one sample; cannot write one-scene-per-sample layout",
                s.scene_id
            )));
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "agent_id", "t", "x", "y"])?;
    for s in &dataset.samples {
        for (i, p) in s.history.iter().chain(&s.future).enumerate() {
            w.write_record([
                s.scene_id.clone(),
                s.agent_id.clone(),
                s.time_of(i).to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])?;
        }
        for (j, n) in s.neighbors.iter().enumerate() {
            for (i, p) in n.iter().enumerate() {
                w.write_record([
                    s.scene_id.clone(),
                    format!("n{j}"),
                    s.time_of(i).to_string(),
                    p[0].to_string(),
                    p[1].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_mode_labels(labels: &[ModeLabel], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "agent_id", "mode_label"])?;
    for l in labels {
        w.write_record([&l.scene_id, &l.agent_id, &l.mode])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mode_labels(path: &Path) -> Result<Vec<ModeLabel>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = [
        column(&headers, "scene_id", path)?,
        column(&headers, "agent_id", path)?,
        column(&headers, "mode_label", path)?,
    ];
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        let get = |c: usize| {
            rec.get(c)
                .map(str::to_string)
                .ok_or_else(|| parse_err(path, i + 2, "short row"))
        };
        out.push(ModeLabel {
            scene_id: get(cols[0])?,
            agent_id: get(cols[1])?,
            mode: get(cols[2])?,
        });
    }
    Ok(out)
}

/// Candidate endpoints file: `scene_id, agent_id, mode_label, x, y`, one row per mode.
pub fn write_mode_endpoints(entries: &[ModeEndpoints], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "scene_id,agent_id,mode_label,x,y")?;
    for e in entries {
        for (name, p) in &e.modes {
            writeln!(
                f,
                "{},{},{},{},{}",
                e.scene_id, e.agent_id, name, p[0], p[1]
            )?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_mode_endpoints(path: &Path) -> Result<Vec<ModeEndpoints>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = [
        column(&headers, "scene_id", path)?,
        column(&headers, "agent_id", path)?,
        column(&headers, "mode_label", path)?,
        column(&headers, "x", path)?,
        column(&headers, "y", path)?,
    ];
    let mut out: Vec<ModeEndpoints> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let get = |c: usize| rec.get(c).ok_or_else(|| parse_err(path, line, "short row"));
        let num = |c: usize| -> Result<f64> {
            get(c)?
                .parse()
                .map_err(|_| parse_err(path, line, "not a number"))
        };
        let (scene, agent) = (get(cols[0])?, get(cols[1])?);
        let point = [num(cols[3])?, num(cols[4])?];
        match out.last_mut() {
            Some(last) if last.scene_id == scene && last.agent_id == agent => {
                last.modes.push((get(cols[2])?.to_string(), point));
            }
            _ => out.push(ModeEndpoints {
                scene_id: scene.to_string(),
                agent_id: agent.to_string(),
                modes: vec![(get(cols[2])?.to_string(), point)],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ScenarioKind, ScenarioSpec};

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn track(scene: &str, agent: &str, t0: usize, n: usize) -> String {
        (0..n)
            .map(|i| format!("{scene},{agent},{},{},{}\n", t0 + i, i as f64 * 0.5, 1.0))
            .collect()
    }

    #[test]
    fn exact_window_gives_one_sample() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("scene_id,agent_id,t,x,y\n{}", track("a", "1", 0, 20));
        let ds = load_trajectory_csv(&write(dir.path(), "f.csv", &body), 8, 12, 1).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.samples[0].neighbors.is_empty());
    }

    #[test]
    fn one_extra_row_gives_two_samples() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("scene_id,agent_id,t,x,y\n{}", track("a", "1", 0, 21));
        let ds = load_trajectory_csv(&write(dir.path(), "f.csv", &body), 8, 12, 1).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[1].history[0][0], 0.5);
    }

    #[test]
    fn cotemporal_agents_are_each_others_neighbors() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "scene_id,agent_id,t,x,y\n{}{}{}",
            track("a", "1", 0, 20),
            track("a", "2", 0, 20),
            track("b", "3", 0, 20)
        );
        let ds = load_trajectory_csv(&write(dir.path(), "f.csv", &body), 8, 12, 1).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[0].neighbors.len(), 1);
        assert_eq!(ds.samples[1].neighbors.len(), 1);
        assert!(ds.samples[2].neighbors.is_empty()); // other scene
        assert_eq!(ds.samples[0].neighbors[0], ds.samples[1].history);
    }

    #[test]
    fn window_coverage_formula() {
        let dir = tempfile::tempdir().unwrap();
        let lens = [5usize, 20, 23, 40];
        let mut body = String::from("scene_id,agent_id,t,x,y\n");
        for (i, n) in lens.iter().enumerate() {
            body += &track("s", &i.to_string(), 3 * i, *n);
        }
        let ds = load_trajectory_csv(&write(dir.path(), "f.csv", &body), 8, 12, 1).unwrap();
        let expected: usize = lens.iter().map(|&n| (n + 1).saturating_sub(20)).sum();
        assert_eq!(ds.len(), expected);
    }

    #[test]
    fn errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let missing = write(dir.path(), "m.csv", "scene_id,agent_id,t,x\na,1,0,0\n");
        let err = load_trajectory_csv(&missing, 8, 12, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing column \"y\""), "{err}");

        let body = "scene_id,agent_id,t,x,y\na,1,0,0,0\na,1,2,0,0\na,1,1,0,0\n";
        let err = load_trajectory_csv(&write(dir.path(), "n.csv", body), 1, 1, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains(":4:") && err.contains("non-monotone"), "{err}");

        let body = "scene_id,agent_id,t,x,y\na,1,0,zero,0\n";
        let err = load_trajectory_csv(&write(dir.path(), "b.csv", body), 1, 1, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2:"), "{err}");

        let short = format!("scene_id,agent_id,t,x,y\n{}", track("a", "1", 0, 5));
        assert!(matches!(
            load_trajectory_csv(&write(dir.path(), "e.csv", &short), 8, 12, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gaps_split_tracks() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "scene_id,agent_id,t,x,y\n{}{}",
            track("a", "1", 0, 20),
            track("a", "1", 30, 20)
        );
        let ds = load_trajectory_csv(&write(dir.path(), "g.csv", &body), 8, 12, 1).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ScenarioSpec {
            samples: 40,
            seed: 4,
            ..ScenarioSpec::new(ScenarioKind::Crossroad)
        };
        let (ds, labels) = generate(&spec).unwrap();
        let p = dir.path().join("d.csv");
        write_dataset_csv(&ds, &p).unwrap();
        let back = load_trajectory_csv(&p, 8, 12, 1).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.scene_id, b.scene_id);
            assert_eq!(a.neighbors.len(), b.neighbors.len());
            let pts = |s: &TrajectorySample| -> Vec<Point> {
                s.history
                    .iter()
                    .chain(&s.future)
                    .chain(s.neighbors.iter().flatten())
                    .copied()
                    .collect()
            };
            for (p, q) in pts(a).iter().zip(pts(b).iter()) {
                assert!((p[0] - q[0]).abs() <= 1e-9 && (p[1] - q[1]).abs() <= 1e-9);
            }
        }
        let lp = dir.path().join("m.csv");
        write_mode_labels(&labels, &lp).unwrap();
        assert_eq!(read_mode_labels(&lp).unwrap(), labels);
    }
}
