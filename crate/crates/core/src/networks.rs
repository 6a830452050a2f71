//! Encoder, EndNet, PriorNet and PathNet.
//!
//! All four networks work on batches of rows in the agent frame: positions are
//! shifted so the last observed point is the origin and divided by
//! `coord_scale`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::data::Point;
use crate::error::{Error, Result};
use crate::numeric::{step_embeddings, GruCell, Linear, Mlp, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Mlp,
    Recurrent,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Mlp => "mlp",
            Backbone::Recurrent => "recurrent",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Backbone::Mlp),
            "recurrent" => Ok(Backbone::Recurrent),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?} (expected mlp or recurrent)"
            ))),
        }
    }
}

/// Architecture hyperparameters shared by a trained model's four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub t_p: usize,
    pub t_q: usize,
    /// Width `D` of the context vector.
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub neighbor_hidden: usize,
    pub endnet_layers: usize,
    pub endnet_width: usize,
    pub priornet_backbone: Backbone,
    pub priornet_layers: usize,
    pub priornet_width: usize,
    pub pathnet_backbone: Backbone,
    pub pathnet_layers: usize,
    pub pathnet_width: usize,
    pub step_embedding_dim: usize,
    /// Divisor applied to agent-frame coordinates. Zero means "derive from data".
    pub coord_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            t_p: 8,
            t_q: 12,
            context_dim: 64,
            encoder_hidden: 32,
            neighbor_hidden: 32,
            endnet_layers: 3,
            endnet_width: 128,
            priornet_backbone: Backbone::Mlp,
            priornet_layers: 2,
            priornet_width: 128,
            pathnet_backbone: Backbone::Recurrent,
            pathnet_layers: 2,
            pathnet_width: 64,
            step_embedding_dim: 16,
            coord_scale: 0.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("t_p", self.t_p),
            ("t_q", self.t_q),
            ("context_dim", self.context_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("neighbor_hidden", self.neighbor_hidden),
            ("endnet_width", self.endnet_width),
            ("priornet_width", self.priornet_width),
            ("pathnet_width", self.pathnet_width),
            ("step_embedding_dim", self.step_embedding_dim),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("network.{name} must be positive")));
        }
        if !self.step_embedding_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "network.step_embedding_dim must be even".into(),
            ));
        }
        if !(self.coord_scale >= 0.0 && self.coord_scale.is_finite()) {
            return Err(Error::Config(format!(
                "network.coord_scale must be >= 0, got {}",
                self.coord_scale
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("t_p", self.t_p.to_string()),
            ("t_q", self.t_q.to_string()),
            ("context_dim", self.context_dim.to_string()),
            ("encoder_hidden", self.encoder_hidden.to_string()),
            ("neighbor_hidden", self.neighbor_hidden.to_string()),
            ("endnet_layers", self.endnet_layers.to_string()),
            ("endnet_width", self.endnet_width.to_string()),
            ("priornet_backbone", self.priornet_backbone.to_string()),
            ("priornet_layers", self.priornet_layers.to_string()),
            ("priornet_width", self.priornet_width.to_string()),
            ("pathnet_backbone", self.pathnet_backbone.to_string()),
            ("pathnet_layers", self.pathnet_layers.to_string()),
            ("pathnet_width", self.pathnet_width.to_string()),
            ("step_embedding_dim", self.step_embedding_dim.to_string()),
        ];
        // round-trip formatting of f64 is exact
        kv.push(("coord_scale", format!("{:?}", self.coord_scale)));
        kv.into_iter()
            .map(|(k, v)| (format!("network.{k}"), v))
            .collect()
    }

    /// Applies `network.*` entries on top of `self`; unknown `network.*` keys are errors.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("network.") else {
                continue;
            };
            let int = || -> Result<usize> {
                value.parse().map_err(|_| {
                    Error::Config(format!(
                        "{key}: expected a non-negative integer, got {value:?}"
                    ))
                })
            };
            match field {
                "t_p" => self.t_p = int()?,
                "t_q" => self.t_q = int()?,
                "context_dim" => self.context_dim = int()?,
                "encoder_hidden" => self.encoder_hidden = int()?,
                "neighbor_hidden" => self.neighbor_hidden = int()?,
                "endnet_layers" => self.endnet_layers = int()?,
                "endnet_width" => self.endnet_width = int()?,
                "priornet_backbone" => self.priornet_backbone = value.parse()?,
                "priornet_layers" => self.priornet_layers = int()?,
                "priornet_width" => self.priornet_width = int()?,
                "pathnet_backbone" => self.pathnet_backbone = value.parse()?,
                "pathnet_layers" => self.pathnet_layers = int()?,
                "pathnet_width" => self.pathnet_width = int()?,
                "step_embedding_dim" => self.step_embedding_dim = int()?,
                "coord_scale" => {
                    self.coord_scale = value.parse().map_err(|_| {
                        Error::Config(format!("{key}: expected a number, got {value:?}"))
                    })?
                }
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        }
        self.validate()
    }

    /// Agent-frame coordinates of `p` relative to `origin`.
    pub fn normalize(&self, p: Point, origin: Point) -> Point {
        [
            (p[0] - origin[0]) / self.coord_scale,
            (p[1] - origin[1]) / self.coord_scale,
        ]
    }

    pub fn denormalize(&self, p: Point, origin: Point) -> Point {
        [
            p[0] * self.coord_scale + origin[0],
            p[1] * self.coord_scale + origin[1],
        ]
    }
}

/// Encoder inputs for a batch, already normalized and laid out per time step.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    rows: usize,
    /// `t_p` tensors of `[rows, 4]`: position and velocity features.
    agent_steps: Vec<Tensor>,
    /// `t_p` tensors of `[neighbor rows, 4]`.
    neighbor_steps: Vec<Tensor>,
    /// Owning batch row of every neighbor row.
    segments: Arc<[usize]>,
}

impl EncoderBatch {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Builds features from raw scene coordinates. Each history is expressed
    /// relative to its own last point; neighbors use the same origin.
    pub fn new<'a, I>(cfg: &NetworkConfig, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [Point], &'a [Vec<Point>])>,
    {
        let t_p = cfg.t_p;
        let mut agent = vec![Vec::new(); t_p];
        let mut neighbor_rows: Vec<(usize, Vec<[f64; 4]>)> = Vec::new();
        let mut rows = 0;
        for (history, neighbors) in items {
            let Some(&origin) = history.last() else {
                return Err(Error::Data("empty history".into()));
            };
            if history.len() != t_p {
                return Err(Error::Data(format!(
                    "history length {} != {t_p}",
                    history.len()
                )));
            }
            for (t, f) in track_features(cfg, history, origin).into_iter().enumerate() {
                agent[t].extend_from_slice(&f);
            }
            let mut mine: Vec<Vec<[f64; 4]>> = Vec::with_capacity(neighbors.len());
            for n in neighbors {
                if n.len() != t_p {
                    return Err(Error::Data(format!("neighbor length {} != {t_p}", n.len())));
                }
                mine.push(track_features(cfg, n, origin));
            }
            mine.sort_by(|a, b| {
                a.iter()
                    .flatten()
                    .zip(b.iter().flatten())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            neighbor_rows.extend(mine.into_iter().map(|f| (rows, f)));
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let agent_steps = agent
            .into_iter()
            .map(|d| Tensor::matrix(rows, 4, d))
            .collect();
        let neighbor_steps = (0..t_p)
            .map(|t| {
                let data = neighbor_rows.iter().flat_map(|(_, f)| f[t]).collect();
                Tensor::matrix(neighbor_rows.len(), 4, data)
            })
            .collect();
        let segments = neighbor_rows.iter().map(|(r, _)| *r).collect();
        Ok(Self {
            rows,
            agent_steps,
            neighbor_steps,
            segments,
        })
    }
}

/// Per-step `[x, y, vx, vy]`; velocity is the step displacement stretched over the prediction horizon.
fn track_features(cfg: &NetworkConfig, track: &[Point], origin: Point) -> Vec<[f64; 4]> {
    let gain = cfg.t_q as f64 / cfg.coord_scale;
    (0..track.len())
        .map(|t| {
            let p = cfg.normalize(track[t], origin);
            let (a, b) = match (t, track.len()) {
                (_, 1) => (track[0], track[0]),
                (0, _) => (track[0], track[1]),
                _ => (track[t - 1], track[t]),
            };
            [p[0], p[1], (b[0] - a[0]) * gain, (b[1] - a[1]) * gain]
        })
        .collect()
}

/// History GRU plus sum-pooled neighbor GRU, projected to the context width.
#[derive(Clone, Debug)]
pub struct Encoder {
    agent: GruCell,
    neighbor: GruCell,
    project: Linear,
}

impl Encoder {
    pub fn new(params: &mut ParamSet, cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let agent = GruCell::new(params, "encoder.agent", 4, cfg.encoder_hidden, rng)?;
        let neighbor = GruCell::new(params, "encoder.neighbor", 4, cfg.neighbor_hidden, rng)?;
        let project = Linear::new(
            params,
            "encoder.project",
            cfg.encoder_hidden + cfg.neighbor_hidden,
            cfg.context_dim,
            rng,
        )?;
        Ok(Self {
            agent,
            neighbor,
            project,
        })
    }

    /// Context vectors `[rows, context_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, batch: &EncoderBatch) -> Result<Var> {
        let h_agent = run_gru(tape, params, &self.agent, &batch.agent_steps, batch.rows)?;
        let n_rows = batch.segments.len();
        let pooled = if n_rows == 0 {
            tape.constant(Tensor::zeros(&[batch.rows, self.neighbor.hidden()]))?
        } else {
            let h = run_gru(tape, params, &self.neighbor, &batch.neighbor_steps, n_rows)?;
            tape.segment_sum(h, Arc::clone(&batch.segments), batch.rows)?
        };
        let joined = tape.concat_cols(&[h_agent, pooled])?;
        let z = self.project.forward(tape, params, joined)?;
        tape.tanh(z)
    }

    /// Context vector of a single agent, as a `[1, context_dim]` tensor.
    pub fn encode(
        &self,
        params: &ParamSet,
        cfg: &NetworkConfig,
        history: &[Point],
        neighbors: &[Vec<Point>],
    ) -> Result<Tensor> {
        let batch = EncoderBatch::new(cfg, [(history, neighbors)])?;
        let mut tape = Tape::new();
        let x = self.forward(&mut tape, params, &batch)?;
        Ok(tape.value(x).clone())
    }
}

fn run_gru(
    tape: &mut Tape,
    params: &ParamSet,
    cell: &GruCell,
    steps: &[Tensor],
    rows: usize,
) -> Result<Var> {
    let mut h = cell.zero_state(tape, rows)?;
    for x in steps {
        let x = tape.constant(x.clone())?;
        let gx = cell.project_input(tape, params, x)?;
        h = cell.step(tape, params, gx, h)?;
    }
    Ok(h)
}

fn check_steps(steps: &[usize], max: usize) -> Result<()> {
    match steps.iter().find(|&&s| s == 0 || s > max) {
        Some(&step) => Err(Error::StepOutOfRange { step, max }),
        None => Ok(()),
    }
}

/// Predicts the noise in a noised goal: `eps(c_k, x, k)`.
pub trait GoalDenoiser {
    /// `noisy` is `[rows, 2]`, `ctx` is `[rows, D]`, one step index per row.
    fn predict_goal_noise(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        noisy: Var,
        ctx: Var,
        steps: &[usize],
    ) -> Result<Var>;
}

/// Mean of the trajectory chain's starting distribution given context and goal.
pub trait TrajectoryPrior {
    /// `ctx` is `[rows, D]`, `goal` is `[rows, 2]`; returns `[rows, 2 * t_q]`.
    fn prior_mean(&self, tape: &mut Tape, params: &ParamSet, ctx: Var, goal: Var) -> Result<Var>;
}

/// Predicts the noise in a noised trajectory: `eps(y_s, x, s)`.
pub trait TrajectoryDenoiser {
    /// `noisy` is `[rows, 2 * t_q]` (points laid out `x0, y0, x1, y1, ...`).
    fn predict_path_noise(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        noisy: Var,
        ctx: Var,
        steps: &[usize],
    ) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct EndNet {
    mlp: Mlp,
    embed_dim: usize,
    max_step: usize,
}

impl EndNet {
    pub fn new(
        params: &mut ParamSet,
        cfg: &NetworkConfig,
        max_step: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(
            params,
            "endnet",
            2 + cfg.context_dim + cfg.step_embedding_dim,
            cfg.endnet_width,
            cfg.endnet_layers,
            2,
            rng,
        )?;
        Ok(Self {
            mlp,
            embed_dim: cfg.step_embedding_dim,
            max_step,
        })
    }

    /// Single-row convenience wrapper.
    pub fn eval(&self, params: &ParamSet, c_k: Point, x: &Tensor, k: usize) -> Result<Point> {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(1, 2, c_k.to_vec()))?;
        let ctx = tape.constant(x.clone())?;
        let out = self.predict_goal_noise(&mut tape, params, c, ctx, &[k])?;
        let v = tape.value(out).data();
        Ok([v[0], v[1]])
    }
}

impl GoalDenoiser for EndNet {
    fn predict_goal_noise(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        noisy: Var,
        ctx: Var,
        steps: &[usize],
    ) -> Result<Var> {
        check_steps(steps, self.max_step)?;
        let emb = tape.constant(step_embeddings(steps, self.embed_dim))?;
        let input = tape.concat_cols(&[noisy, ctx, emb])?;
        self.mlp.forward(tape, params, input)
    }
}

#[derive(Clone, Debug)]
pub enum PriorNet {
    Mlp(Mlp),
    Recurrent {
        condition: Linear,
        cell: GruCell,
        readout: Linear,
        t_q: usize,
    },
}

impl PriorNet {
    pub fn new(params: &mut ParamSet, cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let in_dim = cfg.context_dim + 2;
        Ok(match cfg.priornet_backbone {
            Backbone::Mlp => PriorNet::Mlp(Mlp::new(
                params,
                "priornet",
                in_dim,
                cfg.priornet_width,
                cfg.priornet_layers,
                2 * cfg.t_q,
                rng,
            )?),
            Backbone::Recurrent => {
                let h = cfg.priornet_width;
                PriorNet::Recurrent {
                    condition: Linear::without_bias(
                        params,
                        "priornet.condition",
                        in_dim,
                        3 * h,
                        rng,
                    )?,
                    cell: GruCell::new(params, "priornet.cell", 1, h, rng)?,
                    readout: Linear::new(params, "priornet.readout", h, 2, rng)?,
                    t_q: cfg.t_q,
                }
            }
        })
    }

    /// Single-row convenience wrapper returning `t_q` points.
    pub fn eval(&self, params: &ParamSet, x: &Tensor, goal: Point) -> Result<Vec<Point>> {
        let mut tape = Tape::new();
        let ctx = tape.constant(x.clone())?;
        let g = tape.constant(Tensor::matrix(1, 2, goal.to_vec()))?;
        let out = self.prior_mean(&mut tape, params, ctx, g)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect())
    }
}

impl TrajectoryPrior for PriorNet {
    fn prior_mean(&self, tape: &mut Tape, params: &ParamSet, ctx: Var, goal: Var) -> Result<Var> {
        let input = tape.concat_cols(&[ctx, goal])?;
        match self {
            PriorNet::Mlp(mlp) => mlp.forward(tape, params, input),
            PriorNet::Recurrent {
                condition,
                cell,
                readout,
                t_q,
            } => {
                let rows = tape.value(input).rows();
                let cond = condition.forward(tape, params, input)?;
                let mut h = cell.zero_state(tape, rows)?;
                let mut outputs = Vec::with_capacity(*t_q);
                for t in 0..*t_q {
                    let phase =
                        tape.constant(Tensor::full(&[rows, 1], (t + 1) as f64 / *t_q as f64))?;
                    let gx = cell.project_input(tape, params, phase)?;
                    let gx = tape.add(gx, cond)?;
                    h = cell.step(tape, params, gx, h)?;
                    outputs.push(readout.forward(tape, params, h)?);
                }
                tape.concat_cols(&outputs)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum PathNet {
    Mlp {
        mlp: Mlp,
        embed_dim: usize,
        max_step: usize,
    },
    /// Bidirectional GRU over the trajectory points, conditioned through the gate inputs.
    Recurrent {
        condition: Linear,
        forward: GruCell,
        backward: GruCell,
        readout: Linear,
        embed_dim: usize,
        max_step: usize,
        t_q: usize,
    },
}

impl PathNet {
    pub fn new(
        params: &mut ParamSet,
        cfg: &NetworkConfig,
        max_step: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cond_dim = cfg.context_dim + cfg.step_embedding_dim;
        Ok(match cfg.pathnet_backbone {
            Backbone::Mlp => PathNet::Mlp {
                mlp: Mlp::new(
                    params,
                    "pathnet",
                    2 * cfg.t_q + cond_dim,
                    cfg.pathnet_width,
                    cfg.pathnet_layers,
                    2 * cfg.t_q,
                    rng,
                )?,
                embed_dim: cfg.step_embedding_dim,
                max_step,
            },
            Backbone::Recurrent => {
                let h = cfg.pathnet_width;
                PathNet::Recurrent {
                    condition: Linear::new(params, "pathnet.condition", cond_dim, 6 * h, rng)?,
                    forward: GruCell::new(params, "pathnet.forward", 2, h, rng)?,
                    backward: GruCell::new(params, "pathnet.backward", 2, h, rng)?,
                    readout: Linear::new(params, "pathnet.readout", 2 * h + 2, 2, rng)?,
                    embed_dim: cfg.step_embedding_dim,
                    max_step,
                    t_q: cfg.t_q,
                }
            }
        })
    }

    pub fn max_step(&self) -> usize {
        match self {
            PathNet::Mlp { max_step, .. } | PathNet::Recurrent { max_step, .. } => *max_step,
        }
    }

    /// Single-row convenience wrapper.
    pub fn eval(
        &self,
        params: &ParamSet,
        y_s: &[Point],
        x: &Tensor,
        s: usize,
    ) -> Result<Vec<Point>> {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::matrix(
            1,
            2 * y_s.len(),
            y_s.iter().flatten().copied().collect(),
        ))?;
        let ctx = tape.constant(x.clone())?;
        let out = self.predict_path_noise(&mut tape, params, y, ctx, &[s])?;
        Ok(tape
            .value(out)
            .data()
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect())
    }
}

impl TrajectoryDenoiser for PathNet {
    fn predict_path_noise(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        noisy: Var,
        ctx: Var,
        steps: &[usize],
    ) -> Result<Var> {
        check_steps(steps, self.max_step())?;
        match self {
            PathNet::Mlp { mlp, embed_dim, .. } => {
                let emb = tape.constant(step_embeddings(steps, *embed_dim))?;
                let input = tape.concat_cols(&[noisy, ctx, emb])?;
                mlp.forward(tape, params, input)
            }
            PathNet::Recurrent {
                condition,
                forward,
                backward,
                readout,
                embed_dim,
                t_q,
                ..
            } => {
                let h = forward.hidden();
                let rows = tape.value(noisy).rows();
                let emb = tape.constant(step_embeddings(steps, *embed_dim))?;
                let cond_in = tape.concat_cols(&[ctx, emb])?;
                let cond = condition.forward(tape, params, cond_in)?;
                let cond_f = tape.slice_cols(cond, 0, 3 * h)?;
                let cond_b = tape.slice_cols(cond, 3 * h, 3 * h)?;
                let points: Vec<Var> = (0..*t_q)
                    .map(|t| tape.slice_cols(noisy, 2 * t, 2))
                    .collect::<Result<_>>()?;

                let mut hf = Vec::with_capacity(*t_q);
                let mut state = forward.zero_state(tape, rows)?;
                for &p in &points {
                    let gx = forward.project_input(tape, params, p)?;
                    let gx = tape.add(gx, cond_f)?;
                    state = forward.step(tape, params, gx, state)?;
                    hf.push(state);
                }
                let mut hb = vec![state; *t_q];
                let mut state = backward.zero_state(tape, rows)?;
                for t in (0..*t_q).rev() {
                    let gx = backward.project_input(tape, params, points[t])?;
                    let gx = tape.add(gx, cond_b)?;
                    state = backward.step(tape, params, gx, state)?;
                    hb[t] = state;
                }
                let mut outputs = Vec::with_capacity(*t_q);
                for t in 0..*t_q {
                    let joined = tape.concat_cols(&[hf[t], hb[t], points[t]])?;
                    outputs.push(readout.forward(tape, params, joined)?);
                }
                tape.concat_cols(&outputs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            t_p: 4,
            t_q: 5,
            context_dim: 6,
            encoder_hidden: 5,
            neighbor_hidden: 4,
            endnet_layers: 2,
            endnet_width: 7,
            priornet_layers: 1,
            priornet_width: 6,
            pathnet_layers: 1,
            pathnet_width: 5,
            step_embedding_dim: 4,
            coord_scale: 2.0,
            ..NetworkConfig::default()
        }
    }

    fn track(start: Point, v: Point, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| [start[0] + v[0] * i as f64, start[1] + v[1] * i as f64])
            .collect()
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = NetworkConfig {
            priornet_backbone: Backbone::Recurrent,
            pathnet_backbone: Backbone::Mlp,
            coord_scale: 0.1 + 0.2,
            ..small_cfg()
        };
        let kv: BTreeMap<String, String> = cfg.to_kv().into_iter().collect();
        let mut back = NetworkConfig::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = NetworkConfig::default();
        let kv = BTreeMap::from([(
            "network.pathnet_backbone".to_string(),
            "transformer".to_string(),
        )]);
        assert!(cfg.apply_kv(&kv).is_err());
        let kv = BTreeMap::from([("network.context_dim".to_string(), "0".to_string())]);
        assert!(NetworkConfig::default().apply_kv(&kv).is_err());
        let kv = BTreeMap::from([("network.bogus".to_string(), "1".to_string())]);
        assert!(NetworkConfig::default().apply_kv(&kv).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_permutation_invariant() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let enc = Encoder::new(&mut params, &cfg, &mut rng).unwrap();
        let still = vec![[0.0, 0.0]; 4];
        let a = enc.encode(&params, &cfg, &still, &[]).unwrap();
        let b = enc.encode(&params, &cfg, &still, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 6]);

        let hist = track([1.0, 2.0], [0.1, 0.4], 4);
        let n1 = track([3.0, 1.0], [-0.2, 0.1], 4);
        let n2 = track([-1.0, 0.5], [0.3, 0.0], 4);
        let n3 = track([0.7, -2.0], [0.0, 0.25], 4);
        let x = enc
            .encode(&params, &cfg, &hist, &[n1.clone(), n2.clone(), n3.clone()])
            .unwrap();
        let y = enc
            .encode(&params, &cfg, &hist, &[n3.clone(), n1.clone(), n2.clone()])
            .unwrap();
        let z = enc.encode(&params, &cfg, &hist, &[n2, n3, n1]).unwrap();
        assert_eq!(x, y);
        assert_eq!(x, z);
    }

    #[test]
    fn encoder_is_translation_invariant() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let enc = Encoder::new(&mut params, &cfg, &mut rng).unwrap();
        // dyadic coordinates keep the shifted subtraction exact
        let hist = track([0.5, 0.25], [0.125, 0.375], 4);
        let nb = track([2.0, -1.5], [-0.25, 0.0], 4);
        let shift = |t: &[Point], d: Point| -> Vec<Point> {
            t.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect()
        };
        let base = enc
            .encode(&params, &cfg, &hist, std::slice::from_ref(&nb))
            .unwrap();
        let d = [64.0, -32.0];
        let moved = enc
            .encode(&params, &cfg, &shift(&hist, d), &[shift(&nb, d)])
            .unwrap();
        assert_eq!(base, moved);

        let d = [17.318, -4.07];
        let moved = enc
            .encode(&params, &cfg, &shift(&hist, d), &[shift(&nb, d)])
            .unwrap();
        for (a, b) in base.data().iter().zip(moved.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_rejects_empty_history() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let enc = Encoder::new(&mut params, &cfg, &mut rng).unwrap();
        assert!(matches!(
            enc.encode(&params, &cfg, &[], &[]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn heads_have_the_declared_shapes() {
        for (prior, path) in [
            (Backbone::Mlp, Backbone::Recurrent),
            (Backbone::Recurrent, Backbone::Mlp),
        ] {
            let cfg = NetworkConfig {
                priornet_backbone: prior,
                pathnet_backbone: path,
                ..small_cfg()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut params = ParamSet::new();
            let end = EndNet::new(&mut params, &cfg, 9, &mut rng).unwrap();
            let pri = PriorNet::new(&mut params, &cfg, &mut rng).unwrap();
            let pat = PathNet::new(&mut params, &cfg, 3, &mut rng).unwrap();
            let x = Tensor::matrix(1, 6, vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6]);
            for k in [1, 5, 9] {
                let e = end.eval(&params, [0.3, -0.1], &x, k).unwrap();
                assert_eq!(e, end.eval(&params, [0.3, -0.1], &x, k).unwrap());
            }
            assert_ne!(
                end.eval(&params, [0.3, -0.1], &x, 1).unwrap(),
                end.eval(&params, [0.3, -0.1], &x, 9).unwrap()
            );
            assert!(matches!(
                end.eval(&params, [0.0, 0.0], &x, 10),
                Err(Error::StepOutOfRange { step: 10, max: 9 })
            ));
            assert!(matches!(
                end.eval(&params, [0.0, 0.0], &x, 0),
                Err(Error::StepOutOfRange { .. })
            ));

            let m1 = pri.eval(&params, &x, [1.0, 0.0]).unwrap();
            let m2 = pri.eval(&params, &x, [0.0, 1.0]).unwrap();
            assert_eq!(m1.len(), 5);
            assert_ne!(m1, m2);

            let y = track([0.0, 0.0], [0.2, 0.1], 5);
            let out = pat.eval(&params, &y, &x, 2).unwrap();
            assert_eq!(out.len(), 5);
            assert_eq!(out, pat.eval(&params, &y, &x, 2).unwrap());
            assert!(pat.eval(&params, &y, &x, 4).is_err());
        }
    }
}
