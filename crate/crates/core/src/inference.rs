//! Sampling: goal chain, learned-prior start, short trajectory chain; plus the
//! single-chain baseline.
//!
//! Draws are batched as rows. Row `i` consumes only its own random stream, so
//! results do not depend on how rows are grouped.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Point, TrajectorySample, WindowKey};
use crate::diffusion::{reverse_mean, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelKind};
use crate::networks::{EncoderBatch, GoalDenoiser, TrajectoryDenoiser, TrajectoryPrior};
use crate::numeric::{ParamSet, Tape, Tensor};

/// Network evaluations, counted per row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DenoiserCalls {
    pub endnet: u64,
    pub priornet: u64,
    pub pathnet: u64,
}

impl DenoiserCalls {
    pub fn total(&self) -> u64 {
        self.endnet + self.priornet + self.pathnet
    }

    fn add(&mut self, other: &DenoiserCalls) {
        self.endnet += other.endnet;
        self.priornet += other.priornet;
        self.pathnet += other.pathnet;
    }
}

/// `count` predicted futures of one agent, in scene coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<Point>>,
    /// The goal each trajectory was conditioned on (baseline: its endpoint).
    pub goals: Vec<Point>,
    pub calls: DenoiserCalls,
    /// Time spent in network evaluations and chain updates.
    pub network_ns: u64,
    /// `network_ns` plus context encoding.
    pub total_ns: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Add `sqrt(beta_tilde_k) * z` after every reverse step with `k > 1`.
    pub stochastic: bool,
}

/// Random stream of draw `index` under `seed`.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal_rows(rngs: &mut [ChaCha8Rng], cols: usize) -> Tensor {
    let data = rngs
        .iter_mut()
        .flat_map(|rng| {
            (0..cols)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::matrix(rngs.len(), cols, data)
}

/// The networks and schedules sampling runs with; tests substitute stubs.
pub struct Sampler<'a> {
    pub params: &'a ParamSet,
    pub goal: Option<&'a dyn GoalDenoiser>,
    pub prior: Option<&'a dyn TrajectoryPrior>,
    pub path: &'a dyn TrajectoryDenoiser,
    pub goal_schedule: &'a NoiseSchedule,
    pub traj_schedule: &'a NoiseSchedule,
    pub options: SamplerOptions,
}

impl<'a> Sampler<'a> {
    pub fn of(bundle: &'a ModelBundle, options: SamplerOptions) -> Self {
        Self {
            params: &bundle.params,
            goal: bundle.endnet.as_ref().map(|n| n as &dyn GoalDenoiser),
            prior: bundle.priornet.as_ref().map(|n| n as &dyn TrajectoryPrior),
            path: &bundle.pathnet,
            goal_schedule: &bundle.goal_schedule,
            traj_schedule: &bundle.traj_schedule,
            options,
        }
    }

    /// Runs the reverse chain from step `sched.steps()` down to 0.
    fn reverse_chain(
        &self,
        mut state: Tensor,
        ctx: &Tensor,
        sched: &NoiseSchedule,
        rngs: &mut [ChaCha8Rng],
        mut predict: impl FnMut(&mut Tape, &Tensor, &Tensor, &[usize]) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let rows = state.rows();
        let cols = state.cols();
        for k in (1..=sched.steps()).rev() {
            let steps = vec![k; rows];
            let mut tape = Tape::new();
            let eps = predict(&mut tape, &state, ctx, &steps)?;
            state = reverse_mean(&state, &eps, k, sched)?;
            if self.options.stochastic && k > 1 {
                let sd = sched.posterior_variance(k)?.sqrt();
                let z = normal_rows(rngs, cols);
                state = state.zip_map(&z, |y, z| y + sd * z)?;
            }
        }
        Ok(state)
    }

    /// One goal per row of `ctx`, starting from `c_K ~ N(0, I)`.
    pub fn sample_goals(
        &self,
        ctx: &Tensor,
        rngs: &mut [ChaCha8Rng],
        calls: &mut DenoiserCalls,
    ) -> Result<Tensor> {
        let net = self
            .goal
            .ok_or_else(|| Error::Config("model has no goal network".into()))?;
        let c_k = normal_rows(rngs, 2);
        let rows = ctx.rows() as u64;
        let params = self.params;
        let out = self.reverse_chain(
            c_k,
            ctx,
            self.goal_schedule,
            rngs,
            |tape, state, ctx, steps| {
                let s = tape.constant(state.clone())?;
                let c = tape.constant(ctx.clone())?;
                let e = net.predict_goal_noise(tape, params, s, c, steps)?;
                calls.endnet += rows;
                Ok(tape.value(e).clone())
            },
        )?;
        Ok(out)
    }

    /// One trajectory per row given its goal, starting from
    /// `mu(x, goal) + sqrt(1 - alpha_bar_S) * eps`.
    pub fn sample_trajectories(
        &self,
        ctx: &Tensor,
        goals: &Tensor,
        rngs: &mut [ChaCha8Rng],
        calls: &mut DenoiserCalls,
    ) -> Result<Tensor> {
        let prior = self
            .prior
            .ok_or_else(|| Error::Config("model has no prior network".into()))?;
        let rows = ctx.rows() as u64;
        let mu = {
            let mut tape = Tape::new();
            let c = tape.constant(ctx.clone())?;
            let g = tape.constant(goals.clone())?;
            let m = prior.prior_mean(&mut tape, self.params, c, g)?;
            calls.priornet += rows;
            tape.value(m).clone()
        };
        let sched = self.traj_schedule;
        let sd = (1.0 - sched.alpha_bar(sched.steps())?).sqrt();
        let eps = normal_rows(rngs, mu.cols());
        let start = mu.zip_map(&eps, |m, e| m + sd * e)?;
        self.denoise_trajectories(start, ctx, rngs, calls)
    }

    /// Baseline: trajectories from `y_S ~ N(0, I)` through the full chain.
    pub fn sample_baseline(
        &self,
        ctx: &Tensor,
        cols: usize,
        rngs: &mut [ChaCha8Rng],
        calls: &mut DenoiserCalls,
    ) -> Result<Tensor> {
        let start = normal_rows(rngs, cols);
        self.denoise_trajectories(start, ctx, rngs, calls)
    }

    fn denoise_trajectories(
        &self,
        start: Tensor,
        ctx: &Tensor,
        rngs: &mut [ChaCha8Rng],
        calls: &mut DenoiserCalls,
    ) -> Result<Tensor> {
        let rows = ctx.rows() as u64;
        let (params, path) = (self.params, self.path);
        self.reverse_chain(
            start,
            ctx,
            self.traj_schedule,
            rngs,
            |tape, state, ctx, steps| {
                let s = tape.constant(state.clone())?;
                let c = tape.constant(ctx.clone())?;
                let e = path.predict_path_noise(tape, params, s, c, steps)?;
                calls.pathnet += rows;
                Ok(tape.value(e).clone())
            },
        )
    }
}

fn repeat_rows(t: &Tensor, row: usize, times: usize) -> Tensor {
    let r = t.row(row);
    Tensor::matrix(
        times,
        r.len(),
        r.iter().copied().cycle().take(times * r.len()).collect(),
    )
}

/// Predictions for many agents. Agent `a` draw `i` uses stream `a * count + i`
/// of `seed`, where `a` is the agent's position in `samples`.
pub fn predict_many(
    bundle: &ModelBundle,
    samples: &[&TrajectorySample],
    count: usize,
    seed: u64,
    options: SamplerOptions,
) -> Result<Vec<PredictionSet>> {
    predict_indexed(bundle, samples, 0, count, seed, options)
}

/// Like [`predict_many`] but the first sample has agent index `first_index`.
pub fn predict_indexed(
    bundle: &ModelBundle,
    samples: &[&TrajectorySample],
    first_index: u64,
    count: usize,
    seed: u64,
    options: SamplerOptions,
) -> Result<Vec<PredictionSet>> {
    if count == 0 {
        return Err(Error::Config("prediction count must be >= 1".into()));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &bundle.network;
    let t0 = Instant::now();
    let batch = EncoderBatch::new(
        cfg,
        samples
            .iter()
            .map(|s| (s.history.as_slice(), s.neighbors.as_slice())),
    )?;
    let ctx_all = {
        let mut tape = Tape::new();
        let x = bundle.encoder.forward(&mut tape, &bundle.params, &batch)?;
        tape.value(x).clone()
    };
    let encode_ns = t0.elapsed().as_nanos() as u64;

    let n = samples.len();
    let rows = n * count;
    let mut ctx_data = Vec::with_capacity(rows * ctx_all.cols());
    for a in 0..n {
        ctx_data.extend_from_slice(repeat_rows(&ctx_all, a, count).data());
    }
    let ctx = Tensor::matrix(rows, ctx_all.cols(), ctx_data);
    let mut rngs: Vec<ChaCha8Rng> = (0..rows as u64)
        .map(|r| {
            draw_rng(
                seed,
                (first_index + r / count as u64) * count as u64 + r % count as u64,
            )
        })
        .collect();

    let sampler = Sampler::of(bundle, options);
    let mut calls = DenoiserCalls::default();
    let t1 = Instant::now();
    let (goals, trajs) = match bundle.kind {
        ModelKind::Idm => {
            let goals = sampler.sample_goals(&ctx, &mut rngs, &mut calls)?;
            let trajs = sampler.sample_trajectories(&ctx, &goals, &mut rngs, &mut calls)?;
            (Some(goals), trajs)
        }
        ModelKind::Baseline => (
            None,
            sampler.sample_baseline(&ctx, 2 * cfg.t_q, &mut rngs, &mut calls)?,
        ),
    };
    let network_ns = t1.elapsed().as_nanos() as u64;
    if !trajs.all_finite() {
        return Err(Error::NonFinite { op: "sampling" });
    }

    let per_agent = |v: u64| v / n as u64;
    let mut out = Vec::with_capacity(n);
    for (a, sample) in samples.iter().enumerate() {
        let origin = sample.last_observed();
        let mut set = PredictionSet {
            trajectories: Vec::with_capacity(count),
            goals: Vec::with_capacity(count),
            calls: DenoiserCalls::default(),
            network_ns: per_agent(network_ns),
            total_ns: per_agent(network_ns + encode_ns),
        };
        for i in 0..count {
            let r = a * count + i;
            let traj: Vec<Point> = trajs
                .row(r)
                .chunks(2)
                .map(|c| cfg.denormalize([c[0], c[1]], origin))
                .collect();
            let goal = match &goals {
                Some(g) => cfg.denormalize([g.at(r, 0), g.at(r, 1)], origin),
                None => *traj.last().expect("t_q >= 1"),
            };
            set.trajectories.push(traj);
            set.goals.push(goal);
        }
        set.calls = DenoiserCalls {
            endnet: calls.endnet / n as u64,
            priornet: calls.priornet / n as u64,
            pathnet: calls.pathnet / n as u64,
        };
        out.push(set);
    }
    Ok(out)
}

/// Predictions for one agent.
pub fn predict(
    bundle: &ModelBundle,
    sample: &TrajectorySample,
    count: usize,
    seed: u64,
    options: SamplerOptions,
) -> Result<PredictionSet> {
    Ok(predict_many(bundle, &[sample], count, seed, options)?.remove(0))
}

/// Predicts every sample in chunks of `chunk` agents and sums the call counts.
pub fn predict_dataset(
    bundle: &ModelBundle,
    samples: &[TrajectorySample],
    count: usize,
    seed: u64,
    options: SamplerOptions,
    chunk: usize,
) -> Result<(Vec<PredictionSet>, DenoiserCalls)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut calls = DenoiserCalls::default();
    for (c, group) in samples.chunks(chunk.max(1)).enumerate() {
        let refs: Vec<&TrajectorySample> = group.iter().collect();
        let first = (c * chunk.max(1)) as u64;
        for set in predict_indexed(bundle, &refs, first, count, seed, options)? {
            calls.add(&set.calls);
            out.push(set);
        }
    }
    Ok((out, calls))
}

/// Predicted trajectories of one agent window, as read back from a predictions file.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredPrediction {
    pub key: WindowKey,
    pub scene_id: String,
    pub agent_id: String,
    pub trajectories: Vec<Vec<Point>>,
}

/// Writes `scene_id, agent_id, sample_idx, t, x, y`, one row per predicted point.
pub fn write_predictions(
    path: &Path,
    samples: &[TrajectorySample],
    sets: &[PredictionSet],
) -> Result<()> {
    if samples.len() != sets.len() {
        return Err(Error::Data(format!(
            "{} samples but {} prediction sets",
            samples.len(),
            sets.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "agent_id", "sample_idx", "t", "x", "y"])?;
    for (s, set) in samples.iter().zip(sets) {
        for (i, traj) in set.trajectories.iter().enumerate() {
            for (j, p) in traj.iter().enumerate() {
                w.write_record([
                    s.scene_id.clone(),
                    s.agent_id.clone(),
                    i.to_string(),
                    format!("{:?}", s.future_time(j)),
                    format!("{:?}", p[0]),
                    format!("{:?}", p[1]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a predictions file, grouping rows into windows in order of first appearance.
pub fn read_predictions(path: &Path) -> Result<Vec<StoredPrediction>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: Vec<StoredPrediction> = Vec::new();
    let mut index: HashMap<WindowKey, usize> = HashMap::new();
    // (scene, agent, sample_idx) of the trajectory being filled, and its slot
    let mut current: Option<(String, String, usize, usize)> = None;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        if rec.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |c: usize| -> Result<f64> { rec[c].parse().map_err(|_| bad("not a number")) };
        let sample_idx: usize = rec[2].parse().map_err(|_| bad("bad sample_idx"))?;
        let (t, x, y) = (num(3)?, num(4)?, num(5)?);
        let continues = matches!(&current, Some((s, a, k, _)) if s == &rec[0] && a == &rec[1] && *k == sample_idx);
        if !continues {
            let key = WindowKey::new(&rec[0], &rec[1], t);
            let slot = *index.entry(key.clone()).or_insert_with(|| {
                out.push(StoredPrediction {
                    key,
                    scene_id: rec[0].to_string(),
                    agent_id: rec[1].to_string(),
                    trajectories: Vec::new(),
                });
                out.len() - 1
            });
            if out[slot].trajectories.len() != sample_idx {
                return Err(bad("sample_idx out of sequence"));
            }
            out[slot].trajectories.push(Vec::new());
            current = Some((rec[0].to_string(), rec[1].to_string(), sample_idx, slot));
        }
        let slot = current.as_ref().map(|c| c.3).expect("set above");
        out[slot]
            .trajectories
            .last_mut()
            .expect("pushed above")
            .push([x, y]);
    }
    Ok(out)
}
