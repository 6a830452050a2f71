//! Joint end-to-end training with the composite loss
//! `l_total = l_goal + lambda1 * l_diff + lambda2 * l_prior`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, TrajectorySample};
use crate::diffusion::{forward_marginal_rows, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelKind};
use crate::networks::{
    EncoderBatch, GoalDenoiser, NetworkConfig, TrajectoryDenoiser, TrajectoryPrior,
};
use crate::numeric::{AdamConfig, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: u64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Training aborts once `l_total` exceeds this.
    pub divergence_threshold: f64,
    /// Stop after the first epoch that ends past this many seconds; 0 disables.
    pub time_budget_secs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-4,
            lambda1: 1.0,
            lambda2: 0.5,
            epochs: 1,
            seed: 0,
            clip_norm: 10.0,
            divergence_threshold: 1e6,
            time_budget_secs: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(
                "train.lambda1 and train.lambda2 must be >= 0".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_goal: f64,
    pub l_diff: f64,
    pub l_prior: f64,
    pub l_total: f64,
}

/// Which goal the prior term was conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalSource {
    GroundTruth,
    Sampled,
}

/// One batch in the agent frame.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub encoder: EncoderBatch,
    /// Clean goals `c_0`, `[rows, 2]`.
    pub goals: Tensor,
    /// Clean futures `y_0`, `[rows, 2 * t_q]`.
    pub futures: Tensor,
}

impl PreparedBatch {
    pub fn new(cfg: &NetworkConfig, samples: &[&TrajectorySample]) -> Result<Self> {
        let encoder = EncoderBatch::new(
            cfg,
            samples
                .iter()
                .map(|s| (s.history.as_slice(), s.neighbors.as_slice())),
        )?;
        let mut goals = Vec::with_capacity(2 * samples.len());
        let mut futures = Vec::with_capacity(2 * cfg.t_q * samples.len());
        for s in samples {
            if s.future.len() != cfg.t_q {
                return Err(Error::Data(format!(
                    "{}/{}: future length {} != {}",
                    s.scene_id,
                    s.agent_id,
                    s.future.len(),
                    cfg.t_q
                )));
            }
            let origin = s.last_observed();
            goals.extend(cfg.normalize(s.goal(), origin));
            for &p in &s.future {
                futures.extend(cfg.normalize(p, origin));
            }
        }
        Ok(Self {
            encoder,
            goals: Tensor::matrix(samples.len(), 2, goals),
            futures: Tensor::matrix(samples.len(), 2 * cfg.t_q, futures),
        })
    }

    pub fn rows(&self) -> usize {
        self.encoder.rows()
    }
}

/// Per-row diffusion steps and standard-normal draws for one training step.
/// Goal and trajectory noise are drawn independently.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub goal_steps: Vec<usize>,
    pub goal_noise: Tensor,
    pub traj_steps: Vec<usize>,
    pub traj_noise: Tensor,
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// Draws `k ~ U{1..goal_steps}` and `s ~ U{1..traj_steps}` per row plus fresh noise.
/// A chain with zero steps gets no draws.
pub fn draw_noise(
    rng: &mut impl Rng,
    rows: usize,
    goal_steps: usize,
    traj_steps: usize,
    t_q: usize,
) -> NoiseDraw {
    let (goal_steps, goal_noise) = if goal_steps > 0 {
        let k = (0..rows)
            .map(|_| rng.random_range(1..=goal_steps))
            .collect();
        (k, standard_normal(rng, rows, 2))
    } else {
        (Vec::new(), Tensor::zeros(&[0, 2]))
    };
    let (traj_steps, traj_noise) = if traj_steps > 0 {
        let s = (0..rows)
            .map(|_| rng.random_range(1..=traj_steps))
            .collect();
        (s, standard_normal(rng, rows, 2 * t_q))
    } else {
        (Vec::new(), Tensor::zeros(&[0, 2 * t_q]))
    };
    NoiseDraw {
        goal_steps,
        goal_noise,
        traj_steps,
        traj_noise,
    }
}

/// The networks a loss is evaluated with; tests substitute oracle stubs.
pub struct Heads<'a> {
    pub goal: Option<&'a dyn GoalDenoiser>,
    pub prior: Option<&'a dyn TrajectoryPrior>,
    pub path: &'a dyn TrajectoryDenoiser,
    pub goal_schedule: &'a NoiseSchedule,
    pub traj_schedule: &'a NoiseSchedule,
}

impl<'a> Heads<'a> {
    pub fn of(bundle: &'a ModelBundle) -> Self {
        Self {
            goal: bundle.endnet.as_ref().map(|n| n as &dyn GoalDenoiser),
            prior: bundle.priornet.as_ref().map(|n| n as &dyn TrajectoryPrior),
            path: &bundle.pathnet,
            goal_schedule: &bundle.goal_schedule,
            traj_schedule: &bundle.traj_schedule,
        }
    }
}

/// Mean over rows of the squared error summed over columns.
fn mean_sse(tape: &mut Tape, target: Var, pred: Var, rows: usize) -> Result<Var> {
    let diff = tape.sub(target, pred)?;
    let sse = tape.sum_squares(diff)?;
    tape.scale(sse, 1.0 / rows as f64)
}

/// `||mu - sqrt(alpha_bar_S) * y_0||^2` averaged over rows, with `mu`
/// conditioned on the ground-truth goal.
pub fn compute_prior_loss(
    tape: &mut Tape,
    params: &ParamSet,
    prior: &dyn TrajectoryPrior,
    ctx: Var,
    batch: &PreparedBatch,
    traj_schedule: &NoiseSchedule,
) -> Result<(Var, GoalSource)> {
    let ab = traj_schedule.alpha_bar(traj_schedule.steps())?;
    let target = tape.constant(batch.futures.map(|y| ab.sqrt() * y))?;
    let goal = tape.constant(batch.goals.clone())?;
    let mu = prior.prior_mean(tape, params, ctx, goal)?;
    Ok((
        mean_sse(tape, target, mu, batch.rows())?,
        GoalSource::GroundTruth,
    ))
}

/// Records the composite loss on `tape` and returns the total plus its parts.
pub fn loss_terms(
    tape: &mut Tape,
    params: &ParamSet,
    ctx: Var,
    heads: &Heads<'_>,
    batch: &PreparedBatch,
    draw: &NoiseDraw,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown, Option<GoalSource>)> {
    let rows = batch.rows();
    let zero = || Tensor::scalar(0.0);

    let l_goal = match heads.goal {
        Some(net) => {
            let noisy = forward_marginal_rows(
                &batch.goals,
                &draw.goal_steps,
                heads.goal_schedule,
                &draw.goal_noise,
            )?;
            let noisy = tape.constant(noisy)?;
            let eps = tape.constant(draw.goal_noise.clone())?;
            let pred = net.predict_goal_noise(tape, params, noisy, ctx, &draw.goal_steps)?;
            mean_sse(tape, eps, pred, rows)?
        }
        None => tape.constant(zero())?,
    };

    let l_diff = if heads.traj_schedule.steps() > 0 {
        let noisy = forward_marginal_rows(
            &batch.futures,
            &draw.traj_steps,
            heads.traj_schedule,
            &draw.traj_noise,
        )?;
        let noisy = tape.constant(noisy)?;
        let eps = tape.constant(draw.traj_noise.clone())?;
        let pred = heads
            .path
            .predict_path_noise(tape, params, noisy, ctx, &draw.traj_steps)?;
        mean_sse(tape, eps, pred, rows)?
    } else {
        tape.constant(zero())?
    };

    let (l_prior, source) = match heads.prior {
        Some(prior) => {
            let (l, s) = compute_prior_loss(tape, params, prior, ctx, batch, heads.traj_schedule)?;
            (l, Some(s))
        }
        None => (tape.constant(zero())?, None),
    };

    let weighted_diff = tape.scale(l_diff, cfg.lambda1)?;
    let weighted_prior = tape.scale(l_prior, cfg.lambda2)?;
    let partial = tape.add(l_goal, weighted_diff)?;
    let total = tape.add(partial, weighted_prior)?;
    let value = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        l_goal: value(l_goal),
        l_diff: value(l_diff),
        l_prior: value(l_prior),
        l_total: value(total),
    };
    Ok((total, breakdown, source))
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// `Some(GroundTruth)` whenever the model has a prior network.
    pub prior_goal_source: Option<GoalSource>,
}

/// One optimizer step on one batch.
pub fn training_step(
    bundle: &mut ModelBundle,
    samples: &[&TrajectorySample],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let batch = PreparedBatch::new(&bundle.network, samples)?;
    let draw = draw_noise(
        rng,
        batch.rows(),
        bundle.goal_schedule.steps(),
        bundle.traj_schedule.steps(),
        bundle.network.t_q,
    );
    let mut tape = Tape::new();
    let ctx = bundle
        .encoder
        .forward(&mut tape, &bundle.params, &batch.encoder)?;
    let (total, losses, source) = loss_terms(
        &mut tape,
        &bundle.params,
        ctx,
        &Heads::of(bundle),
        &batch,
        &draw,
        cfg,
    )?;
    if !losses.l_total.is_finite() {
        return Err(Error::NonFinite { op: "l_total" });
    }
    let mut grads = tape.backward(total, &bundle.params)?;
    drop(tape);
    let grad_norm = grads.clip_global_norm(cfg.clip_norm);
    bundle.params.adam_step(&grads, &cfg.adam())?;
    Ok(StepReport {
        losses,
        grad_norm,
        prior_goal_source: source,
    })
}

/// Root-mean-square agent-frame goal offset per coordinate; a scale that puts
/// goals at unit magnitude.
pub fn fit_coord_scale(dataset: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    for s in &dataset.samples {
        let (g, o) = (s.goal(), s.last_observed());
        sum += (g[0] - o[0]).powi(2) + (g[1] - o[1]).powi(2);
    }
    let scale = (sum / (2.0 * dataset.len().max(1) as f64)).sqrt();
    if scale > 0.0 && scale.is_finite() {
        Ok(scale)
    } else {
        Err(Error::Data(
            "cannot derive coord_scale: all goals coincide with the last observation".into(),
        ))
    }
}

/// The per-epoch random stream; resuming at epoch `e` replays exactly the same draws.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub const LOG_HEADER: &str = "step,epoch,l_goal,l_diff,l_prior,l_total,wall_ms";

/// Runs epochs `bundle.epochs_completed + 1 ..= cfg.epochs` over shuffled
/// mini-batches, appending one log row per step and writing a checkpoint after
/// every epoch.
pub fn train(
    dataset: &Dataset,
    mut bundle: ModelBundle,
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
    log_path: &Path,
) -> Result<ModelBundle> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dataset.t_p != bundle.network.t_p || dataset.t_q != bundle.network.t_q {
        return Err(Error::Config(format!(
            "dataset windows {}/{} do not match network t_p/t_q {}/{}",
            dataset.t_p, dataset.t_q, bundle.network.t_p, bundle.network.t_q
        )));
    }
    std::fs::create_dir_all(checkpoint_dir)?;
    let fresh = bundle.epochs_completed == 0 || !log_path.exists();
    let mut log = BufWriter::new(if fresh {
        File::create(log_path)?
    } else {
        OpenOptions::new().append(true).open(log_path)?
    });
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }

    let start = Instant::now();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    while bundle.epochs_completed < cfg.epochs {
        let epoch = bundle.epochs_completed + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&TrajectorySample> =
                chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let report = training_step(&mut bundle, &samples, cfg, &mut rng)?;
            let l = report.losses;
            let step = bundle.params.step();
            if l.l_total > cfg.divergence_threshold {
                return Err(Error::Diverged {
                    step,
                    loss: l.l_total,
                });
            }
            writeln!(
                log,
                "{step},{epoch},{:?},{:?},{:?},{:?},{}",
                l.l_goal,
                l.l_diff,
                l.l_prior,
                l.l_total,
                start.elapsed().as_millis()
            )?;
            sums.l_goal += l.l_goal;
            sums.l_diff += l.l_diff;
            sums.l_prior += l.l_prior;
            sums.l_total += l.l_total;
            steps += 1;
        }
        bundle.epochs_completed = epoch;
        bundle.save(&checkpoint_path(checkpoint_dir, epoch))?;
        log.flush()?;
        let n = steps as f64;
        log::info!(
            "{} epoch {epoch}: l_goal {:.4} l_diff {:.4} l_prior {:.4} l_total {:.4} ({:.1}s)",
            bundle.kind.name(),
            sums.l_goal / n,
            sums.l_diff / n,
            sums.l_prior / n,
            sums.l_total / n,
            start.elapsed().as_secs_f64()
        );
        if cfg.time_budget_secs > 0.0 && start.elapsed().as_secs_f64() > cfg.time_budget_secs {
            log::warn!("time budget reached after epoch {epoch}");
            break;
        }
    }
    Ok(bundle)
}

/// Builds a fresh model for `dataset`, deriving `coord_scale` when unset.
pub fn init_model(
    kind: ModelKind,
    mut network: NetworkConfig,
    diffusion: crate::model::DiffusionConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<ModelBundle> {
    network.t_p = dataset.t_p;
    network.t_q = dataset.t_q;
    if network.coord_scale == 0.0 {
        network.coord_scale = fit_coord_scale(dataset)?;
    }
    ModelBundle::new(kind, network, diffusion, seed)
}

/// One parsed row of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub losses: LossBreakdown,
    pub wall_ms: u64,
}

pub fn read_training_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: format!("bad {what}"),
        };
        let f = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("number"))
        };
        let u = |c: usize| -> Result<u64> {
            rec.get(c)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("integer"))
        };
        out.push(LogRow {
            step: u(0)?,
            epoch: u(1)?,
            losses: LossBreakdown {
                l_goal: f(2)?,
                l_diff: f(3)?,
                l_prior: f(4)?,
                l_total: f(5)?,
            },
            wall_ms: u(6)?,
        });
    }
    Ok(out)
}
