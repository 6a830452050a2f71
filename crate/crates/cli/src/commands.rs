use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use idm_core::data::{
    generate, load_trajectory_csv, read_mode_endpoints, write_dataset_csv, write_mode_endpoints,
    write_mode_labels, Dataset, ModeEndpoints, Point, TrajectorySample, WindowKey,
};
use idm_core::evaluation::{
    density_grid, evaluate, AgentPredictions, Bounds, DensityGrid, MetricReport,
};
use idm_core::inference::{
    predict_dataset, read_predictions, write_predictions, DenoiserCalls, SamplerOptions,
};
use idm_core::model::{ModelBundle, ModelKind};
use idm_core::training::{init_model, train as run_training};

use crate::config::{ConfigError, Layers, RunConfig};
use crate::svg;
use crate::Common;

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut layers = Layers::default();
    for pair in &common.set {
        layers.set_pair(pair)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            layers.set(key, v.clone());
        }
    }
    if let Some(seed) = common.seed {
        layers.set("run.seed", seed.to_string());
    }
    Ok(RunConfig::resolve(common.config.as_deref(), &layers)?)
}

fn show<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Loads the configured dataset and returns (training part, held-out tail).
fn load_split(cfg: &RunConfig, t_p: usize, t_q: usize) -> Result<(Dataset, Dataset)> {
    let path = cfg.require_data_path()?;
    let data = load_trajectory_csv(path, t_p, t_q, cfg.data.stride)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(data.split_tail(cfg.data.holdout))
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                ConfigError(format!("{flag}: cannot parse {s:?} as a step count")).into()
            })
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario: crossroad or avoidance.
    #[arg(long)]
    scenario: Option<String>,
    /// Number of agent windows.
    #[arg(long)]
    n: Option<usize>,
    /// Path-noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = resolve(
        &args.common,
        &[
            ("scenario.kind", args.scenario.clone()),
            ("scenario.samples", show(&args.n)),
            ("scenario.sigma", args.sigma.map(|s| format!("{s:?}"))),
            ("run.output_dir", path_flag(&args.out)),
        ],
    )?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let (dataset, labels) = generate(&cfg.scenario)?;
    write_dataset_csv(&dataset, &out.join("dataset.csv"))?;
    write_mode_labels(&labels, &out.join("modes.csv"))?;
    let endpoints: Vec<ModeEndpoints> = dataset
        .samples
        .iter()
        .map(|s| ModeEndpoints {
            scene_id: s.scene_id.clone(),
            agent_id: s.agent_id.clone(),
            modes: cfg.scenario.mode_endpoints(s),
        })
        .collect();
    write_mode_endpoints(&endpoints, &out.join("mode_endpoints.csv"))?;
    cfg.write_provenance(out)?;
    println!("wrote {} windows to {}", dataset.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV (`scene_id,agent_id,t,x,y`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, log and final model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total number of epochs.
    #[arg(long)]
    epochs: Option<u64>,
    /// idm or baseline.
    #[arg(long)]
    model: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve(
        &args.common,
        &[
            ("data.path", path_flag(&args.data)),
            ("run.output_dir", path_flag(&args.out)),
            ("train.epochs", show(&args.epochs)),
            ("train.model", args.model.clone()),
        ],
    )?;
    cfg.require_data_path()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    cfg.write_provenance(out)?;
    let (train_set, _) = load_split(&cfg, cfg.data.t_p, cfg.data.t_q)?;
    let bundle = match &args.resume {
        Some(path) => {
            let b = ModelBundle::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            log::info!(
                "resuming {} after epoch {}",
                b.kind.name(),
                b.epochs_completed
            );
            b
        }
        None => init_model(
            cfg.model,
            cfg.network.clone(),
            cfg.diffusion.clone(),
            &train_set,
            cfg.seed,
        )?,
    };
    log::info!(
        "training {} on {} windows, {} parameters",
        bundle.kind.name(),
        train_set.len(),
        bundle.params.scalar_count()
    );
    let bundle = run_training(
        &train_set,
        bundle,
        &cfg.train,
        &out.join("checkpoints"),
        &out.join("train_log.csv"),
    )?;
    bundle.save(&out.join("model.ckpt"))?;
    println!(
        "trained {} epochs; model at {}",
        bundle.epochs_completed,
        out.join("model.ckpt").display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV whose windows are predicted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Predictions per agent.
    #[arg(long)]
    k: Option<usize>,
    /// Output predictions CSV; metadata goes to `<out>.meta.txt`.
    #[arg(long)]
    out: PathBuf,
    /// Predict only the held-out tail of the dataset.
    #[arg(long)]
    holdout_only: bool,
    /// Add posterior noise at every reverse step but the last.
    #[arg(long)]
    stochastic: bool,
}

struct Predicted {
    samples: Vec<TrajectorySample>,
    sets: Vec<idm_core::inference::PredictionSet>,
    calls: DenoiserCalls,
    wall_ns: u128,
}

fn run_predictions(bundle: &ModelBundle, cfg: &RunConfig, holdout_only: bool) -> Result<Predicted> {
    let (train_set, holdout) = load_split(cfg, bundle.network.t_p, bundle.network.t_q)?;
    let samples = if holdout_only {
        holdout.samples
    } else {
        let mut all = train_set.samples;
        all.extend(holdout.samples);
        all
    };
    let options = SamplerOptions {
        stochastic: cfg.predict.stochastic,
    };
    let t = Instant::now();
    let (sets, calls) = predict_dataset(
        bundle,
        &samples,
        cfg.predict.count,
        cfg.seed,
        options,
        cfg.predict.chunk,
    )?;
    Ok(Predicted {
        samples,
        sets,
        calls,
        wall_ns: t.elapsed().as_nanos(),
    })
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let cfg = resolve(
        &args.common,
        &[
            ("data.path", path_flag(&args.data)),
            ("predict.count", show(&args.k)),
            (
                "predict.stochastic",
                args.stochastic.then(|| "true".to_string()),
            ),
        ],
    )?;
    cfg.require_data_path()?;
    let bundle = ModelBundle::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let p = run_predictions(&bundle, &cfg, args.holdout_only)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_predictions(&args.out, &p.samples, &p.sets)?;
    std::fs::write(sidecar(&args.out, ".config.txt"), cfg.to_text())?;

    let agents = p.samples.len().max(1) as f64;
    let network_ns: u64 = p.sets.iter().map(|s| s.network_ns).sum();
    let mut meta = String::new();
    let _ = writeln!(meta, "model = {}", bundle.kind.name());
    let _ = writeln!(meta, "config_hash = {}", cfg.hash());
    let _ = writeln!(meta, "agents = {}", p.samples.len());
    let _ = writeln!(meta, "predictions_per_agent = {}", cfg.predict.count);
    let _ = writeln!(meta, "stochastic = {}", cfg.predict.stochastic);
    let _ = writeln!(meta, "calls.endnet = {}", p.calls.endnet);
    let _ = writeln!(meta, "calls.priornet = {}", p.calls.priornet);
    let _ = writeln!(meta, "calls.pathnet = {}", p.calls.pathnet);
    let _ = writeln!(meta, "calls.total = {}", p.calls.total());
    let _ = writeln!(
        meta,
        "network_ms_per_agent = {:.4}",
        network_ns as f64 / 1e6 / agents
    );
    let _ = writeln!(meta, "wall_ms = {:.3}", p.wall_ns as f64 / 1e6);
    std::fs::write(sidecar(&args.out, ".meta.txt"), meta)?;
    println!(
        "wrote {} x {} predictions to {} ({} denoiser calls)",
        p.samples.len(),
        cfg.predict.count,
        args.out.display(),
        p.calls.total()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Predictions CSV written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset CSV holding the ground truth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mode-endpoint sidecar written by `synth`; enables mode recall.
    #[arg(long)]
    modes: Option<PathBuf>,
    /// Mode-recall radius; 0 uses a quarter of the smallest inter-mode distance.
    #[arg(long)]
    radius: Option<f64>,
    /// Output directory for metrics and the density grid.
    #[arg(long)]
    out: PathBuf,
    /// Cells per side of the density grid.
    #[arg(long, default_value_t = 40)]
    grid_resolution: usize,
    /// Index of the agent whose predictions feed the density grid.
    #[arg(long, default_value_t = 0)]
    grid_agent: usize,
}

/// A quarter of the smallest distance between two modes of any agent.
pub fn derived_radius(modes: &[Vec<Point>]) -> Option<f64> {
    let mut best = f64::INFINITY;
    for m in modes {
        for (i, a) in m.iter().enumerate() {
            for b in &m[i + 1..] {
                best = best.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
    }
    best.is_finite().then_some(best / 4.0)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve(
        &args.common,
        &[
            ("data.path", path_flag(&args.data)),
            ("data.modes", path_flag(&args.modes)),
            ("eval.radius", args.radius.map(|r| format!("{r:?}"))),
        ],
    )?;
    let data_path = cfg.require_data_path()?;
    let stored = read_predictions(&args.predictions)?;
    let t_q = stored
        .first()
        .and_then(|s| s.trajectories.first())
        .map(Vec::len)
        .ok_or_else(|| anyhow::anyhow!("{} holds no predictions", args.predictions.display()))?;
    let truth = load_trajectory_csv(data_path, cfg.data.t_p, t_q, cfg.data.stride)?;
    let by_key: HashMap<WindowKey, &TrajectorySample> =
        truth.samples.iter().map(|s| (s.key(), s)).collect();
    let mode_map: HashMap<(String, String), Vec<Point>> = match &cfg.data.modes {
        Some(path) => read_mode_endpoints(path)?
            .into_iter()
            .map(|m| {
                (
                    (m.scene_id, m.agent_id),
                    m.modes.into_iter().map(|(_, p)| p).collect(),
                )
            })
            .collect(),
        None => HashMap::new(),
    };

    let mut agents = Vec::with_capacity(stored.len());
    let mut modes_used: Vec<Vec<Point>> = Vec::new();
    for s in &stored {
        let sample = by_key.get(&s.key).ok_or_else(|| {
            anyhow::anyhow!(
                "no ground-truth window for scene {} agent {} in {}",
                s.scene_id,
                s.agent_id,
                data_path.display()
            )
        })?;
        let modes = mode_map.get(&(s.scene_id.clone(), s.agent_id.clone()));
        if let Some(m) = modes {
            modes_used.push(m.clone());
        }
        agents.push(AgentPredictions {
            trajectories: &s.trajectories,
            truth: &sample.future,
            modes: modes.map(Vec::as_slice),
        });
    }
    let radius = if modes_used.is_empty() {
        None
    } else if cfg.recall_radius > 0.0 {
        Some(cfg.recall_radius)
    } else {
        derived_radius(&modes_used)
    };
    let report = evaluate(&agents, radius)?;
    create_dir(&args.out)?;
    report.write(&args.out, "metrics")?;

    let focus = stored.get(args.grid_agent).ok_or_else(|| {
        ConfigError(format!(
            "--grid-agent {} out of range ({} agents)",
            args.grid_agent,
            stored.len()
        ))
    })?;
    let bounds = Bounds::enclosing(focus.trajectories.iter().flatten(), 0.5)
        .ok_or_else(|| anyhow::anyhow!("empty trajectories"))?;
    density_grid(&focus.trajectories, bounds, args.grid_resolution)?
        .write_csv(&args.out.join("density.csv"))?;
    std::fs::write(args.out.join("resolved_config.txt"), cfg.to_text())?;
    print!("{}", report.summary());
    if let Some(r) = radius {
        println!("recall radius: {r:.4}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// IDM checkpoint.
    #[arg(long)]
    idm: PathBuf,
    /// Baseline checkpoint.
    #[arg(long)]
    baseline: PathBuf,
    /// Dataset CSV; the held-out tail is benchmarked.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Predictions per agent.
    #[arg(long)]
    k: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

/// One model's row of the comparison table.
pub struct BenchRow {
    pub model: ModelKind,
    pub calls: DenoiserCalls,
    pub predictions: usize,
    pub ms_per_prediction: f64,
    pub network_ms_per_prediction: f64,
    pub report: MetricReport,
}

pub const BENCH_HEADER: &str = "model,endnet_calls,priornet_calls,pathnet_calls,calls_per_prediction,ms_per_prediction,network_ms_per_prediction,min_ade,min_fde";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let per = |c: u64| c as f64 / self.predictions as f64;
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:?},{:?}",
            self.model.name(),
            per(self.calls.endnet),
            per(self.calls.priornet),
            per(self.calls.pathnet),
            per(self.calls.total()),
            self.ms_per_prediction,
            self.network_ms_per_prediction,
            self.report.min_ade,
            self.report.min_fde
        )
    }
}

pub fn bench_model(bundle: &ModelBundle, cfg: &RunConfig) -> Result<BenchRow> {
    let p = run_predictions(bundle, cfg, true)?;
    let predictions = p.samples.len() * cfg.predict.count;
    if predictions == 0 {
        anyhow::bail!("held-out set is empty; raise data.holdout");
    }
    let agents: Vec<AgentPredictions<'_>> = p
        .samples
        .iter()
        .zip(&p.sets)
        .map(|(s, set)| AgentPredictions {
            trajectories: &set.trajectories,
            truth: &s.future,
            modes: None,
        })
        .collect();
    let report = evaluate(&agents, None)?;
    let network_ns: u64 = p.sets.iter().map(|s| s.network_ns).sum();
    Ok(BenchRow {
        model: bundle.kind,
        calls: p.calls,
        predictions,
        ms_per_prediction: p.wall_ns as f64 / 1e6 / predictions as f64,
        network_ms_per_prediction: network_ns as f64 / 1e6 / predictions as f64,
        report,
    })
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let cfg = resolve(
        &args.common,
        &[
            ("data.path", path_flag(&args.data)),
            ("predict.count", show(&args.k)),
        ],
    )?;
    cfg.require_data_path()?;
    let mut rows = Vec::new();
    for (path, expected) in [
        (&args.idm, ModelKind::Idm),
        (&args.baseline, ModelKind::Baseline),
    ] {
        let bundle = ModelBundle::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        if bundle.kind != expected {
            return Err(ConfigError(format!(
                "{} holds a {} model, expected {}",
                path.display(),
                bundle.kind.name(),
                expected.name()
            ))
            .into());
        }
        rows.push(bench_model(&bundle, &cfg)?);
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    let mut sweep = String::from("model,n,min_ade,min_fde\n");
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
        for (n, a, f) in &r.report.sweep {
            let _ = writeln!(sweep, "{},{n},{a:?},{f:?}", r.model.name());
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(&args.out, &csv)?;
    std::fs::write(sidecar(&args.out, ".sweep.csv"), sweep)?;
    print!("{csv}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Predictions CSV to draw as polylines.
    #[arg(long, conflicts_with = "density")]
    predictions: Option<PathBuf>,
    /// Agent index within the predictions file; all agents when omitted.
    #[arg(long)]
    agent: Option<usize>,
    /// Density grid CSV written by `eval`.
    #[arg(long)]
    density: Option<PathBuf>,
    /// Timestep layer of the density grid to draw (repeatable); all when omitted.
    #[arg(long)]
    layer: Vec<usize>,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

pub fn plot(args: PlotArgs) -> Result<()> {
    let text = match (&args.predictions, &args.density) {
        (Some(path), None) => {
            let stored = read_predictions(path)?;
            let trajs: Vec<Vec<Point>> = match args.agent {
                Some(a) => stored
                    .get(a)
                    .ok_or_else(|| {
                        ConfigError(format!(
                            "--agent {a} out of range ({} agents)",
                            stored.len()
                        ))
                    })?
                    .trajectories
                    .clone(),
                None => stored.into_iter().flat_map(|s| s.trajectories).collect(),
            };
            svg::trajectories(&trajs)
        }
        (None, Some(path)) => {
            let grid = DensityGrid::read_csv(path)?;
            let layers: Vec<usize> = if args.layer.is_empty() {
                (0..grid.layers.len()).collect()
            } else {
                args.layer.clone()
            };
            if let Some(&bad) = layers.iter().find(|&&l| l >= grid.layers.len()) {
                return Err(ConfigError(format!(
                    "--layer {bad} out of range ({} layers)",
                    grid.layers.len()
                ))
                .into());
            }
            svg::density(&grid, &layers)
        }
        _ => {
            return Err(
                ConfigError("plot needs exactly one of --predictions or --density".into()).into(),
            )
        }
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(&args.out, text)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mode-endpoint sidecar; adds mode recall to the report.
    #[arg(long)]
    modes: Option<PathBuf>,
    /// Goal-chain step counts.
    #[arg(long, default_value = "10,50,100")]
    k_values: String,
    /// Trajectory-chain step counts.
    #[arg(long, default_value = "5,10,20")]
    s_values: String,
    /// Epochs per grid cell.
    #[arg(long)]
    epochs: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct SweepCell {
    k: usize,
    s: usize,
    min_ade: f64,
    min_fde: f64,
    recall: Option<f64>,
    calls_per_prediction: f64,
    ms_per_prediction: f64,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let ks = parse_list("--k-values", &args.k_values)?;
    let ss = parse_list("--s-values", &args.s_values)?;
    if ks.is_empty() || ss.is_empty() || ks.iter().chain(&ss).any(|&v| v == 0) {
        return Err(ConfigError("step counts must be positive".into()).into());
    }
    let base = resolve(
        &args.common,
        &[
            ("data.path", path_flag(&args.data)),
            ("data.modes", path_flag(&args.modes)),
            ("train.epochs", show(&args.epochs)),
            ("run.output_dir", path_flag(&args.out)),
        ],
    )?;
    base.require_data_path()?;
    let out = base.output_dir.clone();
    create_dir(&out)?;
    base.write_provenance(&out)?;
    let (train_set, holdout) = load_split(&base, base.data.t_p, base.data.t_q)?;
    if holdout.is_empty() {
        anyhow::bail!("held-out set is empty; raise data.holdout");
    }
    let mode_map: HashMap<(String, String), Vec<Point>> = match &base.data.modes {
        Some(path) => read_mode_endpoints(path)?
            .into_iter()
            .map(|m| {
                (
                    (m.scene_id, m.agent_id),
                    m.modes.into_iter().map(|(_, p)| p).collect(),
                )
            })
            .collect(),
        None => HashMap::new(),
    };
    let holdout_modes: Vec<Option<&Vec<Point>>> = holdout
        .samples
        .iter()
        .map(|s| mode_map.get(&(s.scene_id.clone(), s.agent_id.clone())))
        .collect();
    let present: Vec<Vec<Point>> = holdout_modes
        .iter()
        .flatten()
        .map(|m| (*m).clone())
        .collect();
    let radius = match (present.is_empty(), base.recall_radius > 0.0) {
        (true, _) => None,
        (false, true) => Some(base.recall_radius),
        (false, false) => derived_radius(&present),
    };

    let mut cells = Vec::new();
    for &k in &ks {
        for &s in &ss {
            let mut cfg = base.clone();
            cfg.diffusion.goal_steps = k;
            cfg.diffusion.traj_steps = s;
            let dir = out.join(format!("k{k}_s{s}"));
            let bundle = init_model(
                ModelKind::Idm,
                cfg.network.clone(),
                cfg.diffusion.clone(),
                &train_set,
                cfg.seed,
            )?;
            let bundle = run_training(
                &train_set,
                bundle,
                &cfg.train,
                &dir.join("checkpoints"),
                &dir.join("train_log.csv"),
            )?;
            let options = SamplerOptions {
                stochastic: cfg.predict.stochastic,
            };
            let t = Instant::now();
            let (sets, calls) = predict_dataset(
                &bundle,
                &holdout.samples,
                cfg.predict.count,
                cfg.seed,
                options,
                cfg.predict.chunk,
            )?;
            let wall_ms = t.elapsed().as_secs_f64() * 1e3;
            let agents: Vec<AgentPredictions<'_>> = holdout
                .samples
                .iter()
                .zip(&sets)
                .zip(&holdout_modes)
                .map(|((sample, set), m)| AgentPredictions {
                    trajectories: &set.trajectories,
                    truth: &sample.future,
                    modes: m.map(|v| v.as_slice()),
                })
                .collect();
            let report = evaluate(&agents, radius)?;
            let predictions = (holdout.len() * cfg.predict.count) as f64;
            log::info!(
                "K={k} S={s}: minADE {:.4} minFDE {:.4}",
                report.min_ade,
                report.min_fde
            );
            cells.push(SweepCell {
                k,
                s,
                min_ade: report.min_ade,
                min_fde: report.min_fde,
                recall: report.mode_recall,
                calls_per_prediction: calls.total() as f64 / predictions,
                ms_per_prediction: wall_ms / predictions,
            });
        }
    }

    let mut csv = String::from(
        "k,s,epochs,min_ade,min_fde,mode_recall,calls_per_prediction,ms_per_prediction\n",
    );
    for c in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{:?},{:?},{},{},{:.6}",
            c.k,
            c.s,
            base.train.epochs,
            c.min_ade,
            c.min_fde,
            c.recall.map(|r| format!("{r:?}")).unwrap_or_default(),
            c.calls_per_prediction,
            c.ms_per_prediction
        );
    }
    std::fs::write(out.join("sweep.csv"), &csv)?;
    std::fs::write(out.join("sweep.txt"), sweep_summary(&cells, &ks, &ss))?;
    print!("{csv}");
    Ok(())
}

fn sweep_summary(cells: &[SweepCell], ks: &[usize], ss: &[usize]) -> String {
    let mut t =
        String::from("minFDE by goal steps K (rows) and trajectory steps S (columns)\n\n     K");
    for s in ss {
        let _ = write!(t, "  S={s:<6}");
    }
    t.push('\n');
    let at = |k: usize, s: usize| {
        cells
            .iter()
            .find(|c| c.k == k && c.s == s)
            .map(|c| c.min_fde)
    };
    for &k in ks {
        let _ = write!(t, "{k:>6}");
        for &s in ss {
            let _ = write!(t, "  {:<8.4}", at(k, s).unwrap_or(f64::NAN));
        }
        t.push('\n');
    }
    t.push_str("\nTrend in K (more goal steps should give more precise predictions):\n");
    let mut k_sorted = ks.to_vec();
    k_sorted.sort_unstable();
    for &s in ss {
        let series: Vec<f64> = k_sorted.iter().filter_map(|&k| at(k, s)).collect();
        let improving = series.windows(2).filter(|w| w[1] <= w[0]).count();
        let verdict = if improving == series.len().saturating_sub(1) {
            "holds"
        } else if improving == 0 {
            "reversed"
        } else {
            "mixed"
        };
        let _ = writeln!(
            t,
            "  S={s}: minFDE {} as K increases ({verdict}; {improving}/{} steps improve)",
            series
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" -> "),
            series.len().saturating_sub(1)
        );
    }
    t
}
