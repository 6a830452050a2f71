use std::cell::RefCell;

use idm_core::data::{generate, Dataset, ScenarioKind, ScenarioSpec, TrajectorySample};
use idm_core::diffusion::NoiseSchedule;
use idm_core::inference::{
    draw_rng, predict, predict_dataset, predict_many, read_predictions, write_predictions,
    DenoiserCalls, Sampler, SamplerOptions,
};
use idm_core::model::{DiffusionConfig, ModelBundle, ModelKind};
use idm_core::networks::{GoalDenoiser, NetworkConfig, TrajectoryDenoiser, TrajectoryPrior};
use idm_core::numeric::{ParamSet, Tape, Tensor, Var};
use idm_core::training::init_model;

struct Zero;

impl GoalDenoiser for Zero {
    fn predict_goal_noise(
        &self,
        t: &mut Tape,
        _: &ParamSet,
        y: Var,
        _: Var,
        _: &[usize],
    ) -> idm_core::Result<Var> {
        let shape = t.value(y).shape().to_vec();
        t.constant(Tensor::zeros(&shape))
    }
}

impl TrajectoryDenoiser for Zero {
    fn predict_path_noise(
        &self,
        t: &mut Tape,
        _: &ParamSet,
        y: Var,
        _: Var,
        _: &[usize],
    ) -> idm_core::Result<Var> {
        let shape = t.value(y).shape().to_vec();
        t.constant(Tensor::zeros(&shape))
    }
}

/// Prior returning a fixed mean.
struct Fixed(Tensor);

impl TrajectoryPrior for Fixed {
    fn prior_mean(&self, t: &mut Tape, _: &ParamSet, _: Var, _: Var) -> idm_core::Result<Var> {
        t.constant(self.0.clone())
    }
}

/// Knows the clean trajectory and returns the exact noise in its input.
struct TrueNoise {
    clean: Tensor,
    sched: NoiseSchedule,
    seen: RefCell<Vec<usize>>,
}

impl TrajectoryDenoiser for TrueNoise {
    fn predict_path_noise(
        &self,
        t: &mut Tape,
        _: &ParamSet,
        y: Var,
        _: Var,
        steps: &[usize],
    ) -> idm_core::Result<Var> {
        let ab = self.sched.alpha_bar(steps[0])?;
        self.seen.borrow_mut().push(steps[0]);
        let eps = t
            .value(y)
            .zip_map(&self.clean, |y, c| (y - ab.sqrt() * c) / (1.0 - ab).sqrt())?;
        t.constant(eps)
    }
}

fn sampler<'a>(
    params: &'a ParamSet,
    goal: &'a dyn GoalDenoiser,
    prior: &'a dyn TrajectoryPrior,
    path: &'a dyn TrajectoryDenoiser,
    goal_schedule: &'a NoiseSchedule,
    traj_schedule: &'a NoiseSchedule,
) -> Sampler<'a> {
    Sampler {
        params,
        goal: Some(goal),
        prior: Some(prior),
        path,
        goal_schedule,
        traj_schedule,
        options: SamplerOptions::default(),
    }
}

#[test]
fn zero_noise_estimate_rescales_the_start() {
    let goal_schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let traj_schedule = NoiseSchedule::linear(10, 1e-4, 0.05).unwrap();
    let params = ParamSet::new();
    let prior = Fixed(Tensor::zeros(&[3, 4]));
    let s = sampler(
        &params,
        &Zero,
        &prior,
        &Zero,
        &goal_schedule,
        &traj_schedule,
    );
    let ctx = Tensor::zeros(&[3, 5]);
    let mut rngs: Vec<_> = (0..3).map(|i| draw_rng(8, i)).collect();
    let mut calls = DenoiserCalls::default();
    let goals = s.sample_goals(&ctx, &mut rngs, &mut calls).unwrap();
    assert_eq!(calls.endnet, 300);

    let mut fresh: Vec<_> = (0..3).map(|i| draw_rng(8, i)).collect();
    let start = Tensor::matrix(
        3,
        2,
        fresh
            .iter_mut()
            .flat_map(|r| {
                use rand::Rng;
                (0..2)
                    .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect::<Vec<_>>()
            })
            .collect(),
    );
    let prod: f64 = goal_schedule
        .betas()
        .iter()
        .map(|b| (1.0 - b).sqrt())
        .product();
    for (g, c) in goals.data().iter().zip(start.data()) {
        assert!(
            (g - c / prod).abs() <= 1e-12 * (c / prod).abs().max(1.0),
            "{g} vs {}",
            c / prod
        );
    }
}

#[test]
fn empty_trajectory_chain_returns_the_prior_mean() {
    let goal_schedule = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
    let traj_schedule = NoiseSchedule::empty();
    let params = ParamSet::new();
    let mu = Tensor::matrix(2, 4, vec![0.5, -1.0, 2.0, 0.25, 3.0, 1.5, -0.75, 0.0]);
    let prior = Fixed(mu.clone());
    let s = sampler(
        &params,
        &Zero,
        &prior,
        &Zero,
        &goal_schedule,
        &traj_schedule,
    );
    let mut rngs: Vec<_> = (0..2).map(|i| draw_rng(1, i)).collect();
    let mut calls = DenoiserCalls::default();
    let out = s
        .sample_trajectories(
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 2]),
            &mut rngs,
            &mut calls,
        )
        .unwrap();
    assert_eq!(out, mu);
    assert_eq!(
        calls,
        DenoiserCalls {
            endnet: 0,
            priornet: 2,
            pathnet: 0
        }
    );
}

#[test]
fn true_noise_at_one_step_recovers_the_clean_trajectory() {
    let goal_schedule = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
    let traj_schedule = NoiseSchedule::linear(1, 0.05, 0.05).unwrap();
    let params = ParamSet::new();
    let clean = Tensor::matrix(2, 4, vec![1.0, 2.0, -0.5, 0.3, 0.0, -1.2, 2.2, 0.9]);
    let ab = traj_schedule.alpha_bar(1).unwrap();
    let prior = Fixed(clean.map(|c| ab.sqrt() * c));
    let oracle = TrueNoise {
        clean: clean.clone(),
        sched: traj_schedule.clone(),
        seen: RefCell::new(Vec::new()),
    };
    let s = sampler(
        &params,
        &Zero,
        &prior,
        &oracle,
        &goal_schedule,
        &traj_schedule,
    );
    let mut rngs: Vec<_> = (0..2).map(|i| draw_rng(4, i)).collect();
    let mut calls = DenoiserCalls::default();
    let out = s
        .sample_trajectories(
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 2]),
            &mut rngs,
            &mut calls,
        )
        .unwrap();
    for (a, b) in out.data().iter().zip(clean.data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(*oracle.seen.borrow(), vec![1]);
}

#[test]
fn reverse_steps_run_from_s_down_to_one() {
    let goal_schedule = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
    let traj_schedule = NoiseSchedule::linear(10, 1e-4, 0.05).unwrap();
    let params = ParamSet::new();
    let clean = Tensor::zeros(&[1, 4]);
    let prior = Fixed(clean.clone());
    let oracle = TrueNoise {
        clean,
        sched: traj_schedule.clone(),
        seen: RefCell::new(Vec::new()),
    };
    let s = sampler(
        &params,
        &Zero,
        &prior,
        &oracle,
        &goal_schedule,
        &traj_schedule,
    );
    let mut rngs = vec![draw_rng(0, 0)];
    s.sample_trajectories(
        &Tensor::zeros(&[1, 3]),
        &Tensor::zeros(&[1, 2]),
        &mut rngs,
        &mut DenoiserCalls::default(),
    )
    .unwrap();
    assert_eq!(*oracle.seen.borrow(), (1..=10).rev().collect::<Vec<_>>());
}

fn small_network() -> NetworkConfig {
    NetworkConfig {
        context_dim: 8,
        encoder_hidden: 4,
        neighbor_hidden: 4,
        endnet_width: 8,
        priornet_width: 8,
        pathnet_width: 4,
        step_embedding_dim: 4,
        ..NetworkConfig::default()
    }
}

fn data(samples: usize) -> Dataset {
    let spec = ScenarioSpec {
        samples,
        seed: 2,
        ..ScenarioSpec::new(ScenarioKind::Crossroad)
    };
    generate(&spec).unwrap().0
}

fn bundle(kind: ModelKind, d: &Dataset) -> ModelBundle {
    init_model(kind, small_network(), DiffusionConfig::default(), d, 6).unwrap()
}

#[test]
fn call_counts_per_prediction() {
    let d = data(3);
    let idm = bundle(ModelKind::Idm, &d);
    let set = predict(&idm, &d.samples[0], 20, 1, SamplerOptions::default()).unwrap();
    assert_eq!(set.trajectories.len(), 20);
    assert_eq!(
        set.calls,
        DenoiserCalls {
            endnet: 2000,
            priornet: 20,
            pathnet: 200
        }
    );
    assert_eq!(set.calls.total(), 20 * (100 + 10 + 1));

    let base = bundle(ModelKind::Baseline, &d);
    let set = predict(&base, &d.samples[0], 20, 1, SamplerOptions::default()).unwrap();
    assert_eq!(
        set.calls,
        DenoiserCalls {
            endnet: 0,
            priornet: 0,
            pathnet: 2000
        }
    );
    assert!(set.trajectories.iter().all(|t| t.len() == 12));

    let (_, total) = predict_dataset(&idm, &d.samples, 1, 1, SamplerOptions::default(), 2).unwrap();
    assert_eq!(total.total(), 3 * 111);
}

#[test]
fn predictions_do_not_depend_on_batching() {
    let d = data(5);
    let idm = bundle(ModelKind::Idm, &d);
    for stochastic in [false, true] {
        let opts = SamplerOptions { stochastic };
        let (one, _) = predict_dataset(&idm, &d.samples, 4, 9, opts, 1).unwrap();
        let (all, _) = predict_dataset(&idm, &d.samples, 4, 9, opts, 64).unwrap();
        let refs: Vec<&TrajectorySample> = d.samples.iter().collect();
        let many = predict_many(&idm, &refs, 4, 9, opts).unwrap();
        for ((a, b), c) in one.iter().zip(&all).zip(&many) {
            assert_eq!(a.trajectories, b.trajectories);
            assert_eq!(a.trajectories, c.trajectories);
            assert_eq!(a.goals, b.goals);
        }
        let other = predict_dataset(&idm, &d.samples, 4, 10, opts, 64)
            .unwrap()
            .0;
        assert_ne!(other[0].trajectories, all[0].trajectories);
    }
    let det = predict(&idm, &d.samples[0], 3, 9, SamplerOptions::default()).unwrap();
    let sto = predict(
        &idm,
        &d.samples[0],
        3,
        9,
        SamplerOptions { stochastic: true },
    )
    .unwrap();
    assert_ne!(det.trajectories, sto.trajectories);
}

#[test]
fn prediction_csv_round_trip() {
    let d = data(4);
    let idm = bundle(ModelKind::Idm, &d);
    let (sets, _) = predict_dataset(&idm, &d.samples, 3, 2, SamplerOptions::default(), 64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_predictions(&path, &d.samples, &sets).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back.len(), 4);
    for ((s, set), b) in d.samples.iter().zip(&sets).zip(&back) {
        assert_eq!(b.key, s.key());
        assert_eq!(b.trajectories, set.trajectories);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("scene_id,agent_id,sample_idx,t,x,y")
    );
    assert_eq!(text.lines().count(), 1 + 4 * 3 * 12);
}

#[test]
fn count_must_be_positive() {
    let d = data(2);
    let idm = bundle(ModelKind::Idm, &d);
    assert!(predict(&idm, &d.samples[0], 0, 1, SamplerOptions::default()).is_err());
}
