use idm_core::data::Point;
use idm_core::networks::{
    Backbone, Encoder, EncoderBatch, EndNet, GoalDenoiser, NetworkConfig, PathNet, PriorNet,
    TrajectoryDenoiser, TrajectoryPrior,
};
use idm_core::numeric::gradcheck::{check_gradients, GradCheckReport};
use idm_core::numeric::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const SEEDS: u64 = 10;

fn cfg(prior: Backbone, path: Backbone) -> NetworkConfig {
    NetworkConfig {
        t_p: 4,
        t_q: 5,
        context_dim: 6,
        encoder_hidden: 5,
        neighbor_hidden: 4,
        endnet_layers: 3,
        endnet_width: 8,
        priornet_backbone: prior,
        priornet_layers: 2,
        priornet_width: 6,
        pathnet_backbone: path,
        pathnet_layers: 2,
        pathnet_width: 5,
        step_embedding_dim: 4,
        coord_scale: 1.5,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// Pedestrian-like walk: random start, steps of roughly walking speed.
fn random_track(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    let mut p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    (0..n)
        .map(|_| {
            p = [
                p[0] + rng.random_range(-0.4..0.4),
                p[1] + rng.random_range(-0.4..0.4),
            ];
            p
        })
        .collect()
}

fn assert_ok(what: &str, seed: u64, report: GradCheckReport) {
    assert!(report.checked > 0);
    assert!(
        report.max_rel_error <= TOL,
        "{what} seed {seed}: {report:?}"
    );
}

#[test]
fn encoder_gradients() {
    for seed in 0..SEEDS {
        let cfg = cfg(Backbone::Mlp, Backbone::Recurrent);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc = Encoder::new(&mut params, &cfg, &mut rng).unwrap();
        let hist: Vec<Vec<Point>> = (0..3).map(|_| random_track(&mut rng, 4)).collect();
        let neighbors: Vec<Vec<Vec<Point>>> = (0..3)
            .map(|i| (0..i).map(|_| random_track(&mut rng, 4)).collect())
            .collect();
        let batch = EncoderBatch::new(
            &cfg,
            hist.iter()
                .zip(&neighbors)
                .map(|(h, n)| (h.as_slice(), n.as_slice())),
        )
        .unwrap();
        let report = check_gradients(
            &mut params,
            |tape, ps| {
                let x = enc.forward(tape, ps, &batch)?;
                tape.sum_squares(x)
            },
            H,
            None,
        )
        .unwrap();
        assert_ok("encoder", seed, report);
    }
}

#[test]
fn endnet_gradients() {
    for seed in 0..SEEDS {
        let cfg = cfg(Backbone::Mlp, Backbone::Recurrent);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params = ParamSet::new();
        let net = EndNet::new(&mut params, &cfg, 50, &mut rng).unwrap();
        let c = random(&mut rng, 3, 2);
        let x = random(&mut rng, 3, 6);
        let steps = [1, 17, 50];
        let report = check_gradients(
            &mut params,
            |tape, ps| {
                let c = tape.constant(c.clone())?;
                let x = tape.constant(x.clone())?;
                let e = net.predict_goal_noise(tape, ps, c, x, &steps)?;
                tape.sum_squares(e)
            },
            H,
            None,
        )
        .unwrap();
        assert_ok("endnet", seed, report);
    }
}

#[test]
fn priornet_gradients_both_backbones() {
    for backbone in [Backbone::Mlp, Backbone::Recurrent] {
        for seed in 0..SEEDS {
            let cfg = cfg(backbone, Backbone::Recurrent);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut params = ParamSet::new();
            let net = PriorNet::new(&mut params, &cfg, &mut rng).unwrap();
            let x = random(&mut rng, 3, 6);
            let g = random(&mut rng, 3, 2);
            let report = check_gradients(
                &mut params,
                |tape, ps| {
                    let x = tape.constant(x.clone())?;
                    let g = tape.constant(g.clone())?;
                    let m = net.prior_mean(tape, ps, x, g)?;
                    tape.sum_squares(m)
                },
                H,
                None,
            )
            .unwrap();
            assert_ok(&format!("priornet/{backbone}"), seed, report);
        }
    }
}

#[test]
fn pathnet_gradients_both_backbones() {
    for backbone in [Backbone::Mlp, Backbone::Recurrent] {
        for seed in 0..SEEDS {
            let cfg = cfg(Backbone::Mlp, backbone);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut params = ParamSet::new();
            let net = PathNet::new(&mut params, &cfg, 10, &mut rng).unwrap();
            let y = random(&mut rng, 3, 10);
            let x = random(&mut rng, 3, 6);
            let steps = [1, 4, 10];
            let report = check_gradients(
                &mut params,
                |tape, ps| {
                    let y = tape.constant(y.clone())?;
                    let x = tape.constant(x.clone())?;
                    let e = net.predict_path_noise(tape, ps, y, x, &steps)?;
                    tape.sum_squares(e)
                },
                H,
                None,
            )
            .unwrap();
            assert_ok(&format!("pathnet/{backbone}"), seed, report);
        }
    }
}
