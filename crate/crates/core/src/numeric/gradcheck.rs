//! Central finite-difference check of tape gradients.

use crate::error::Result;
use crate::numeric::{ParamSet, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small floor so exactly-zero gradients compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `backward` against `(f(p + h) - f(p - h)) / 2h`.
///
/// `per_param` caps how many entries of each tensor are probed; entries are
/// spread evenly across the tensor. `None` probes every entry.
pub fn check_gradients<F>(
    params: &mut ParamSet,
    loss_fn: F,
    step: f64,
    per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let analytic = tape.backward(loss, params)?;
    drop(tape);

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, ps)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let probes: Vec<usize> = match per_param {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap + (n / cap) / 2).collect(),
            _ => (0..n).collect(),
        };
        for j in probes {
            let original = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = original + step;
            let plus = eval(params)?;
            params.get_mut(id).data_mut()[j] = original - step;
            let minus = eval(params)?;
            params.get_mut(id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{GruCell, Mlp, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_layer_network_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let mlp = Mlp::new(&mut ps, "m", 3, 5, 2, 2, &mut rng).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let report = check_gradients(
                &mut ps,
                |tape, ps| {
                    let xv = tape.constant(Tensor::matrix(2, 3, x.clone()))?;
                    let y = mlp.forward(tape, ps, xv)?;
                    tape.sum_squares(y)
                },
                1e-5,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-6, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn gru_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut ps = ParamSet::new();
            let cell = GruCell::new(&mut ps, "g", 2, 4, &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let report = check_gradients(
                &mut ps,
                |tape, ps| {
                    let mut h = cell.zero_state(tape, 3)?;
                    for x in &xs {
                        let xv = tape.constant(Tensor::matrix(3, 2, x.clone()))?;
                        let gx = cell.project_input(tape, ps, xv)?;
                        h = cell.step(tape, ps, gx, h)?;
                    }
                    tape.sum_squares(h)
                },
                1e-5,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }
}
