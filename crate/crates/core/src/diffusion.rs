//! Noise schedules and the closed-form algebra of the forward and reverse
//! diffusion chains. Everything here is pure.
//!
//! Steps are 1-based: step `k` of a chain with `steps` transitions lives at
//! table index `k - 1`, and step 0 is clean data with `alpha_bar(0) = 1`.

use crate::error::{shape_err, Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas evenly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// A chain with no transitions: `alpha_bar(0) = 1` is the only entry.
    pub fn empty() -> Self {
        Self {
            beta: Vec::new(),
            alpha: Vec::new(),
            alpha_bar: Vec::new(),
            posterior_var: Vec::new(),
        }
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prev = 1.0;
        for a in &alpha {
            prev *= a;
            alpha_bar.push(prev);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev_bar = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev_bar) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            Err(Error::StepOutOfRange {
                step: k,
                max: self.steps(),
            })
        } else {
            Ok(k - 1)
        }
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.beta[self.index(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alpha[self.index(k)?])
    }

    /// Cumulative product up to step `k`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        if k == 0 {
            Ok(1.0)
        } else {
            Ok(self.alpha_bar[self.index(k)?])
        }
    }

    /// Posterior variance `beta_tilde_k`; zero at `k = 1`.
    pub fn posterior_variance(&self, k: usize) -> Result<f64> {
        Ok(self.posterior_var[self.index(k)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Sample of `q(y_k | y_0)` given a standard-normal draw:
/// `sqrt(alpha_bar_k) * clean + sqrt(1 - alpha_bar_k) * noise`.
pub fn forward_marginal(
    clean: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape("forward_marginal", clean, noise)?;
    let ab = sched.alpha_bar(k)?;
    if k == 0 {
        return Err(Error::StepOutOfRange {
            step: 0,
            max: sched.steps(),
        });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    clean.zip_map(noise, |c, e| a * c + b * e)
}

/// Row-wise [`forward_marginal`] where row `i` is noised to step `steps[i]`.
pub fn forward_marginal_rows(
    clean: &Tensor,
    steps: &[usize],
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape("forward_marginal_rows", clean, noise)?;
    if steps.len() != clean.rows() {
        return Err(shape_err(
            "forward_marginal_rows",
            format!("{} steps for {} rows", steps.len(), clean.rows()),
        ));
    }
    let mut out = clean.clone();
    for (r, &k) in steps.iter().enumerate() {
        sched.index(k)?;
        let ab = sched.alpha_bar(k)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, e) in out.row_mut(r).iter_mut().zip(noise.row(r)) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// One forward transition `q(y_k | y_{k-1})`:
/// `sqrt(1 - beta_k) * prev + sqrt(beta_k) * noise`.
pub fn forward_step(
    prev: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape("forward_step", prev, noise)?;
    let beta = sched.beta(k)?;
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    prev.zip_map(noise, |p, e| a * p + b * e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Tensor,
    pub variance: f64,
}

/// Mean and variance of `q(y_{k-1} | y_k, y_0)` in the clean/noisy form.
pub fn posterior_params(
    clean: &Tensor,
    noisy: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Posterior> {
    same_shape("posterior_params", clean, noisy)?;
    let beta = sched.beta(k)?;
    let alpha = sched.alpha(k)?;
    let ab = sched.alpha_bar(k)?;
    let ab_prev = sched.alpha_bar(k - 1)?;
    let c_clean = ab_prev.sqrt() * beta / (1.0 - ab);
    let c_noisy = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok(Posterior {
        mean: clean.zip_map(noisy, |c, y| c_clean * c + c_noisy * y)?,
        variance: sched.posterior_variance(k)?,
    })
}

/// Reverse-step mean from a noise estimate:
/// `(noisy - beta_k / sqrt(1 - alpha_bar_k) * noise) / sqrt(alpha_k)`.
///
/// With the true injected noise this is the posterior mean; with a network's
/// estimate it is the deterministic reverse update.
pub fn reverse_mean(
    noisy: &Tensor,
    predicted_noise: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape("reverse_mean", noisy, predicted_noise)?;
    let beta = sched.beta(k)?;
    let alpha = sched.alpha(k)?;
    let ab = sched.alpha_bar(k)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    noisy.zip_map(predicted_noise, |y, e| inv * (y - coef * e))
}

/// Squared error summed over coordinates and averaged over rows.
pub fn noise_prediction_loss(true_noise: &Tensor, predicted_noise: &Tensor) -> Result<f64> {
    same_shape("noise_prediction_loss", true_noise, predicted_noise)?;
    let sse: f64 = true_noise
        .data()
        .iter()
        .zip(predicted_noise.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / true_noise.rows() as f64)
}
