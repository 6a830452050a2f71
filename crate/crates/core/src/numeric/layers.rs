use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::numeric::{ParamId, ParamSet, Tape, Tensor, Var};

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim))?;
        let bias = Some(params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?);
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn without_bias(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim))?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let xw = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_row(xw, b)
            }
            None => Ok(xw),
        }
    }
}

/// Stack of tanh hidden layers followed by a linear read-out.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<Linear>,
    output: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        width: usize,
        hidden_layers: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut d = in_dim;
        for i in 0..hidden_layers {
            hidden.push(Linear::new(
                params,
                &format!("{name}.hidden{i}"),
                d,
                width,
                rng,
            )?);
            d = width;
        }
        let output = Linear::new(params, &format!("{name}.out"), d, out_dim, rng)?;
        Ok(Self { hidden, output })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            let z = layer.forward(tape, params, h)?;
            h = tape.tanh(z)?;
        }
        self.output.forward(tape, params, h)
    }
}

/// Gated recurrent unit.
///
/// The input projection is split out so callers can add a per-sequence
/// conditioning term once instead of concatenating it at every step.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = Linear::new(params, &format!("{name}.input"), in_dim, 3 * hidden, rng)?;
        let recurrent = Linear::without_bias(
            params,
            &format!("{name}.recurrent"),
            hidden,
            3 * hidden,
            rng,
        )?;
        Ok(Self {
            input,
            recurrent,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Gate pre-activations contributed by the step input, `[rows, 3 * hidden]`.
    pub fn project_input(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        self.input.forward(tape, params, x)
    }

    /// One step given pre-projected input gates.
    pub fn step(&self, tape: &mut Tape, params: &ParamSet, gates_x: Var, h: Var) -> Result<Var> {
        let hdim = self.hidden;
        let gates_h = self.recurrent.forward(tape, params, h)?;
        let xr = tape.slice_cols(gates_x, 0, hdim)?;
        let xz = tape.slice_cols(gates_x, hdim, hdim)?;
        let xn = tape.slice_cols(gates_x, 2 * hdim, hdim)?;
        let hr = tape.slice_cols(gates_h, 0, hdim)?;
        let hz = tape.slice_cols(gates_h, hdim, hdim)?;
        let hn = tape.slice_cols(gates_h, 2 * hdim, hdim)?;
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre)?;
        let z_pre = tape.add(xz, hz)?;
        let z = tape.sigmoid(z_pre)?;
        let rh = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, rh)?;
        let n = tape.tanh(n_pre)?;
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> Result<Var> {
        tape.constant(Tensor::zeros(&[rows, self.hidden]))
    }
}

/// Sinusoidal features of an integer step index, width `dim` (even).
pub fn step_embedding(step: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let angle = step as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// Embeddings for a batch of step indices, `[steps.len(), dim]`.
pub fn step_embeddings(steps: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        data.extend(step_embedding(s, dim));
    }
    Tensor::matrix(steps.len(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_layer_perceptron_matches_hand_evaluation() {
        // W1 = [[0.1, -0.2], [0.3, 0.4]], b1 = [0.05, -0.05]
        // W2 = [[0.5], [-0.6]], b2 = [0.1]; x = [1, 2]
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut ps, "m", 2, 2, 1, 1, &mut rng).unwrap();
        *ps.get_mut(ps.id_of("m.hidden0.weight").unwrap()) =
            Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]);
        *ps.get_mut(ps.id_of("m.hidden0.bias").unwrap()) = Tensor::vector(vec![0.05, -0.05]);
        *ps.get_mut(ps.id_of("m.out.weight").unwrap()) = Tensor::matrix(2, 1, vec![0.5, -0.6]);
        *ps.get_mut(ps.id_of("m.out.bias").unwrap()) = Tensor::vector(vec![0.1]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap();
        let y = mlp.forward(&mut tape, &ps, x).unwrap();

        // hidden pre-activations: [0.1 + 0.6 + 0.05, -0.2 + 0.8 - 0.05] = [0.75, 0.55]
        let h0 = 0.75f64.tanh();
        let h1 = 0.55f64.tanh();
        let expected = 0.5 * h0 - 0.6 * h1 + 0.1;
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn step_embedding_is_injective_over_range() {
        let embs: Vec<Vec<f64>> = (0..=200).map(|k| step_embedding(k, 16)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j], "{i} vs {j}");
            }
        }
    }
}
