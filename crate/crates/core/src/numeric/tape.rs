//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. Every op checks its output for
//! non-finite values and reports the op by name.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::numeric::tensor::gemm;
use crate::numeric::{Gradients, ParamId, ParamSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SegmentSum(Var, Arc<[usize]>),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: params.shared(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), "matmul")
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let r = self.value(row);
        if r.len() != n {
            return Err(shape_err(
                "add_row",
                format!("[{m},{n}] + row of {}", r.len()),
            ));
        }
        let rv = r.data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            for (o, b) in chunk.iter_mut().zip(rv) {
                *o += b;
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::AddRow(a, row), "add_row")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, n) = dims(ta);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::matrix(m, n, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| scale * x + shift)
            .collect();
        self.push(Tensor::matrix(m, n, data), Op::Affine(a, scale), "affine")
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        self.push(Tensor::matrix(m, n, data), Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Tensor::matrix(m, n, data), Op::Sigmoid(a), "sigmoid")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs"));
        };
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims(self.value(p));
            if r != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(
            Tensor::matrix(m, total, out),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        if start + width > n {
            return Err(shape_err("slice_cols", format!("{start}+{width} > {n}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + width]);
        }
        self.push(
            Tensor::matrix(m, width, out),
            Op::SliceCols(a, start),
            "slice_cols",
        )
    }

    /// Sums rows of `a` into `groups` output rows; row `i` goes to `segments[i]`.
    ///
    /// Rows are accumulated in input order, so callers that need a result
    /// independent of row order must sort rows first.
    pub fn segment_sum(&mut self, a: Var, segments: Arc<[usize]>, groups: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        if segments.len() != m {
            return Err(shape_err(
                "segment_sum",
                format!("{} segment ids for {m} rows", segments.len()),
            ));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; groups * n];
        for (r, &g) in segments.iter().enumerate() {
            if g >= groups {
                return Err(shape_err("segment_sum", format!("segment {g} >= {groups}")));
            }
            for c in 0..n {
                out[g * n + c] += src[r * n + c];
            }
        }
        self.push(
            Tensor::matrix(groups, n, out),
            Op::SegmentSum(a, segments),
            "segment_sum",
        )
    }

    /// Sum of squared elements, as a `[1,1]` scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(a), "sum_squares")
    }

    /// Gradient of the scalar `loss` with respect to every parameter in `params`.
    /// Parameters the loss does not reach get zero gradient.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Gradients> {
        let n_loss = self.value(loss).len();
        if n_loss != 1 {
            return Err(Error::NotScalar { elements: n_loss });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(params);

        // Nodes only reference earlier nodes, so a reverse sweep is a valid
        // topological order and no cycle can exist.
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (m, n) = dims(&node.value);
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if id.0 >= out.tensors.len() {
                        return Err(shape_err("backward", "parameter not in this ParamSet"));
                    }
                    let dst = out.tensors[id.0].data_mut();
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = ta.cols();
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, tb.data(), true, &mut ga, false);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, &g, false, &mut gb, false);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n.max(1)) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(tb).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect());
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(v, y)| v * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(v, y)| v * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let wa = self.value(*a).cols();
                    let mut ga = vec![0.0; m * wa];
                    for r in 0..m {
                        ga[r * wa + start..r * wa + start + n]
                            .copy_from_slice(&g[r * n..(r + 1) * n]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSum(a, segments) => {
                    let mut ga = Vec::with_capacity(segments.len() * n);
                    for &s in segments.iter() {
                        ga.extend_from_slice(&g[s * n..(s + 1) * n]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, x.iter().map(|v| 2.0 * v * g[0]).collect());
                }
            }
        }
        for t in &out.tensors {
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_p() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", Tensor::vector(vec![3.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&ps, p);
        let loss = tape.sum_squares(v).unwrap();
        assert_eq!(tape.value(loss).data(), &[9.0]);
        let g = tape.backward(loss, &ps).unwrap();
        assert_eq!(g.get(p).data(), &[6.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", Tensor::vector(vec![3.0])).unwrap();
        let q = ps.add("q", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![4.0])).unwrap();
        let _unused = tape.param(&ps, p);
        let vq = tape.param(&ps, q);
        let loss = tape.sum_squares(c).unwrap();
        let g = tape.backward(loss, &ps).unwrap();
        assert_eq!(g.get(p).data(), &[0.0]);
        assert_eq!(g.get(q).data(), &[0.0, 0.0]);
        let _ = vq;
    }

    #[test]
    fn identity_affine_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap();
        let w = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let xw = tape.matmul(x, w).unwrap();
        let y = tape.add_row(xw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let ps = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(x, &ps),
            Err(Error::NotScalar { elements: 2 })
        ));
    }

    #[test]
    fn shape_mismatch_and_non_finite_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6])).unwrap();
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6])).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Shape { op: "matmul", .. })
        ));
        let big = tape.constant(Tensor::scalar(1e200)).unwrap();
        let sq = tape.mul(big, big);
        assert!(matches!(sq, Err(Error::NonFinite { op: "mul" })));
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn segment_sum_and_slice_round_trip_gradients() {
        let mut ps = ParamSet::new();
        let p = ps
            .add(
                "p",
                Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            )
            .unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&ps, p);
        let pooled = tape.segment_sum(v, Arc::from(vec![1, 0, 1]), 2).unwrap();
        assert_eq!(tape.value(pooled).data(), &[3.0, 4.0, 6.0, 8.0]);
        let right = tape.slice_cols(pooled, 1, 1).unwrap();
        let loss = tape.sum_squares(right).unwrap();
        let g = tape.backward(loss, &ps).unwrap();
        // d/dp of (p01)^2 + (p11 + p21... ) : col 1 only; row 0 -> group 1 (value 8)
        assert_eq!(g.get(p).data(), &[0.0, 16.0, 0.0, 8.0, 0.0, 16.0]);
    }
}
