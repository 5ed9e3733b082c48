//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Forward values are computed with the same routines
//! the streaming decoder uses, so a teacher-forced step-wise decode
//! reproduces the recorded values exactly.

use std::sync::Arc;

use crate::attn::{energies_unchecked, softmax_rows};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::monotonic::{self, HaltingMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Probability-to-weight transforms that need no extra input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightFn {
    Hma,
    Smocha,
    Mta,
    Dacs,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, rstd: Vec<f64> },
    Softmax { x: Var },
    Energies { q: Var, k: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Weights { p: Var, kind: WeightFn },
    Mocha { alpha: Var, u: Var, window: usize },
    Loss { logits: Var, grad: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise layer normalisation. Returns the output, the normalised input
/// and the per-row reciprocal standard deviations.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (r, c) = x.shape();
    let mut out = Matrix::zeros(r, c);
    let mut xhat = Matrix::zeros(r, c);
    let mut rstds = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..c {
            let h = (row[j] - mean) * rstd;
            xhat.set(i, j, h);
            out.set(i, j, h * gain[j] + bias[j]);
        }
        rstds.push(rstd);
    }
    (out, xhat, rstds)
}

pub(crate) fn apply_weight_fn(kind: WeightFn, p: &Matrix) -> Matrix {
    let p = HaltingMatrix::new(p.clone()).expect("sigmoid output lies in [0, 1]");
    match kind {
        WeightFn::Hma => monotonic::hma_expected_matrix(&p).into_matrix(),
        WeightFn::Smocha => monotonic::smocha_weights(&p).into_matrix(),
        WeightFn::Mta => monotonic::mta_weights(&p).into_matrix(),
        WeightFn::Dacs => monotonic::dacs_train_weights(&p).into_matrix(),
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a).add_row(self.value(bias));
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::attn::halting_prob);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, xhat, rstd) = layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data());
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn softmax(&mut self, x: Var, mask: Option<&Arc<Matrix>>) -> Result<Var> {
        let v = softmax_rows(self.value(x), mask.map(|m| m.as_ref()))?;
        Ok(self.push(v, Op::Softmax { x }))
    }

    /// `E[i][j] = q_i·k_j / sqrt(d_k)`.
    pub fn energies(&mut self, q: Var, k: Var) -> Var {
        let v = energies_unchecked(self.value(q), self.value(k));
        self.push(v, Op::Energies { q, k })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&refs);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn weights(&mut self, p: Var, kind: WeightFn) -> Var {
        let v = apply_weight_fn(kind, self.value(p));
        self.push(v, Op::Weights { p, kind })
    }

    pub fn mocha(&mut self, alpha: Var, u: Var, window: usize) -> Result<Var> {
        let v = monotonic::mocha_expected_weights(self.value(alpha), self.value(u), window)?;
        Ok(self.push(v, Op::Mocha { alpha, u, window }))
    }

    /// Records a scalar loss whose gradient with respect to `logits` is known.
    pub fn loss(&mut self, logits: Var, value: f64, grad: Matrix) -> Var {
        self.push(Matrix::filled(1, 1, value), Op::Loss { logits, grad })
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_bt(self.value(*b)));
                    acc(*b, self.value(*a).matmul_at(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*a, g);
                    acc(*b, db);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(*a, g.zip_map(x, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain).data();
                    let (r, c) = g.shape();
                    let mut dx = Matrix::zeros(r, c);
                    let mut dgain = Matrix::zeros(1, c);
                    let mut dbias = Matrix::zeros(1, c);
                    for i in 0..r {
                        let grow = g.row(i);
                        let hrow = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                            dgain.data_mut()[j] += grow[j] * hrow[j];
                            dbias.data_mut()[j] += grow[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            dx.set(i, j, rstd[i] * (dh - mean_d - hrow[j] * mean_dh));
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - dotp);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Energies { q, k } => {
                    let s = 1.0 / (self.value(*q).cols() as f64).sqrt();
                    acc(*q, g.matmul(self.value(*k)).scale(s));
                    acc(*k, g.matmul_at(self.value(*q)).scale(s));
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(*p, g.slice_cols(offset, w));
                        offset += w;
                    }
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*table, dt);
                }
                Op::Weights { p, kind } => {
                    let pm = HaltingMatrix::new(self.value(*p).clone()).expect("probabilities in [0, 1]");
                    let dp = match kind {
                        WeightFn::Hma => monotonic::hma_expected_backward(&pm, &g),
                        WeightFn::Smocha => monotonic::smocha_backward(&pm, &g),
                        WeightFn::Mta => monotonic::mta_backward(&pm, &g),
                        WeightFn::Dacs => monotonic::dacs_backward(&pm, &g),
                    };
                    acc(*p, dp);
                }
                Op::Mocha { alpha, u, window } => {
                    let (da, du) = monotonic::mocha_backward(self.value(*alpha), self.value(*u), *window, &g);
                    acc(*alpha, da);
                    acc(*u, du);
                }
                Op::Loss { logits, grad } => acc(*logits, grad.scale(g.get(0, 0))),
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the root with respect to every leaf reached.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `sum(W ⊙ f(x))` against the tape gradient.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let w = random(&mut rng, tape.value(y).rows(), tape.value(y).cols());
        let weighted = |t: &Tape, y: Var| t.value(y).hadamard(&w).sum();
        let root = tape.loss(y, weighted(&tape, y), w.clone());
        let grads = tape.backward(root);
        let dx = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let h = 1e-5;
        for idx in 0..x0.data().len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[idx] += delta;
                let mut t = Tape::new();
                let xv = t.leaf(xp);
                let y = build(&mut t, xv);
                weighted(&t, y)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = dx.data()[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < tol, "coordinate {idx}: numeric {num} analytic {ana}");
        }
    }

    #[test]
    fn primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 4, 3);
        let bias = random(&mut rng, 1, 3);
        let gain = random(&mut rng, 1, 4);
        let x0 = random(&mut rng, 3, 4);
        check(
            |t, x| {
                let bv = t.leaf(b.clone());
                let y = t.matmul(x, bv);
                let bb = t.leaf(bias.clone());
                let y = t.add_row(y, bb);
                t.relu(y)
            },
            x0.clone(),
            1e-6,
        );
        check(
            |t, x| {
                let g = t.leaf(gain.clone());
                let z = t.leaf(Matrix::zeros(1, 4));
                let y = t.layer_norm(x, g, z);
                let y = t.scale(y, 0.7);
                t.sigmoid(y)
            },
            x0.clone(),
            1e-6,
        );
        let mask = Arc::new(Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap());
        check(
            |t, x| {
                let e = t.energies(x, x);
                let w = t.softmax(e, Some(&mask)).unwrap();
                let a = t.slice_cols(x, 1, 2);
                let c = t.matmul(w, a);
                t.concat_cols(&[c, x])
            },
            x0.clone(),
            1e-6,
        );
        check(
            |t, x| {
                let rows = t.gather(x, &[2, 0, 2, 1]);
                t.add(rows, rows)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn weight_function_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e0 = random(&mut rng, 4, 8).scale(2.0);
        for kind in [WeightFn::Hma, WeightFn::Smocha, WeightFn::Mta, WeightFn::Dacs] {
            check(
                |t, e| {
                    let p = t.sigmoid(e);
                    t.weights(p, kind)
                },
                e0.clone(),
                1e-4,
            );
        }
        check(
            |t, e| {
                let p = t.sigmoid(e);
                let a = t.weights(p, WeightFn::Hma);
                t.mocha(a, e, 3).unwrap()
            },
            e0,
            1e-4,
        );
    }
}
