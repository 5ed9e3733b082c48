//! Training-mode (full-sequence, differentiable) attention weights for the
//! monotonic mechanisms.
//!
//! Every weight function comes with a vector-Jacobian product so the tape in
//! [`crate::tape`] can backpropagate through it. Cumulative products are
//! evaluated in linear space with recurrences that never divide by
//! `1 - p`, so `p = 1` is handled exactly.

use crate::attn::halting_prob;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Matrix of halting probabilities, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltingMatrix(Matrix);

impl HaltingMatrix {
    pub fn new(p: Matrix) -> Result<Self> {
        if let Some(bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract("HaltingMatrix", format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self(p))
    }

    pub fn from_energies(e: &Matrix) -> Self {
        Self(e.map(halting_prob))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Non-negative attention weights `L x T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(pub Matrix);

impl AttentionWeights {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// One step of the hard-monotonic expectation recurrence.
///
/// `q_j = (1 - p_{j-1}) q_{j-1} + alpha_prev_j`, `alpha_j = p_j q_j`.
pub fn hma_expected_weights(p: &[f64], alpha_prev: &[f64]) -> Result<Vec<f64>> {
    if p.len() != alpha_prev.len() {
        return Err(Error::dim("hma_expected_weights", format!("{} probabilities vs {} previous weights", p.len(), alpha_prev.len())));
    }
    if let Some(bad) = alpha_prev.iter().find(|&&a| a < 0.0 || !a.is_finite()) {
        return Err(Error::contract("hma_expected_weights", format!("previous weight {bad} is negative")));
    }
    let mut out = vec![0.0; p.len()];
    hma_row(p, alpha_prev, &mut out);
    Ok(out)
}

fn hma_row(p: &[f64], alpha_prev: &[f64], out: &mut [f64]) {
    let mut q = 0.0;
    for j in 0..p.len() {
        q = if j == 0 { alpha_prev[0] } else { (1.0 - p[j - 1]) * q + alpha_prev[j] };
        out[j] = p[j] * q;
    }
}

/// Whole-sequence HMA expectation starting from `alpha_0 = [1, 0, ..., 0]`.
pub fn hma_expected_matrix(p: &HaltingMatrix) -> AttentionWeights {
    let p = p.as_matrix();
    let (l, t) = p.shape();
    let mut out = Matrix::zeros(l, t);
    let mut prev = vec![0.0; t];
    prev[0] = 1.0;
    for i in 0..l {
        hma_row(p.row(i), &prev, out.row_mut(i));
        prev.copy_from_slice(out.row(i));
    }
    AttentionWeights(out)
}

/// Gradient of a loss with respect to `P` given its gradient `d_w` with
/// respect to [`hma_expected_matrix`]'s output.
pub fn hma_expected_backward(p: &HaltingMatrix, d_w: &Matrix) -> Matrix {
    let w = hma_expected_matrix(p).0;
    let p = p.as_matrix();
    let (l, t) = p.shape();
    let mut d_p = Matrix::zeros(l, t);
    // gradient flowing into alpha_{i-1} from row i
    let mut d_prev = vec![0.0; t];
    let mut d_alpha = vec![0.0; t];
    let mut q = vec![0.0; t];
    for i in (0..l).rev() {
        for j in 0..t {
            d_alpha[j] = d_w.get(i, j) + d_prev[j];
        }
        let prow = p.row(i);
        let mut first = vec![0.0; t];
        first[0] = 1.0;
        let prev: &[f64] = if i == 0 { &first } else { w.row(i - 1) };
        for j in 0..t {
            q[j] = if j == 0 { prev[0] } else { (1.0 - prow[j - 1]) * q[j - 1] + prev[j] };
        }
        let mut dq_next = 0.0;
        for j in (0..t).rev() {
            let dq = d_alpha[j] * prow[j] + dq_next * (1.0 - prow[j]);
            let mut dp = d_alpha[j] * q[j];
            if j + 1 < t {
                dp -= dq_next * q[j];
            }
            d_p.set(i, j, dp);
            d_prev[j] = dq;
            dq_next = dq;
        }
    }
    d_p
}

/// Chunkwise expectation: spreads each `alpha_k` over the `w`-frame window
/// ending at `k` with softmax weights from `u`. Window indices outside the
/// sequence are dropped from both numerator and denominator, so every row
/// keeps the mass of the corresponding `alpha` row.
pub fn mocha_expected_weights(alpha: &Matrix, u: &Matrix, w: usize) -> Result<Matrix> {
    if w < 1 {
        return Err(Error::contract("mocha_expected_weights", "window must be at least 1"));
    }
    if alpha.shape() != u.shape() {
        return Err(Error::dim("mocha_expected_weights", format!("alpha {:?} vs chunk energies {:?}", alpha.shape(), u.shape())));
    }
    let (l, t) = alpha.shape();
    let mut out = Matrix::zeros(l, t);
    for i in 0..l {
        let parts = MochaRow::new(alpha.row(i), u.row(i), w);
        for j in 0..t {
            out.set(i, j, parts.e[j] * window_sum(&parts.r, j, (j + w - 1).min(t - 1)));
        }
    }
    Ok(out)
}

struct MochaRow {
    /// `exp(u_j - max u)`
    e: Vec<f64>,
    /// windowed denominators ending at `k`
    d: Vec<f64>,
    /// `alpha_k / d_k`
    r: Vec<f64>,
}

impl MochaRow {
    fn new(alpha: &[f64], u: &[f64], w: usize) -> Self {
        let t = u.len();
        let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = u.iter().map(|&v| (v - max).exp()).collect();
        let d: Vec<f64> = (0..t).map(|k| window_sum(&e, (k + 1).saturating_sub(w), k)).collect();
        let r = alpha.iter().zip(&d).map(|(a, d)| a / d).collect();
        Self { e, d, r }
    }
}

#[inline]
fn window_sum(v: &[f64], lo: usize, hi: usize) -> f64 {
    v[lo..=hi].iter().sum()
}

/// Vector-Jacobian product of [`mocha_expected_weights`]; returns `(d_alpha, d_u)`.
pub fn mocha_backward(alpha: &Matrix, u: &Matrix, w: usize, d_beta: &Matrix) -> (Matrix, Matrix) {
    let (l, t) = alpha.shape();
    let mut d_alpha = Matrix::zeros(l, t);
    let mut d_u = Matrix::zeros(l, t);
    for i in 0..l {
        let parts = MochaRow::new(alpha.row(i), u.row(i), w);
        let db = d_beta.row(i);
        let mut d_e = vec![0.0; t];
        let mut d_s = vec![0.0; t];
        for j in 0..t {
            let s = window_sum(&parts.r, j, (j + w - 1).min(t - 1));
            d_e[j] += db[j] * s;
            d_s[j] = db[j] * parts.e[j];
        }
        let arow = alpha.row(i);
        for k in 0..t {
            // r_k feeds S_j for j in [k - w + 1, k]
            let d_r = window_sum(&d_s, (k + 1).saturating_sub(w), k);
            d_alpha.set(i, k, d_r / parts.d[k]);
            let d_d = -d_r * arow[k] / (parts.d[k] * parts.d[k]);
            for dl in &mut d_e[(k + 1).saturating_sub(w)..=k] {
                *dl += d_d;
            }
        }
        for j in 0..t {
            d_u.set(i, j, d_e[j] * parts.e[j]);
        }
    }
    (d_alpha, d_u)
}

/// Stable chunkwise first-pass weights `alpha_j = p_j prod_{l<j} (1 - p_l)`,
/// independent per output step.
pub fn smocha_weights(p: &HaltingMatrix) -> AttentionWeights {
    let p = p.as_matrix();
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        truncated_product_row(p.row(i), out.row_mut(i));
    }
    AttentionWeights(out)
}

pub(crate) fn truncated_product_row(p: &[f64], out: &mut [f64]) {
    let mut survive = 1.0;
    for (o, &pj) in out.iter_mut().zip(p) {
        *o = pj * survive;
        survive *= 1.0 - pj;
    }
}

pub fn smocha_backward(p: &HaltingMatrix, d_w: &Matrix) -> Matrix {
    let p = p.as_matrix();
    let (l, t) = p.shape();
    let mut d_p = Matrix::zeros(l, t);
    let mut c = vec![0.0; t];
    for i in 0..l {
        let prow = p.row(i);
        let mut survive = 1.0;
        for j in 0..t {
            c[j] = survive;
            survive *= 1.0 - prow[j];
        }
        let mut dc_next = 0.0;
        for j in (0..t).rev() {
            let dw = d_w.get(i, j);
            d_p.set(i, j, dw * c[j] - dc_next * c[j]);
            dc_next = dw * prow[j] + dc_next * (1.0 - prow[j]);
        }
    }
    d_p
}

/// Truncated-attention weights. Same arithmetic as [`smocha_weights`]; the
/// mechanisms differ only at inference time.
pub fn mta_weights(p: &HaltingMatrix) -> AttentionWeights {
    smocha_weights(p)
}

pub fn mta_backward(p: &HaltingMatrix, d_w: &Matrix) -> Matrix {
    smocha_backward(p, d_w)
}

/// Kept-prefix mask of the accumulation rule: position `j` is kept iff the
/// running sum of `p` before `j` has not exceeded 1. The running sum is
/// accumulated in scan order, so the result matches a step-wise scan exactly.
pub fn dacs_keep_mask(p: &HaltingMatrix) -> Matrix {
    let p = p.as_matrix();
    let mut keep = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let mut acc = 0.0;
        for (j, &pj) in p.row(i).iter().enumerate() {
            keep.set(i, j, 1.0);
            acc += pj;
            if acc > 1.0 {
                break;
            }
        }
    }
    keep
}

/// Matrix-form accumulation weights: `P` masked to each row's kept prefix.
/// No look-ahead limit applies here.
pub fn dacs_train_weights(p: &HaltingMatrix) -> AttentionWeights {
    AttentionWeights(dacs_keep_mask(p).hadamard(p.as_matrix()))
}

/// The mask is piecewise constant in `P`, so the gradient is the masked upstream gradient.
pub fn dacs_backward(p: &HaltingMatrix, d_w: &Matrix) -> Matrix {
    dacs_keep_mask(p).hadamard(d_w)
}

/// `c_i = sum_j W_ij v_j`.
pub fn context_from_weights(w: &Matrix, v: &Matrix) -> Result<Matrix> {
    if w.cols() != v.rows() {
        return Err(Error::dim("context_from_weights", format!("{} weight columns vs {} value rows", w.cols(), v.rows())));
    }
    Ok(w.matmul(v))
}
