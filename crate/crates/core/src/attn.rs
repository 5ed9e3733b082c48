//! Attention primitives shared by every mechanism: energies, the stable
//! sigmoid, masked softmax, scaled dot-product and multi-head attention.
//!
//! All functions are pure. The query for output step `i` is the decoder
//! state at the position that produces output `i`.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Scaled query-key energy `q·k / sqrt(d_k)`.
pub fn energy(q: &[f64], k: &[f64], d_k: usize) -> Result<f64> {
    if q.len() != k.len() || q.len() != d_k || d_k == 0 {
        return Err(Error::contract(
            "energy",
            format!("q has {} entries, k has {}, d_k = {d_k}", q.len(), k.len()),
        ));
    }
    Ok(energy_unchecked(q, k))
}

#[inline]
pub(crate) fn energy_unchecked(q: &[f64], k: &[f64]) -> f64 {
    dot(q, k) / (q.len() as f64).sqrt()
}

/// Halting (attending) probability: a sigmoid evaluated on the branch that
/// only ever exponentiates a non-positive argument.
#[inline]
pub fn halting_prob(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let z = e.exp();
        z / (1.0 + z)
    }
}

/// Energy matrix `E[i][j] = energy(q_i, k_j)`, evaluated entry by entry so
/// step-wise scans reproduce it exactly.
pub fn energies(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::dim("energies", format!("query width {} vs key width {}", q.cols(), k.cols())));
    }
    Ok(energies_unchecked(q, k))
}

pub(crate) fn energies_unchecked(q: &Matrix, k: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(q.rows() * k.rows());
    for qi in q.iter_rows() {
        for kj in k.iter_rows() {
            data.push(energy_unchecked(qi, kj));
        }
    }
    Matrix::from_raw(q.rows(), k.rows(), data)
}

/// Softmax of one row restricted to `permitted` positions; forbidden
/// positions get exactly zero weight. Returns `false` if nothing is permitted.
pub(crate) fn softmax_row(e: &[f64], permitted: impl Fn(usize) -> bool, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in e.iter().enumerate() {
        if permitted(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in e.iter().zip(out.iter_mut()).enumerate() {
        if permitted(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// Row-wise softmax; `mask` entries of zero forbid a position.
pub fn softmax_rows(e: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != e.shape() {
            return Err(Error::dim("softmax_rows", format!("mask {:?} vs energies {:?}", m.shape(), e.shape())));
        }
    }
    let mut out = Matrix::zeros(e.rows(), e.cols());
    for r in 0..e.rows() {
        let ok = match mask {
            Some(m) => {
                let mrow = m.row(r);
                softmax_row(e.row(r), |j| mrow[j] != 0.0, out.row_mut(r))
            }
            None => softmax_row(e.row(r), |_| true, out.row_mut(r)),
        };
        if !ok {
            return Err(Error::FullyMasked { row: r });
        }
    }
    Ok(out)
}

/// `softmax(QKᵀ/sqrt(d_k)) V` with optional `{0,1}` mask; returns the
/// output and the weight matrix.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(Error::dim("scaled_dot_attention", format!("{} keys vs {} values", k.rows(), v.rows())));
    }
    let e = energies(q, k)?;
    let w = softmax_rows(&e, mask)?;
    let out = w.matmul(v);
    if !out.is_finite() {
        return Err(Error::NonFinite("scaled_dot_attention"));
    }
    Ok((out, w))
}

/// Per-head projection parameters. `wq[h]`, `wk[h]`, `wv[h]` are
/// `d_m x d_k`; `wo` is `d_m x d_m`.
#[derive(Clone, Debug)]
pub struct HeadProjection {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
}

impl HeadProjection {
    pub fn new(wq: Vec<Matrix>, wk: Vec<Matrix>, wv: Vec<Matrix>, wo: Matrix) -> Result<Self> {
        let heads = wq.len();
        if heads == 0 || wk.len() != heads || wv.len() != heads {
            return Err(Error::contract("HeadProjection", "every projection needs one matrix per head"));
        }
        let d_m = wo.rows();
        let d_k = wq[0].cols();
        if wo.cols() != d_m || d_m != heads * d_k {
            return Err(Error::contract("HeadProjection", format!("d_m = {d_m} is not {heads} x {d_k}")));
        }
        for w in wq.iter().chain(&wk).chain(&wv) {
            if w.shape() != (d_m, d_k) {
                return Err(Error::dim("HeadProjection", format!("head matrix {:?}, expected {d_m}x{d_k}", w.shape())));
            }
        }
        if ![&wo].into_iter().chain(&wq).chain(&wk).chain(&wv).all(Matrix::is_finite) {
            return Err(Error::NonFinite("HeadProjection"));
        }
        Ok(Self { wq, wk, wv, wo })
    }

    /// Splits full `d_m x d_m` projections column-wise into `heads` blocks.
    pub fn from_full(wq: &Matrix, wk: &Matrix, wv: &Matrix, wo: Matrix, heads: usize) -> Result<Self> {
        if heads == 0 || wq.cols() % heads != 0 {
            return Err(Error::contract("HeadProjection::from_full", "width not divisible by head count"));
        }
        let d_k = wq.cols() / heads;
        let split = |w: &Matrix| (0..heads).map(|h| w.slice_cols(h * d_k, d_k)).collect::<Vec<_>>();
        Self::new(split(wq), split(wk), split(wv), wo)
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_model(&self) -> usize {
        self.wo.rows()
    }

    pub fn d_k(&self) -> usize {
        self.wq[0].cols()
    }
}

/// `Concat(head_1..head_H) W^O` with `head_h = Attention(Q Wq_h, K Wk_h, V Wv_h)`.
pub fn multi_head(q: &Matrix, k: &Matrix, v: &Matrix, proj: &HeadProjection, mask: Option<&Matrix>) -> Result<Matrix> {
    let d_m = proj.d_model();
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.cols() != d_m {
            return Err(Error::dim("multi_head", format!("{name} width {} vs d_m {d_m}", m.cols())));
        }
    }
    let heads = (0..proj.heads())
        .map(|h| {
            let (out, _) = scaled_dot_attention(&q.matmul(&proj.wq[h]), &k.matmul(&proj.wk[h]), &v.matmul(&proj.wv[h]), mask)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = heads.iter().collect();
    Ok(Matrix::concat_cols(&refs).matmul(&proj.wo))
}
