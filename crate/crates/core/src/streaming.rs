//! Step-wise online decoding.
//!
//! Every arithmetic step here uses the same primitives, in the same order,
//! as the tape forward pass, so a teacher-forced stream reproduces the
//! training path bit for bit when the scan is unbounded.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attn::{energy_unchecked, halting_prob, softmax_row};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mechanism::{Lookahead, MechanismConfig};
use crate::model::{positional_encoding, AttnParams, Linear, Model, Norm, EOS, SOS};
use crate::monotonic::truncated_product_row;
use crate::tape::layer_norm;

/// Outcome of one head's cross-attention at one output step.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadScan {
    pub context: Vec<f64>,
    /// 1-based encoder index where the head stopped.
    pub halt_pos: usize,
    /// Encoder positions inspected, counting both passes for chunkwise rules.
    pub steps: usize,
    /// Largest 1-based encoder index inspected.
    pub furthest: usize,
    /// Attention weights over all `T` frames (zero where not attended).
    pub weights: Vec<f64>,
}

fn check_kv(op: &'static str, q: &[f64], k: &Matrix, v: &Matrix, t_prev: usize) -> Result<usize> {
    let frames = k.rows();
    if frames == 0 {
        return Err(Error::Empty("encoder states"));
    }
    if v.rows() != frames {
        return Err(Error::dim(op, format!("{frames} keys vs {} values", v.rows())));
    }
    if q.len() != k.cols() {
        return Err(Error::dim(op, format!("query width {} vs key width {}", q.len(), k.cols())));
    }
    if t_prev > frames {
        return Err(Error::contract(op, format!("t_prev {t_prev} beyond {frames} frames")));
    }
    Ok(frames)
}

/// `sum_k w_k v_k` with the same skip-zero, index-ascending accumulation as
/// [`Matrix::matmul`].
fn weighted_sum(weights: &[f64], v: &Matrix, col: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (k, &a) in weights.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(&v.row(k)[col..col + width]) {
            *o += a * b;
        }
    }
    out
}

fn prob(q: &[f64], k: &Matrix, j: usize) -> f64 {
    halting_prob(energy_unchecked(q, k.row(j)))
}

/// Accumulation-and-halt scan over frames `1..=min(t_prev + M, T)`, halting
/// at the first frame where the running sum of `p` strictly exceeds 1.
pub fn dacs_head_scan(q: &[f64], k: &Matrix, v: &Matrix, t_prev: usize, m: Lookahead) -> Result<HeadScan> {
    let frames = check_kv("dacs_head_scan", q, k, v, t_prev)?;
    if m == Lookahead::Bounded(0) {
        return Err(Error::Config("maximum look-ahead must be at least 1".into()));
    }
    let bound = m.bound(t_prev, frames);
    let mut weights = vec![0.0; frames];
    let mut acc = 0.0;
    let mut halt = bound;
    for j in 0..bound {
        let p = prob(q, k, j);
        weights[j] = p;
        acc += p;
        if acc > 1.0 {
            halt = j + 1;
            break;
        }
    }
    let context = weighted_sum(&weights[..halt], v, 0, v.cols());
    Ok(HeadScan { context, halt_pos: halt, steps: halt, furthest: halt, weights })
}

/// Unified halting position: the furthest of `t_prev` and every head's halt.
pub fn sync_step(halts: impl IntoIterator<Item = usize>, t_prev: usize) -> usize {
    halts.into_iter().fold(t_prev, usize::max)
}

/// First frame after `t_prev` with `p > 0.5`, plus the 1-based index `T` on failure.
fn first_trigger(q: &[f64], k: &Matrix, t_prev: usize) -> Option<usize> {
    (t_prev..k.rows()).find(|&j| prob(q, k, j) > 0.5).map(|j| j + 1)
}

fn no_trigger(frames: usize, width: usize, t_prev: usize) -> HeadScan {
    HeadScan {
        context: vec![0.0; width],
        halt_pos: frames,
        steps: frames - t_prev,
        furthest: frames,
        weights: vec![0.0; frames],
    }
}

/// Hard monotonic attention: `c = v_j` at the first trigger after `t_prev`.
pub fn hma_step(q: &[f64], k: &Matrix, v: &Matrix, t_prev: usize) -> Result<HeadScan> {
    let frames = check_kv("hma_step", q, k, v, t_prev)?;
    let Some(j) = first_trigger(q, k, t_prev) else {
        return Ok(no_trigger(frames, v.cols(), t_prev));
    };
    let mut weights = vec![0.0; frames];
    weights[j - 1] = 1.0;
    Ok(HeadScan { context: v.row(j - 1).to_vec(), halt_pos: j, steps: j - t_prev, furthest: j, weights })
}

/// Hard trigger followed by a softmax over the `w` frames ending at it.
pub fn mocha_step(q: &[f64], k: &Matrix, v: &Matrix, t_prev: usize, w: usize) -> Result<HeadScan> {
    let frames = check_kv("mocha_step", q, k, v, t_prev)?;
    if w == 0 {
        return Err(Error::Config("chunk window must be at least 1".into()));
    }
    let Some(j) = first_trigger(q, k, t_prev) else {
        return Ok(no_trigger(frames, v.cols(), t_prev));
    };
    let lo = j.saturating_sub(w);
    let u: Vec<f64> = (lo..j).map(|r| energy_unchecked(q, k.row(r))).collect();
    let mut weights = vec![0.0; frames];
    softmax_row(&u, |_| true, &mut weights[lo..j]);
    let context = weighted_sum(&weights[..j], v, 0, v.cols());
    let steps = ((j - t_prev) + (j - lo)).min(frames);
    Ok(HeadScan { context, halt_pos: j, steps, furthest: j, weights })
}

/// Truncated attention over the whole prefix up to the first trigger after
/// `t_prev` (or all frames if nothing triggers).
pub fn mta_step(q: &[f64], k: &Matrix, v: &Matrix, t_prev: usize) -> Result<HeadScan> {
    let frames = check_kv("mta_step", q, k, v, t_prev)?;
    let j = first_trigger(q, k, t_prev).unwrap_or(frames);
    let p: Vec<f64> = (0..j).map(|r| prob(q, k, r)).collect();
    let mut weights = vec![0.0; frames];
    truncated_product_row(&p, &mut weights[..j]);
    let context = weighted_sum(&weights[..j], v, 0, v.cols());
    Ok(HeadScan { context, halt_pos: j, steps: j, furthest: j, weights })
}

/// Full softmax over every frame.
pub fn offline_step(q: &[f64], k: &Matrix, v: &Matrix) -> Result<HeadScan> {
    let frames = check_kv("offline_step", q, k, v, 0)?;
    let e: Vec<f64> = (0..frames).map(|r| energy_unchecked(q, k.row(r))).collect();
    let mut weights = vec![0.0; frames];
    softmax_row(&e, |_| true, &mut weights);
    let context = weighted_sum(&weights, v, 0, v.cols());
    Ok(HeadScan { context, halt_pos: frames, steps: frames, furthest: frames, weights })
}

/// Encoder positions inspected per output step, layer and head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub layers: usize,
    pub heads: usize,
    /// `entries[i][l][h]`
    pub entries: Vec<Vec<Vec<usize>>>,
}

impl StepLog {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self { layers, heads, entries: Vec::new() }
    }

    pub fn output_steps(&self) -> usize {
        self.entries.len()
    }

    /// `s^{h,l}_i` with all indices 0-based.
    pub fn get(&self, head: usize, layer: usize, step: usize) -> usize {
        self.entries[step][layer][head]
    }

    pub fn total(&self) -> usize {
        self.entries.iter().flatten().flatten().sum()
    }
}

/// Per-step halting state of the whole decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltRecord {
    pub step: usize,
    /// Synchronized position on entry, `t_{i-1}`.
    pub t_entry: usize,
    /// `[layer][head]`
    pub contexts: Vec<Vec<Vec<f64>>>,
    pub halts: Vec<Vec<usize>>,
    pub steps: Vec<Vec<usize>>,
    pub furthest: Vec<Vec<usize>>,
    /// `[layer][head]`, each of length `T`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Synchronized position after the step, `t_i`.
    pub synced: usize,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    utterance: Option<usize>,
    step: usize,
    t_entry: usize,
    halts: &'a [Vec<usize>],
    t_i: usize,
    steps: &'a [Vec<usize>],
}

/// One JSON object per output step, optionally tagged with an utterance index.
pub fn write_trace_jsonl(trace: &[HaltRecord], utterance: Option<usize>, mut out: impl Write) -> std::io::Result<()> {
    for r in trace {
        let line = TraceLine { utterance, step: r.step, t_entry: r.t_entry, halts: &r.halts, t_i: r.synced, steps: &r.steps };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Projected cross-attention keys and values of one decoder layer.
#[derive(Clone, Debug)]
struct CrossKv {
    /// per head, `T x d_k`
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

/// Mutable decoding state of one hypothesis.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub t_prev: usize,
    pub emitted: Vec<usize>,
    /// Self-attention key/value rows per layer.
    self_keys: Vec<Matrix>,
    self_values: Vec<Matrix>,
    /// Independent per-head positions of the non-synchronizing mechanisms.
    head_pos: Vec<Vec<usize>>,
    pub step_log: StepLog,
    pub trace: Vec<HaltRecord>,
}

impl StreamState {
    pub fn position(&self) -> usize {
        self.trace.len()
    }
}

/// Immutable per-utterance decoding context shared by all hypotheses.
pub struct StreamDecoder<'m> {
    model: &'m Model,
    mech: MechanismConfig,
    cross: Vec<CrossKv>,
    frames: usize,
    pe: Matrix,
}

fn linear(model: &Model, x: &Matrix, l: Linear) -> Matrix {
    x.matmul(model.p(l.w)).add_row(model.p(l.b))
}

fn norm(model: &Model, x: &Matrix, n: Norm) -> Matrix {
    layer_norm(x, model.p(n.gain).data(), model.p(n.bias).data()).0
}

impl<'m> StreamDecoder<'m> {
    pub fn new(model: &'m Model, encoder_states: &Matrix, mech: MechanismConfig, max_len: usize) -> Result<Self> {
        mech.validate()?;
        let cfg = model.config();
        if encoder_states.rows() == 0 {
            return Err(Error::Empty("encoder states"));
        }
        if encoder_states.cols() != cfg.d_model {
            return Err(Error::dim("decode", format!("encoder width {} vs d_model {}", encoder_states.cols(), cfg.d_model)));
        }
        let d_k = cfg.d_k();
        let cross = model
            .layout
            .decoder
            .iter()
            .map(|layer| {
                let k = encoder_states.matmul(model.p(layer.cross.wk));
                let v = encoder_states.matmul(model.p(layer.cross.wv));
                CrossKv {
                    keys: (0..cfg.heads).map(|h| k.slice_cols(h * d_k, d_k)).collect(),
                    values: (0..cfg.heads).map(|h| v.slice_cols(h * d_k, d_k)).collect(),
                }
            })
            .collect();
        let pe = positional_encoding(max_len.max(1), cfg.d_model)?;
        Ok(Self { model, mech, cross, frames: encoder_states.rows(), pe })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn initial_state(&self) -> StreamState {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let empty = || Matrix::from_raw(0, d, Vec::new());
        StreamState {
            t_prev: 0,
            emitted: Vec::new(),
            self_keys: (0..cfg.decoder_layers).map(|_| empty()).collect(),
            self_values: (0..cfg.decoder_layers).map(|_| empty()).collect(),
            head_pos: vec![vec![0; cfg.heads]; cfg.decoder_layers],
            step_log: StepLog::new(cfg.decoder_layers, cfg.heads),
            trace: Vec::new(),
        }
    }

    fn self_attention(&self, state: &mut StreamState, layer: usize, x: &Matrix, a: AttnParams) -> Matrix {
        let cfg = self.model.config();
        let (heads, d_k) = (cfg.heads, cfg.d_k());
        let q = x.matmul(self.model.p(a.wq));
        let k = x.matmul(self.model.p(a.wk));
        let v = x.matmul(self.model.p(a.wv));
        state.self_keys[layer].push_row(k.row(0));
        state.self_values[layer].push_row(v.row(0));
        let keys = &state.self_keys[layer];
        let values = &state.self_values[layer];
        let n = keys.rows();
        let mut parts = Vec::with_capacity(heads);
        let mut e = vec![0.0; n];
        let mut w = vec![0.0; n];
        for h in 0..heads {
            let span = h * d_k..(h + 1) * d_k;
            let qh = &q.row(0)[span.clone()];
            for (j, ej) in e.iter_mut().enumerate() {
                *ej = energy_unchecked(qh, &keys.row(j)[span.clone()]);
            }
            softmax_row(&e, |_| true, &mut w);
            parts.push(Matrix::from_raw(1, d_k, weighted_sum(&w, values, h * d_k, d_k)));
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::concat_cols(&refs).matmul(self.model.p(a.wo))
    }

    fn head(&self, layer: usize, h: usize, q: &[f64], t_entry: usize, own_pos: usize) -> Result<HeadScan> {
        let kv = &self.cross[layer];
        let (k, v) = (&kv.keys[h], &kv.values[h]);
        match self.mech {
            MechanismConfig::Dacs { max_lookahead } => dacs_head_scan(q, k, v, t_entry, max_lookahead),
            MechanismConfig::Hma => hma_step(q, k, v, own_pos),
            MechanismConfig::Mocha { window } | MechanismConfig::Smocha { window } => mocha_step(q, k, v, own_pos, window),
            MechanismConfig::Mta => mta_step(q, k, v, own_pos),
            MechanismConfig::Offline => offline_step(q, k, v),
        }
    }

    /// Feeds `token` (the previous output, SOS first) and returns the next-token logits.
    pub fn step(&self, state: &mut StreamState, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let cfg = model.config();
        if token >= cfg.vocab_size {
            return Err(Error::contract("decode", format!("token {token} outside vocabulary of {}", cfg.vocab_size)));
        }
        let pos = state.position();
        if pos >= self.pe.rows() {
            return Err(Error::contract("decode", format!("step {pos} beyond the {} positions prepared", self.pe.rows())));
        }
        let (heads, d_k) = (cfg.heads, cfg.d_k());
        let layout = &model.layout;
        let table = model.p(layout.embedding);
        let emb = Matrix::from_raw(1, cfg.d_model, table.row(token).to_vec()).scale((cfg.d_model as f64).sqrt());
        let mut x = emb.add(&self.pe.slice_rows(pos, 1));

        let t_entry = state.t_prev;
        let layers = layout.decoder.len();
        let mut record = HaltRecord {
            step: pos,
            t_entry,
            contexts: Vec::with_capacity(layers),
            halts: Vec::with_capacity(layers),
            steps: Vec::with_capacity(layers),
            furthest: Vec::with_capacity(layers),
            weights: Vec::with_capacity(layers),
            synced: t_entry,
        };
        for (l, layer) in layout.decoder.iter().enumerate() {
            let h_in = norm(model, &x, layer.norm_self);
            let a = self.self_attention(state, l, &h_in, layer.self_attn);
            x = x.add(&a);

            let h_in = norm(model, &x, layer.norm_cross);
            let q = h_in.matmul(model.p(layer.cross.wq));
            let mut scans = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = &q.row(0)[h * d_k..(h + 1) * d_k];
                scans.push(self.head(l, h, qh, t_entry, state.head_pos[l][h])?);
            }
            let parts: Vec<Matrix> = scans.iter().map(|s| Matrix::from_raw(1, d_k, s.context.clone())).collect();
            let refs: Vec<&Matrix> = parts.iter().collect();
            let c = Matrix::concat_cols(&refs).matmul(model.p(layer.cross.wo));
            x = x.add(&c);

            let h_in = norm(model, &x, layer.norm_ff);
            let f = linear(model, &linear(model, &h_in, layer.ff.inner).map(|v| v.max(0.0)), layer.ff.outer);
            x = x.add(&f);

            if !matches!(self.mech, MechanismConfig::Dacs { .. }) {
                for (h, s) in scans.iter().enumerate() {
                    state.head_pos[l][h] = s.halt_pos;
                }
            }
            record.halts.push(scans.iter().map(|s| s.halt_pos).collect());
            record.steps.push(scans.iter().map(|s| s.steps).collect());
            record.furthest.push(scans.iter().map(|s| s.furthest).collect());
            record.contexts.push(scans.iter().map(|s| s.context.clone()).collect());
            record.weights.push(scans.into_iter().map(|s| s.weights).collect());
        }
        let x = norm(model, &x, layout.decoder_norm);
        let logits = linear(model, &x, layout.output).into_data();

        record.synced = sync_step(record.halts.iter().flatten().copied(), t_entry);
        state.t_prev = record.synced;
        state.step_log.entries.push(record.steps.clone());
        state.trace.push(record);
        state.emitted.push(token);
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Transcript without SOS/EOS.
    pub tokens: Vec<usize>,
    pub step_log: StepLog,
    pub trace: Vec<HaltRecord>,
    /// `max_len` steps ran without emitting EOS.
    pub truncated: bool,
    pub log_prob: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn finish(state: StreamState, log_prob: f64, truncated: bool) -> Decoded {
    Decoded { tokens: state.emitted[1..].to_vec(), step_log: state.step_log, trace: state.trace, truncated, log_prob }
}

/// Decodes one utterance from its encoder states, emitting until EOS or `max_len` output steps.
pub fn decode_utterance(
    model: &Model,
    encoder_states: &Matrix,
    mech: MechanismConfig,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Decoded> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let dec = StreamDecoder::new(model, encoder_states, mech, max_len)?;
    match mode {
        DecodeMode::Greedy => greedy(&dec, max_len),
        DecodeMode::Beam(0) => Err(Error::Config("beam width must be at least 1".into())),
        DecodeMode::Beam(width) => beam(&dec, max_len, width),
    }
}

fn greedy(dec: &StreamDecoder<'_>, max_len: usize) -> Result<Decoded> {
    let mut state = dec.initial_state();
    let mut token = SOS;
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = log_softmax(&dec.step(&mut state, token)?);
        token = argmax(&lp);
        score += lp[token];
        if token == EOS {
            return Ok(finish(state, score, false));
        }
    }
    state.emitted.push(token);
    Ok(finish(state, score, true))
}

struct Hyp {
    state: StreamState,
    next: usize,
    score: f64,
}

fn beam(dec: &StreamDecoder<'_>, max_len: usize, width: usize) -> Result<Decoded> {
    let mut active = vec![Hyp { state: dec.initial_state(), next: SOS, score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        let mut stepped = Vec::with_capacity(active.len());
        for (hi, mut hyp) in active.into_iter().enumerate() {
            let lp = log_softmax(&dec.step(&mut hyp.state, hyp.next)?);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
            for &tok in order.iter().take(width) {
                candidates.push((hi, tok, hyp.score + lp[tok]));
            }
            stepped.push(hyp);
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        candidates.truncate(width);
        active = Vec::with_capacity(width);
        for (hi, tok, score) in candidates {
            let hyp = Hyp { state: stepped[hi].state.clone(), next: tok, score };
            if tok == EOS {
                finished.push(hyp);
            } else {
                active.push(hyp);
            }
        }
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_active = active.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if active.is_empty() || best_finished >= best_active {
            break;
        }
    }
    let pick = |pool: Vec<Hyp>| {
        let mut best: Option<Hyp> = None;
        for h in pool {
            if best.as_ref().is_none_or(|b| h.score > b.score) {
                best = Some(h);
            }
        }
        best
    };
    if let Some(h) = pick(finished) {
        return Ok(finish(h.state, h.score, false));
    }
    let mut h = pick(active).expect("beam keeps at least one hypothesis");
    h.state.emitted.push(h.next);
    Ok(finish(h.state, h.score, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChunkLayout, Forward, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Keys whose energy against a unit query equals `logit(p_j)`.
    fn keys_for(p: &[f64]) -> (Vec<f64>, Matrix) {
        let logits: Vec<f64> = p.iter().map(|&x| (x / (1.0 - x)).ln()).collect();
        (vec![1.0], Matrix::new(p.len(), 1, logits).unwrap())
    }

    fn values(t: usize, d: usize) -> Matrix {
        Matrix::new(t, d, (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn dacs_scan_examples() {
        let (q, k) = keys_for(&[0.6; 10]);
        let v = values(10, 3);
        let s = dacs_head_scan(&q, &k, &v, 0, Lookahead::Bounded(10)).unwrap();
        assert_eq!((s.halt_pos, s.steps), (2, 2));
        for c in 0..3 {
            assert!((s.context[c] - 0.6 * (v.get(0, c) + v.get(1, c))).abs() < 1e-12);
        }

        let (q, k) = keys_for(&[0.05; 10]);
        let s = dacs_head_scan(&q, &k, &v, 0, Lookahead::Bounded(5)).unwrap();
        assert_eq!((s.halt_pos, s.steps), (5, 5));
        for c in 0..3 {
            let sum: f64 = (0..5).map(|r| v.get(r, c)).sum();
            assert!((s.context[c] - 0.05 * sum).abs() < 1e-12);
        }
        assert!(s.weights[5..].iter().all(|&w| w == 0.0));

        let (q, k) = keys_for(&[0.9, 0.2, 0.3]);
        assert_eq!(dacs_head_scan(&q, &k, &values(3, 1), 0, Lookahead::Unbounded).unwrap().halt_pos, 2);

        let empty = Matrix::from_raw(0, 1, vec![]);
        assert!(dacs_head_scan(&[1.0], &empty, &empty, 0, Lookahead::Unbounded).is_err());
    }

    #[test]
    fn sync_examples() {
        assert_eq!(sync_step([3, 7, 5], 2), 7);
        assert_eq!(sync_step([2, 2], 2), 2);
        assert_eq!(sync_step([4], 9), 9);
    }

    #[test]
    fn hma_examples() {
        let (q, k) = keys_for(&[0.4, 0.6, 0.7]);
        let v = values(3, 2);
        let s = hma_step(&q, &k, &v, 0).unwrap();
        assert_eq!(s.halt_pos, 2);
        assert_eq!(s.context, v.row(1));

        let (q, k) = keys_for(&[0.4, 0.3]);
        let s = hma_step(&q, &k, &values(2, 2), 0).unwrap();
        assert_eq!((s.halt_pos, s.context.clone()), (2, vec![0.0, 0.0]));

        let (q, k) = keys_for(&[0.9, 0.9]);
        let s = hma_step(&q, &k, &values(2, 2), 2).unwrap();
        assert_eq!((s.halt_pos, s.steps, s.context.clone()), (2, 0, vec![0.0, 0.0]));
    }

    #[test]
    fn mocha_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = values(7, 2);
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = Matrix::new(7, 3, (0..21).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let t_prev = rng.random_range(0..4);
            let hma = hma_step(&q, &k, &v, t_prev).unwrap();
            assert_eq!(mocha_step(&q, &k, &v, t_prev, 1).unwrap().context, hma.context);

            let w = rng.random_range(1..5);
            let s = mocha_step(&q, &k, &v, t_prev, w).unwrap();
            let Some(j) = (t_prev..7).find(|&r| prob(&q, &k, r) > 0.5) else { continue };
            let lo = (j + 1).saturating_sub(w);
            let e: Vec<f64> = (lo..=j).map(|r| (dot3(&q, k.row(r)) / 3f64.sqrt()).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                let expect: f64 = (lo..=j).map(|r| e[r - lo] / z * v.get(r, c)).sum();
                assert!((s.context[c] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mocha_uniform_window_is_mean() {
        // zero energy gives p = 0.5, which does not trigger
        let k = Matrix::new(6, 1, vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let v = values(6, 2);
        let s = mocha_step(&[1.0], &k, &v, 2, 3).unwrap();
        assert_eq!(s.halt_pos, 3);
        let s = mocha_step(&[1.0], &k, &v, 4, 3).unwrap();
        assert_eq!((s.halt_pos, s.steps), (5, 1 + 3));
        for c in 0..2 {
            let mean = (v.get(2, c) + v.get(3, c) + v.get(4, c)) / 3.0;
            assert!((s.context[c] - mean).abs() < 1e-12);
        }
    }

    fn dot3(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn mta_examples() {
        let v = values(4, 2);
        let (q, k) = keys_for(&[0.6, 0.2, 0.7, 0.1]);
        let s = mta_step(&q, &k, &v, 0).unwrap();
        assert_eq!(s.halt_pos, 1);
        assert!((s.context[0] - 0.6 * v.get(0, 0)).abs() < 1e-12);

        let eps = 1e-3;
        let (q, k) = keys_for(&[0.5 - eps, 0.6, 0.1, 0.1]);
        let s = mta_step(&q, &k, &v, 0).unwrap();
        assert_eq!(s.halt_pos, 2);
        assert!((s.weights[0] - (0.5 - eps)).abs() < 1e-12);
        assert!((s.weights[1] - 0.6 * (0.5 + eps)).abs() < 1e-12);

        let (q, k) = keys_for(&[0.2, 0.3, 0.4, 0.1]);
        let s = mta_step(&q, &k, &v, 0).unwrap();
        assert_eq!(s.halt_pos, 4);
        let expect = [0.2, 0.3 * 0.8, 0.4 * 0.8 * 0.7, 0.1 * 0.8 * 0.7 * 0.6];
        for (w, e) in s.weights.iter().zip(expect) {
            assert!((w - e).abs() < 1e-12);
        }
    }

    fn tiny_model(mech: MechanismConfig) -> Model {
        let mut cfg = ModelConfig::desk(6, 4);
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.stride = 1;
        cfg.chunk = ChunkLayout { central: 4, left: 4, right: 4 };
        cfg.mechanism = mech;
        Model::new(cfg, 11).unwrap()
    }

    fn enc(model: &Model, frames: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(frames as u64);
        let f = Matrix::new(frames, 4, (0..frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        model.encode(&f).unwrap()
    }

    #[test]
    fn teacher_forced_stream_matches_training_forward() {
        for mech in [MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded }, MechanismConfig::Offline] {
            let model = tiny_model(mech);
            let e = enc(&model, 12);
            let inputs = [SOS, 3, 2, 5, 4];
            let mut f = Forward::new(&model);
            let ev = f.tape.leaf(e.clone());
            let out = f.decoder(ev, &inputs).unwrap();
            let dec = StreamDecoder::new(&model, &e, mech, inputs.len()).unwrap();
            let mut state = dec.initial_state();
            for (i, &tok) in inputs.iter().enumerate() {
                let logits = dec.step(&mut state, tok).unwrap();
                assert_eq!(logits.as_slice(), f.tape.value(out.logits).row(i));
                let rec = &state.trace[i];
                for (l, heads) in out.cross.iter().enumerate() {
                    for (h, ch) in heads.iter().enumerate() {
                        assert_eq!(rec.contexts[l][h].as_slice(), f.tape.value(ch.context).row(i));
                    }
                }
            }
        }
    }

    #[test]
    fn bounded_lookahead_respects_bound() {
        let model = tiny_model(MechanismConfig::Dacs { max_lookahead: Lookahead::Bounded(2) });
        let e = enc(&model, 20);
        let d = decode_utterance(&model, &e, model.config().mechanism, 10, DecodeMode::Greedy).unwrap();
        let mut prev = 0;
        for r in &d.trace {
            assert!(r.synced >= prev);
            assert!(r.furthest.iter().flatten().all(|&f| f <= r.t_entry + 2));
            prev = r.synced;
        }
    }

    #[test]
    fn eos_only_model_stops_after_one_step() {
        let mut model = tiny_model(MechanismConfig::Mta);
        let b = model.params().index_of("output.b").unwrap();
        let mut bias = Matrix::zeros(1, 6);
        bias.set(0, EOS, 1e6);
        model.params_mut().values_mut()[b] = bias;
        let e = enc(&model, 6);
        for mode in [DecodeMode::Greedy, DecodeMode::Beam(3)] {
            let d = decode_utterance(&model, &e, MechanismConfig::Mta, 5, mode).unwrap();
            assert!(d.tokens.is_empty());
            assert_eq!(d.step_log.output_steps(), 1);
            assert!(!d.truncated);
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_truncation_flag() {
        for seed in 0..4 {
            let mut cfg = tiny_model(MechanismConfig::Hma).config().clone();
            cfg.mechanism = MechanismConfig::Smocha { window: 2 };
            let model = Model::new(cfg, seed).unwrap();
            let e = enc(&model, 9);
            let g = decode_utterance(&model, &e, model.config().mechanism, 6, DecodeMode::Greedy).unwrap();
            let b = decode_utterance(&model, &e, model.config().mechanism, 6, DecodeMode::Beam(1)).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.truncated, b.truncated);
            assert_eq!(g.step_log, b.step_log);
            if g.truncated {
                assert_eq!(g.tokens.len(), 6);
            }
            let wide = decode_utterance(&model, &e, model.config().mechanism, 6, DecodeMode::Beam(4)).unwrap();
            assert!(wide.tokens.len() <= 6);
        }
        let model = tiny_model(MechanismConfig::Hma);
        assert!(decode_utterance(&model, &Matrix::from_raw(0, 8, vec![]), MechanismConfig::Hma, 3, DecodeMode::Greedy).is_err());
    }

    #[test]
    fn trace_export_is_one_object_per_step() {
        let model = tiny_model(MechanismConfig::Dacs { max_lookahead: Lookahead::Bounded(4) });
        let e = enc(&model, 10);
        let d = decode_utterance(&model, &e, model.config().mechanism, 4, DecodeMode::Greedy).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&d.trace, None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), d.trace.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
        assert!(first["halts"].is_array());
    }
}
