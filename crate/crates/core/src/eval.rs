//! Decoding a whole evaluation set and aggregating its metrics.

use serde::Serialize;

use crate::data::Utterance;
use crate::error::Result;
use crate::mechanism::MechanismConfig;
use crate::metrics::{cost_ratio, latency_report, mean_cost_ratio, token_error_rate, CostReport, LatencyReport, TokenErrors};
use crate::model::Model;
use crate::parallel::{self, Parallelism};
use crate::streaming::{decode_utterance, DecodeMode, Decoded};

#[derive(Clone, Debug)]
pub struct UtteranceResult {
    pub decoded: Decoded,
    pub errors: TokenErrors,
    pub cost: CostReport,
    pub latency: LatencyReport,
    /// Encoder frames `T`.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SetSummary {
    pub mechanism: MechanismConfig,
    pub utterances: usize,
    pub errors: TokenErrors,
    pub token_error_rate: f64,
    /// Unweighted mean of per-utterance cost ratios.
    pub cost_ratio: f64,
    pub truncated: usize,
    /// Mean of `t_i` minus the encoder frame ending token `i`.
    pub mean_lag: Option<f64>,
    pub max_lag: Option<i64>,
    /// Largest `furthest - t_{i-1}` seen by any head at any step.
    pub max_scan_ahead: usize,
}

#[derive(Clone, Debug)]
pub struct SetReport {
    pub results: Vec<UtteranceResult>,
    pub summary: SetSummary,
}

fn evaluate_one(model: &Model, utt: &Utterance, mech: MechanismConfig, max_len: usize, mode: DecodeMode) -> Result<UtteranceResult> {
    let cfg = model.config();
    let enc = model.encode(&utt.features)?;
    let frames = enc.rows();
    let decoded = decode_utterance(model, &enc, mech, max_len, mode)?;
    let errors = token_error_rate(&decoded.tokens, &utt.tokens)?;
    let cost = cost_ratio(&decoded.step_log, frames)?;
    let latency = latency_report(&decoded.trace, Some(&utt.ends), cfg.stride, cfg.chunk.latency_frames());
    Ok(UtteranceResult { decoded, errors, cost, latency, frames })
}

/// Decodes every utterance of `data` with `mech`. Utterances may run in
/// parallel; results keep input order.
pub fn evaluate(
    model: &Model,
    data: &[Utterance],
    mech: MechanismConfig,
    max_len: usize,
    mode: DecodeMode,
    par: Parallelism,
) -> Result<SetReport> {
    mech.validate()?;
    let results: Result<Vec<UtteranceResult>> =
        parallel::map(par, data, |u| evaluate_one(model, u, mech, max_len, mode)).into_iter().collect();
    let results = results?;
    let mut errors = TokenErrors::default();
    let mut lags = Vec::new();
    let mut max_scan_ahead = 0;
    for r in &results {
        errors.merge(&r.errors);
        lags.extend_from_slice(&r.latency.lags);
        for rec in &r.decoded.trace {
            let ahead = rec.furthest.iter().flatten().map(|&f| f.saturating_sub(rec.t_entry)).max().unwrap_or(0);
            max_scan_ahead = max_scan_ahead.max(ahead);
        }
    }
    let costs: Vec<CostReport> = results.iter().map(|r| r.cost.clone()).collect();
    let summary = SetSummary {
        mechanism: mech,
        utterances: results.len(),
        errors,
        token_error_rate: errors.rate(),
        cost_ratio: mean_cost_ratio(&costs)?,
        truncated: results.iter().filter(|r| r.decoded.truncated).count(),
        mean_lag: (!lags.is_empty()).then(|| lags.iter().sum::<i64>() as f64 / lags.len() as f64),
        max_lag: lags.iter().copied().max(),
        max_scan_ahead,
    };
    Ok(SetReport { results, summary })
}
