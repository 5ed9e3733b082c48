//! Cost ratio, latency, token error rate and attention dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::streaming::{HaltRecord, StepLog};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub r: f64,
    pub total_steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub output_steps: usize,
    pub frames: usize,
    /// Mean steps per output step, `[layer][head]`.
    pub mean_steps: Vec<Vec<f64>>,
}

impl CostReport {
    pub fn per_layer_mean(&self) -> Vec<f64> {
        self.mean_steps.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect()
    }
}

/// `r = sum s / (N_d * H * L * T)` for one utterance.
pub fn cost_ratio(log: &StepLog, frames: usize) -> Result<CostReport> {
    if log.entries.is_empty() {
        return Err(Error::Empty("step log"));
    }
    if frames == 0 {
        return Err(Error::Empty("encoder frames"));
    }
    let (layers, heads) = (log.layers, log.heads);
    for (i, step) in log.entries.iter().enumerate() {
        if step.len() != layers || step.iter().any(|h| h.len() != heads) {
            return Err(Error::dim("cost_ratio", format!("step {i} does not have {layers} layers of {heads} heads")));
        }
    }
    let l = log.entries.len();
    let total = log.total();
    let mean_steps = (0..layers)
        .map(|layer| (0..heads).map(|h| (0..l).map(|i| log.get(h, layer, i) as f64).sum::<f64>() / l as f64).collect())
        .collect();
    let r = total as f64 / ((layers * heads * l) as f64 * frames as f64);
    Ok(CostReport { r, total_steps: total, layers, heads, output_steps: l, frames, mean_steps })
}

/// Unweighted mean of per-utterance ratios.
pub fn mean_cost_ratio(reports: &[CostReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Empty("cost reports"));
    }
    Ok(reports.iter().map(|c| c.r).sum::<f64>() / reports.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Synchronized position `t_i` after every output step.
    pub emission: Vec<usize>,
    /// `t_i` minus the encoder frame holding the end of token `i`.
    pub lags: Vec<i64>,
    pub max_lag: Option<i64>,
    pub mean_lag: Option<f64>,
    /// Right-context frames the encoder adds on top.
    pub encoder_lookahead: usize,
}

/// `ends` are 1-based raw-frame token ends; they are mapped to encoder
/// frames through `stride`.
pub fn latency_report(trace: &[HaltRecord], ends: Option<&[usize]>, stride: usize, encoder_lookahead: usize) -> LatencyReport {
    let emission: Vec<usize> = trace.iter().map(|r| r.synced).collect();
    let lags: Vec<i64> = match ends {
        Some(ends) => emission.iter().zip(ends).map(|(&t, &e)| t as i64 - e.div_ceil(stride.max(1)) as i64).collect(),
        None => Vec::new(),
    };
    let max_lag = lags.iter().copied().max();
    let mean_lag = (!lags.is_empty()).then(|| lags.iter().sum::<i64>() as f64 / lags.len() as f64);
    LatencyReport { emission, lags, max_lag, mean_lag, encoder_lookahead }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TokenErrors {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl TokenErrors {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / |ref|`
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn merge(&mut self, other: &TokenErrors) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Levenshtein alignment of `hyp` against `reference`.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<TokenErrors> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut e = TokenErrors { reference_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                e.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            e.deletions += 1;
            i -= 1;
        } else {
            e.insertions += 1;
            j -= 1;
        }
    }
    Ok(e)
}

/// Printed precision of dumped weights.
pub const DUMP_DECIMALS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub frames: usize,
    pub steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub decimals: usize,
    /// `[layer][head]` file names relative to the dump directory.
    pub files: Vec<Vec<String>>,
    /// `[step][layer][head]`
    pub halts: Vec<Vec<Vec<usize>>>,
    pub synced: Vec<usize>,
}

fn write_csv(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.DUMP_DECIMALS$}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one `L x T` CSV per layer/head plus `manifest.json` into `dir`.
pub fn attention_dump(trace: &[HaltRecord], dir: &Path) -> Result<DumpManifest> {
    let first = trace.first().ok_or(Error::Empty("trace"))?;
    let layers = first.weights.len();
    let heads = first.weights.first().map_or(0, |h| h.len());
    let frames = first.weights.first().and_then(|h| h.first()).map_or(0, |w| w.len());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut names = Vec::with_capacity(heads);
        for h in 0..heads {
            let name = format!("layer{l}_head{h}.csv");
            write_csv(&dir.join(&name), trace.iter().map(|r| r.weights[l][h].clone()))?;
            names.push(name);
        }
        files.push(names);
    }
    let manifest = DumpManifest {
        frames,
        steps: trace.len(),
        layers,
        heads,
        decimals: DUMP_DECIMALS,
        files,
        halts: trace.iter().map(|r| r.halts.clone()).collect(),
        synced: trace.iter().map(|r| r.synced).collect(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Matrix::from_rows(&rows).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a dump back as `[layer][head]` matrices.
pub fn load_attention_dump(dir: &Path) -> Result<(DumpManifest, Vec<Vec<Matrix>>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DumpManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.layers);
    for names in &manifest.files {
        let mut layer = Vec::with_capacity(names.len());
        for name in names {
            let m = read_csv_matrix(&dir.join(name))?;
            if m.shape() != (manifest.steps, manifest.frames) {
                return Err(Error::format(dir.join(name), format!("shape {:?} disagrees with manifest", m.shape())));
            }
            layer.push(m);
        }
        out.push(layer);
    }
    Ok((manifest, out))
}

/// Every head's weights vanish past its halting position.
pub fn zero_beyond_halt(trace: &[HaltRecord]) -> bool {
    trace.iter().all(|r| {
        r.weights.iter().zip(&r.halts).all(|(heads, halts)| heads.iter().zip(halts).all(|(w, &halt)| w[halt..].iter().all(|&x| x == 0.0)))
    })
}

/// Fraction of attention rows (step, layer, head) whose largest weight exceeds `threshold`.
pub fn peak_fraction(trace: &[HaltRecord], threshold: f64) -> f64 {
    let mut rows = 0usize;
    let mut sharp = 0usize;
    for r in trace {
        for w in r.weights.iter().flatten() {
            rows += 1;
            if w.iter().copied().fold(0.0, f64::max) > threshold {
                sharp += 1;
            }
        }
    }
    if rows == 0 {
        0.0
    } else {
        sharp as f64 / rows as f64
    }
}
