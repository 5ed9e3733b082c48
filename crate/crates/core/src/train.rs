//! Loss, learning-rate schedule, optimizer and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, PAD};
use crate::parallel::{self, Parallelism};

/// Cross-entropy against `(1 - eps) * onehot + eps / V`, averaged over
/// non-PAD rows, with its gradient.
pub fn label_smoothed_ce(logits: &Matrix, targets: &[usize], eps: f64) -> Result<(f64, Matrix)> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows {
        return Err(Error::dim("label_smoothed_ce", format!("{} targets for {rows} logit rows", targets.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    if let Some(bad) = targets.iter().find(|&&t| t != PAD && t >= vocab) {
        return Err(Error::contract("label_smoothed_ce", format!("target {bad} outside vocabulary of {vocab}")));
    }
    let valid = targets.iter().filter(|&&t| t != PAD).count();
    let mut grad = Matrix::zeros(rows, vocab);
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let off = eps / vocab as f64;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        let g = grad.row_mut(i);
        for (c, (&x, gc)) in row.iter().zip(g.iter_mut()).enumerate() {
            let target = if c == t { 1.0 - eps + off } else { off };
            loss -= target * (x - lse);
            *gc = ((x - max).exp() / z - target) / valid as f64;
        }
    }
    Ok((loss / valid as f64, grad))
}

/// `scale * d_m^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate step counts from 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradProbe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradProbe> {
        self.probes.iter().filter(|p| !p.passed)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` at `theta` along each probed coordinate,
/// compared against the supplied analytic gradient.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    probes: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    if theta.len() != analytic.len() {
        return Err(Error::dim("grad_check", format!("{} parameters vs {} gradient entries", theta.len(), analytic.len())));
    }
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(probes.len());
    for &i in probes {
        if i >= theta.len() {
            return Err(Error::contract("grad_check", format!("probe {i} beyond {} parameters", theta.len())));
        }
        point[i] = theta[i] + h;
        let plus = f(&point)?;
        point[i] = theta[i] - h;
        let minus = f(&point)?;
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel_error = relative_error(analytic[i], numeric);
        out.push(GradProbe { index: i, analytic: analytic[i], numeric, rel_error, passed: rel_error < tol });
    }
    Ok(GradCheckReport { tol, probes: out })
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Matrix], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub noam_scale: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Epochs without dev-loss improvement before stopping; 0 disables it.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_patience() -> usize {
    3
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.98)
}

fn default_adam_eps() -> f64 {
    1e-9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            label_smoothing: 0.1,
            noam_scale: 1.0,
            warmup: 400,
            clip_norm: 5.0,
            seed: 1,
            patience: default_patience(),
            adam_betas: default_betas(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    /// Schedule calibrated on the toy presets: about a minute of single-core training.
    pub fn toy() -> Self {
        Self { epochs: 50, batch_size: 16, noam_scale: 0.5, warmup: 400, patience: 5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.warmup < 1 {
            return Err(Error::Config("warmup must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.noam_scale < 0.0 {
            return Err(Error::Config("noam_scale must be non-negative".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean per-utterance loss, evaluated in parallel and summed in order.
pub fn mean_loss(model: &Model, data: &[Utterance], smoothing: f64, par: Parallelism) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let losses = parallel::map(par, data, |u| model.loss(&u.features, &u.tokens, smoothing));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// Mean loss and gradient over `batch`; per-utterance gradients may be
/// computed in parallel but are reduced in batch order.
pub fn batch_gradient(model: &Model, batch: &[&Utterance], smoothing: f64, par: Parallelism) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let parts = parallel::map(par, batch, |u| model.loss_and_grad(&u.features, &u.tokens, smoothing));
    let mut loss = 0.0;
    let mut total: Option<Vec<Matrix>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let n = batch.len() as f64;
    let mut grads = total.expect("non-empty batch");
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grads))
}

pub fn train(model: &mut Model, train_set: &[Utterance], dev_set: &[Utterance], cfg: &TrainConfig, par: Parallelism) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, dev_set, cfg, par, |_| {})
}

/// Runs the optimizer loop, calling `progress` after every epoch. The model
/// ends up holding the parameters of the best dev-loss epoch.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    cfg: &TrainConfig,
    par: Parallelism,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let dev = if dev_set.is_empty() { train_set } else { dev_set };
    let d_model = model.config().d_model;
    let mut adam = Adam::new(model.params().values(), cfg.adam_betas.0, cfg.adam_betas.1, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Matrix>)> = None;
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradient(model, &batch, cfg.label_smoothing, par)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            lr = noam_lr(step, d_model, cfg.warmup, cfg.noam_scale)?;
            adam.step(model.params_mut().values_mut(), &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let dev_loss = mean_loss(model, dev, cfg.label_smoothing, par)?;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { epoch, step, loss: dev_loss });
        }
        let stats = EpochStats { epoch, train_loss: epoch_loss / batches as f64, dev_loss, lr, steps: step };
        progress(&stats);
        curve.push(stats);

        if best.as_ref().is_none_or(|(b, _, _)| dev_loss < *b) {
            best = Some((dev_loss, epoch, model.params().values().to_vec()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if cfg.patience > 0 && bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params_mut().values_mut().clone_from_slice(&params);
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome { curve, best_epoch, stopped_early })
}

/// Loss curve as comma-separated text with a header row.
pub fn write_curve_csv(curve: &[EpochStats], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,dev_loss,lr,steps")?;
    for s in curve {
        writeln!(out, "{},{:.10},{:.10},{:.10e},{}", s.epoch, s.train_loss, s.dev_loss, s.lr, s.steps)?;
    }
    Ok(())
}
