//! Finite-difference checks of every differentiable path.
//!
//! Each case builds a scalar objective `sum(G ⊙ f(x))` with a fixed random
//! `G`, takes the analytic gradient from the tape and compares it with
//! central differences. The full-model cases probe a random subset of the
//! parameters of a tiny encoder-decoder under each mechanism.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{ToyTask, ToyTaskConfig};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::mechanism::{Lookahead, MechanismConfig};
use crate::model::{ChunkLayout, Model, ModelConfig};
use crate::tape::{Tape, Var, WeightFn};
use crate::train::{grad_check, GradCheckReport};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Finite-difference step.
    pub h: f64,
    /// Relative-error tolerance.
    pub tol: f64,
    /// Parameters probed per full-model case.
    pub model_probes: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 1, h: 1e-5, tol: 1e-3, model_probes: 48 }
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Checks every coordinate of `x0` through the tape-built function `build`.
fn tape_case(
    name: &str,
    x0: &Matrix,
    build: impl Fn(&mut Tape, Var) -> Result<Var>,
    rng: &mut ChaCha8Rng,
    cfg: &SuiteConfig,
) -> Result<SuiteCase> {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = build(&mut tape, x)?;
    let (rows, cols) = tape.value(y).shape();
    let g = random(rng, rows, cols, 1.0);
    let value = tape.value(y).hadamard(&g).sum();
    let root = tape.loss(y, value, g.clone());
    let grads = tape.backward(root);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
    let objective = |theta: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(Matrix::new(x0.rows(), x0.cols(), theta.to_vec())?);
        let y = build(&mut t, xv)?;
        Ok(t.value(y).hadamard(&g).sum())
    };
    let probes: Vec<usize> = (0..x0.data().len()).collect();
    let report = grad_check(objective, x0.data(), analytic.data(), &probes, cfg.h, cfg.tol)?;
    Ok(SuiteCase { name: name.to_string(), report })
}

/// Energies whose halting cumulative sums stay clear of the DACS threshold,
/// so a finite-difference step never flips the kept set.
fn energies_clear_of_threshold(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Matrix {
    loop {
        let e = random(rng, rows, cols, 2.5);
        let clear = e.iter_rows().all(|row| {
            let mut acc = 0.0;
            row.iter().all(|&x| {
                acc += 1.0 / (1.0 + (-x).exp());
                (acc - 1.0).abs() > margin
            })
        });
        if clear {
            return e;
        }
    }
}

fn tiny_model(mech: MechanismConfig, seed: u64) -> Result<Model> {
    let task = ToyTaskConfig::noiseless();
    let mut cfg = ModelConfig::toy(task.vocab_size, task.feature_dim);
    cfg.d_model = 8;
    cfg.d_ff = 12;
    cfg.chunk = ChunkLayout::new(3, 2, 1)?;
    cfg.mechanism = mech;
    Model::new(cfg, seed)
}

fn model_case(mech: MechanismConfig, rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<SuiteCase> {
    let mut task = ToyTaskConfig::noiseless();
    task.noise = 0.3;
    task.max_tokens = 4;
    let utt = ToyTask::new(task)?.generate(1, cfg.seed)?.remove(0);
    let mut model = tiny_model(mech, cfg.seed)?;
    let (_, grads) = model.loss_and_grad(&utt.features, &utt.tokens, 0.1)?;
    let theta = model.params().flatten();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let count = cfg.model_probes.min(theta.len());
    let mut probes = sample(rng, theta.len(), count).into_vec();
    probes.sort_unstable();
    let objective = |t: &[f64]| {
        model.params_mut().assign_flat(t);
        model.loss(&utt.features, &utt.tokens, 0.1)
    };
    let report = grad_check(objective, &theta, &analytic, &probes, cfg.h, cfg.tol)?;
    Ok(SuiteCase { name: format!("model/{}", mech.name()), report })
}

/// Mechanisms covered by the full-model cases.
pub fn suite_mechanisms() -> [MechanismConfig; 6] {
    [
        MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded },
        MechanismConfig::Hma,
        MechanismConfig::Mocha { window: 2 },
        MechanismConfig::Smocha { window: 2 },
        MechanismConfig::Mta,
        MechanismConfig::Offline,
    ]
}

/// Runs the full suite: the five weight functions, the attention core and
/// the model loss under every mechanism.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();

    let e0 = energies_clear_of_threshold(&mut rng, 4, 8, 1e-3);
    for (name, kind) in [
        ("weights/hma", WeightFn::Hma),
        ("weights/smocha", WeightFn::Smocha),
        ("weights/mta", WeightFn::Mta),
        ("weights/dacs", WeightFn::Dacs),
    ] {
        cases.push(tape_case(
            name,
            &e0,
            |t, e| {
                let p = t.sigmoid(e);
                Ok(t.weights(p, kind))
            },
            &mut rng,
            cfg,
        )?);
    }
    cases.push(tape_case(
        "weights/mocha",
        &e0,
        |t, e| {
            let p = t.sigmoid(e);
            let alpha = t.weights(p, WeightFn::Hma);
            t.mocha(alpha, e, 3)
        },
        &mut rng,
        cfg,
    )?);

    // scaled dot-product attention with projections, a mask and a residual
    let (wq, wk, wv) = (random(&mut rng, 6, 4, 0.8), random(&mut rng, 6, 4, 0.8), random(&mut rng, 6, 4, 0.8));
    let gain = random(&mut rng, 1, 6, 1.0);
    let bias = random(&mut rng, 1, 6, 0.5);
    let mask = Arc::new(Matrix::from_rows(&[
        vec![1.0, 1.0, 0.0, 0.0, 0.0],
        vec![1.0, 1.0, 1.0, 0.0, 0.0],
        vec![0.0, 1.0, 1.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0, 1.0],
        vec![0.0, 0.0, 0.0, 1.0, 1.0],
    ])?);
    let x0 = random(&mut rng, 5, 6, 1.0);
    cases.push(tape_case(
        "attention/core",
        &x0,
        |t, x| {
            let (g, b) = (t.leaf(gain.clone()), t.leaf(bias.clone()));
            let h = t.layer_norm(x, g, b);
            let (q, k, v) = (t.leaf(wq.clone()), t.leaf(wk.clone()), t.leaf(wv.clone()));
            let (q, k, v) = (t.matmul(h, q), t.matmul(h, k), t.matmul(h, v));
            let e = t.energies(q, k);
            let w = t.softmax(e, Some(&mask))?;
            let c = t.matmul(w, v);
            let c = t.relu(c);
            let x_part = t.slice_cols(x, 0, 4);
            let y = t.add(c, x_part);
            Ok(t.concat_cols(&[y, x_part]))
        },
        &mut rng,
        cfg,
    )?);

    for mech in suite_mechanisms() {
        cases.push(model_case(mech, &mut rng, cfg)?);
    }
    Ok(cases)
}
