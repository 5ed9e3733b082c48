//! Subcommand implementations. Progress goes to stderr, results to files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dacs_core::checkpoint::{load_checkpoint, save_checkpoint};
use dacs_core::data::{load_dataset, save_dataset, ToyTask, ToyTaskConfig, Utterance};
use dacs_core::eval::{evaluate, SetReport, SetSummary};
use dacs_core::gradcheck::{gradient_suite, SuiteConfig};
use dacs_core::metrics::attention_dump;
use dacs_core::parallel::Parallelism;
use dacs_core::streaming::write_trace_jsonl;
use dacs_core::train::{train_with_progress, write_curve_csv};
use dacs_core::{DecodeMode, Lookahead, MechanismConfig, Model};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::render::render_dumps;

pub const DATA_EXT: &str = "dacsdata";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Settings shared by every command.
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub par: Parallelism,
}

impl Context {
    fn manifest(&self, command: &str) -> ManifestBuilder {
        ManifestBuilder::new(command, self.config.seed, &self.config.to_toml())
    }

    fn prepare_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", self.out.display())))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn decode_mode(&self, beam: Option<usize>) -> CliResult<DecodeMode> {
        match beam.unwrap_or(self.config.decode.beam) {
            0 => Err(CliError::Usage("--beam must be at least 1".into())),
            1 => Ok(DecodeMode::Greedy),
            b => Ok(DecodeMode::Beam(b)),
        }
    }
}

/// Mechanism flags shared by `train` and `decode`.
#[derive(Clone, Debug, Default)]
pub struct MechanismOverride {
    pub name: Option<String>,
    pub max_lookahead: Option<Lookahead>,
    pub chunk_window: Option<usize>,
}

impl MechanismOverride {
    /// Applies the flags on top of `base`.
    pub fn resolve(&self, base: MechanismConfig) -> CliResult<MechanismConfig> {
        let mech = match &self.name {
            Some(name) => MechanismConfig::from_parts(name, self.max_lookahead, self.chunk_window)?,
            None => {
                let mut mech = base;
                if let Some(m) = self.max_lookahead {
                    if !matches!(mech, MechanismConfig::Dacs { .. }) {
                        return Err(CliError::Usage(format!("--max-lookahead applies to dacs, not {}", mech.name())));
                    }
                    mech = mech.with_lookahead(m);
                }
                if let Some(w) = self.chunk_window {
                    mech = match mech {
                        MechanismConfig::Mocha { .. } => MechanismConfig::Mocha { window: w },
                        MechanismConfig::Smocha { .. } => MechanismConfig::Smocha { window: w },
                        other => return Err(CliError::Usage(format!("--chunk-window applies to mocha or smocha, not {}", other.name()))),
                    };
                }
                mech
            }
        };
        if let Some(name) = &self.name {
            if self.max_lookahead.is_some() && name != "dacs" {
                return Err(CliError::Usage(format!("--max-lookahead applies to dacs, not {name}")));
            }
            if self.chunk_window.is_some() && name != "mocha" && name != "smocha" {
                return Err(CliError::Usage(format!("--chunk-window applies to mocha or smocha, not {name}")));
            }
        }
        mech.validate()?;
        Ok(mech)
    }
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.{DATA_EXT}"))
}

fn load_split(data: &Path, split: &str) -> CliResult<(ToyTaskConfig, Vec<Utterance>, PathBuf)> {
    let path = split_path(data, split);
    if !path.is_file() {
        return Err(CliError::Runtime(format!("missing dataset {}", path.display())));
    }
    let (cfg, utts) = load_dataset(&path)?;
    Ok((cfg, utts, path))
}

fn check_compatible(model: &Model, task: &ToyTaskConfig) -> CliResult<()> {
    let cfg = model.config();
    if cfg.vocab_size != task.vocab_size || cfg.feature_dim != task.feature_dim {
        return Err(CliError::Config(format!(
            "model expects vocabulary {} and feature width {}, the dataset has {} and {}",
            cfg.vocab_size, cfg.feature_dim, task.vocab_size, task.feature_dim
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn tokens_text(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// Parent directory and file name, for tables and progress lines.
fn short_name(path: &Path) -> String {
    let name = path.file_name().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) => format!("{}/{name}", parent.to_string_lossy()),
        None => name,
    }
}

pub fn gen(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    ctx.prepare_out()?;
    let task = ToyTask::new(cfg.task.clone())?;
    let mut manifest = ctx.manifest("gen");
    let counts = [cfg.data.train, cfg.data.dev, cfg.data.test];
    for (stream, (split, n)) in SPLITS.iter().zip(counts).enumerate() {
        let utts = task.generate(n, stream as u64)?;
        let path = split_path(&ctx.out, split);
        save_dataset(&path, &cfg.task, &utts)?;
        eprintln!("wrote {n} {split} utterances to {}", path.display());
        manifest.output(&path)?;
    }
    manifest.write(&ctx.out)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    mechanism: MechanismConfig,
    epochs_run: usize,
    best_epoch: usize,
    stopped_early: bool,
    best_dev_loss: Option<f64>,
    parameters: usize,
}

pub fn train(ctx: &Context, data: &Path, mech: &MechanismOverride) -> CliResult<()> {
    let cfg = &ctx.config;
    let mut model_cfg = cfg.model.clone();
    model_cfg.mechanism = mech.resolve(model_cfg.mechanism)?;
    let (task, train_set, train_path) = load_split(data, "train")?;
    let (_, dev_set, dev_path) = load_split(data, "dev")?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    check_compatible(&model, &task)?;
    ctx.prepare_out()?;
    eprintln!(
        "training {} on {} utterances ({} parameters)",
        model.config().mechanism,
        train_set.len(),
        model.params().scalar_count()
    );
    let start = Instant::now();
    let outcome = train_with_progress(&mut model, &train_set, &dev_set, &cfg.train, ctx.par, |s| {
        eprintln!("epoch {:>3}  train {:.4}  dev {:.4}  lr {:.2e}", s.epoch, s.train_loss, s.dev_loss, s.lr);
    })?;
    eprintln!("finished in {:.1}s, keeping epoch {}", start.elapsed().as_secs_f64(), outcome.best_epoch);

    let ckpt = ctx.path("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let mut curve = Vec::new();
    write_curve_csv(&outcome.curve, &mut curve).expect("in-memory write");
    let curve_path = ctx.path("curve.csv");
    write_file(&curve_path, &curve)?;
    let summary = TrainSummary {
        mechanism: model.config().mechanism,
        epochs_run: outcome.curve.len(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        best_dev_loss: outcome.curve.iter().find(|s| s.epoch == outcome.best_epoch).map(|s| s.dev_loss),
        parameters: model.params().scalar_count(),
    };
    let summary_path = ctx.path("train.json");
    write_file(&summary_path, &json(&summary))?;

    let mut manifest = ctx.manifest("train");
    manifest.input(&train_path)?;
    manifest.input(&dev_path)?;
    for p in [&ckpt, &curve_path, &summary_path] {
        manifest.output(p)?;
    }
    manifest.write(&ctx.out)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!("missing checkpoint {}", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub struct DecodeArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub split: &'a str,
    pub mechanism: &'a MechanismOverride,
    pub beam: Option<usize>,
    pub limit: Option<usize>,
    pub dump: usize,
}

fn write_decode_outputs(ctx: &Context, report: &SetReport, data: &[Utterance], dump: usize, manifest: &mut ManifestBuilder) -> CliResult<()> {
    let mut transcripts = String::from("utterance,reference,hypothesis,substitutions,deletions,insertions,cost_ratio,truncated\n");
    let mut steps = Vec::new();
    let mut trace = Vec::new();
    for (i, (r, u)) in report.results.iter().zip(data).enumerate() {
        transcripts.push_str(&format!(
            "{i},{},{},{},{},{},{:.6},{}\n",
            tokens_text(&u.tokens),
            tokens_text(&r.decoded.tokens),
            r.errors.substitutions,
            r.errors.deletions,
            r.errors.insertions,
            r.cost.r,
            r.decoded.truncated
        ));
        #[derive(Serialize)]
        struct StepLine<'a> {
            utterance: usize,
            frames: usize,
            entries: &'a [Vec<Vec<usize>>],
        }
        serde_json::to_writer(&mut steps, &StepLine { utterance: i, frames: r.frames, entries: &r.decoded.step_log.entries })
            .expect("in-memory write");
        steps.push(b'\n');
        write_trace_jsonl(&r.decoded.trace, Some(i), &mut trace).expect("in-memory write");
    }
    let files = [
        ("transcripts.csv", transcripts.into_bytes()),
        ("steps.jsonl", steps),
        ("trace.jsonl", trace),
        ("summary.json", json(&report.summary)),
    ];
    for (name, bytes) in files {
        let path = ctx.path(name);
        write_file(&path, &bytes)?;
        manifest.output(&path)?;
    }
    if dump > 0 {
        let root = ctx.path("attention");
        for (i, r) in report.results.iter().take(dump).enumerate() {
            if !r.decoded.trace.is_empty() {
                attention_dump(&r.decoded.trace, &root.join(format!("utt{i}")))?;
            }
        }
        if root.is_dir() {
            manifest.output(&root)?;
        }
    }
    Ok(())
}

fn print_summary(label: &str, s: &SetSummary) {
    eprintln!(
        "{label}: token error rate {:.4} ({} errors / {} tokens), cost ratio {:.4}, mean lag {}, truncated {}",
        s.token_error_rate,
        s.errors.errors(),
        s.errors.reference_len,
        s.cost_ratio,
        s.mean_lag.map_or_else(|| "n/a".to_string(), |l| format!("{l:.2}")),
        s.truncated
    );
}

pub fn decode(ctx: &Context, args: &DecodeArgs<'_>) -> CliResult<()> {
    let model = load_model(args.checkpoint)?;
    let (task, mut data, data_path) = load_split(args.data, args.split)?;
    check_compatible(&model, &task)?;
    if let Some(n) = args.limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(CliError::Runtime(format!("{} has no utterances to decode", data_path.display())));
    }
    let mech = args.mechanism.resolve(model.config().mechanism)?;
    let mode = ctx.decode_mode(args.beam)?;
    ctx.prepare_out()?;
    let start = Instant::now();
    let report = evaluate(&model, &data, mech, ctx.config.decode.max_len, mode, ctx.par)?;
    print_summary(&mech.to_string(), &report.summary);
    eprintln!("decoded {} utterances in {:.2}s", data.len(), start.elapsed().as_secs_f64());

    let mut manifest = ctx.manifest("decode");
    manifest.input(args.checkpoint)?;
    manifest.input(&data_path)?;
    write_decode_outputs(ctx, &report, &data, args.dump, &mut manifest)?;
    manifest.write(&ctx.out)?;
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub split: &'a str,
    pub beam: Option<usize>,
    pub limit: Option<usize>,
}

fn eval_set(args: &EvalArgs<'_>) -> CliResult<(ToyTaskConfig, Vec<Utterance>, PathBuf)> {
    let (task, mut data, path) = load_split(args.data, args.split)?;
    if let Some(n) = args.limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(CliError::Runtime(format!("{} has no utterances to decode", path.display())));
    }
    Ok((task, data, path))
}

pub fn sweep_m(ctx: &Context, checkpoint: &Path, lookaheads: Option<Vec<Lookahead>>, args: &EvalArgs<'_>) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    if !matches!(model.config().mechanism, MechanismConfig::Dacs { .. }) {
        return Err(CliError::Config(format!("sweep-m needs a dacs checkpoint, {} was trained with {}", checkpoint.display(), model.config().mechanism)));
    }
    let (task, data, data_path) = eval_set(args)?;
    check_compatible(&model, &task)?;
    let lookaheads = lookaheads.unwrap_or_else(|| ctx.config.sweep.lookaheads.clone());
    let mode = ctx.decode_mode(args.beam)?;
    ctx.prepare_out()?;
    let mut table = String::from("max_lookahead,token_error_rate,cost_ratio,mean_lag,max_lag,max_scan_ahead,truncated\n");
    for m in lookaheads {
        let mech = MechanismConfig::Dacs { max_lookahead: m };
        let s = evaluate(&model, &data, mech, ctx.config.decode.max_len, mode, ctx.par)?.summary;
        print_summary(&format!("M={m}"), &s);
        table.push_str(&format!(
            "{m},{:.6},{:.6},{},{},{},{}\n",
            s.token_error_rate,
            s.cost_ratio,
            opt(s.mean_lag.map(|l| format!("{l:.4}"))),
            opt(s.max_lag),
            s.max_scan_ahead,
            s.truncated
        ));
    }
    let path = ctx.path("sweep.csv");
    write_file(&path, table.as_bytes())?;
    let mut manifest = ctx.manifest("sweep-m");
    manifest.input(checkpoint)?;
    manifest.input(&data_path)?;
    manifest.output(&path)?;
    manifest.write(&ctx.out)?;
    Ok(())
}

/// With one checkpoint every mechanism of `[compare]` is swapped into it;
/// with several, each is decoded with the mechanism it was trained with.
pub fn compare(ctx: &Context, checkpoints: &[PathBuf], args: &EvalArgs<'_>) -> CliResult<()> {
    let mut models = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        models.push(load_model(path)?);
    }
    let (task, data, data_path) = eval_set(args)?;
    for m in &models {
        check_compatible(m, &task)?;
    }
    let runs: Vec<(usize, MechanismConfig)> = if models.len() == 1 {
        ctx.config.compare.mechanisms.iter().map(|&m| (0, m)).collect()
    } else {
        models.iter().enumerate().map(|(i, m)| (i, m.config().mechanism)).collect()
    };
    let mode = ctx.decode_mode(args.beam)?;
    ctx.prepare_out()?;
    let mut table = String::from("mechanism,checkpoint,token_error_rate,cost_ratio,mean_lag,max_lag,truncated\n");
    for (i, mech) in runs {
        let start = Instant::now();
        let s = evaluate(&models[i], &data, mech, ctx.config.decode.max_len, mode, ctx.par)?.summary;
        print_summary(&mech.to_string(), &s);
        eprintln!("  {:.2}s", start.elapsed().as_secs_f64());
        table.push_str(&format!(
            "{mech},{},{:.6},{:.6},{},{},{}\n",
            short_name(&checkpoints[i]),
            s.token_error_rate,
            s.cost_ratio,
            opt(s.mean_lag.map(|l| format!("{l:.4}"))),
            opt(s.max_lag),
            s.truncated
        ));
    }
    let path = ctx.path("compare.csv");
    write_file(&path, table.as_bytes())?;
    let mut manifest = ctx.manifest("compare");
    for c in checkpoints {
        manifest.input(c)?;
    }
    manifest.input(&data_path)?;
    manifest.output(&path)?;
    manifest.write(&ctx.out)?;
    Ok(())
}

#[derive(Serialize)]
struct CaseLine {
    name: String,
    passed: bool,
    max_rel_error: f64,
    probes: usize,
}

#[derive(Serialize)]
struct GradcheckReport {
    h: f64,
    tol: f64,
    passed: bool,
    cases: Vec<CaseLine>,
}

pub fn gradcheck(ctx: &Context, probes: Option<usize>) -> CliResult<()> {
    let defaults = SuiteConfig::default();
    let suite = SuiteConfig { seed: ctx.config.seed, model_probes: probes.unwrap_or(defaults.model_probes), ..defaults };
    let start = Instant::now();
    let cases = gradient_suite(&suite)?;
    let lines: Vec<CaseLine> = cases
        .iter()
        .map(|c| CaseLine {
            name: c.name.clone(),
            passed: c.report.passed(),
            max_rel_error: c.report.max_rel_error(),
            probes: c.report.probes.len(),
        })
        .collect();
    for l in &lines {
        eprintln!("{} {:<16} max relative error {:.3e} over {} probes", if l.passed { "pass" } else { "FAIL" }, l.name, l.max_rel_error, l.probes);
    }
    eprintln!("gradient suite finished in {:.2}s", start.elapsed().as_secs_f64());
    let passed = lines.iter().all(|l| l.passed);
    let report = GradcheckReport { h: suite.h, tol: suite.tol, passed, cases: lines };
    ctx.prepare_out()?;
    let path = ctx.path("gradcheck.json");
    write_file(&path, &json(&report))?;
    let mut manifest = ctx.manifest("gradcheck");
    manifest.output(&path)?;
    manifest.write(&ctx.out)?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

pub fn render(ctx: &Context, dumps: &[PathBuf], cell: u32) -> CliResult<()> {
    ctx.prepare_out()?;
    let written = render_dumps(dumps, &ctx.out, cell)?;
    let mut manifest = ctx.manifest("render");
    for d in dumps {
        let m = d.join("manifest.json");
        if m.is_file() {
            manifest.input(&m)?;
        }
    }
    for p in &written {
        manifest.output(p)?;
    }
    eprintln!("rendered {} heatmaps into {}", written.len(), ctx.out.display());
    manifest.write(&ctx.out)?;
    Ok(())
}
