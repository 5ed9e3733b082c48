//! Experiment configuration files.
//!
//! A config is a TOML document. Its optional top-level `preset` key
//! (`noiseless`, `noisy` or `large`) selects a base configuration and every
//! table in the file is merged over that base key by key, so a file only
//! needs the values it changes. Unknown keys are rejected with the line and
//! column of the offending entry.
//!
//! ```toml
//! preset = "noisy"
//! seed = 3
//!
//! [train]
//! epochs = 20
//!
//! [model.mechanism]
//! kind = "dacs"
//! max_lookahead = 16
//! ```
//!
//! Sections: `task` (synthetic data), `model`, `train`, `data` (split sizes),
//! `decode`, `sweep` and `compare`. A `mechanism` table is replaced as a
//! whole rather than merged, since its fields depend on `kind`. When `model`
//! does not set `vocab_size` or `feature_dim` they follow `task`.

use std::fmt;
use std::path::Path;

use dacs_core::data::ToyTaskConfig;
use dacs_core::train::TrainConfig;
use dacs_core::{Lookahead, MechanismConfig, ModelConfig};
use serde::{Deserialize, Serialize};
use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Noiseless,
    Noisy,
    Large,
}

impl Preset {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "noiseless" => Some(Preset::Noiseless),
            "noisy" => Some(Preset::Noisy),
            "large" => Some(Preset::Large),
            _ => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Noiseless => "noiseless",
            Preset::Noisy => "noisy",
            Preset::Large => "large",
        })
    }
}

/// Number of utterances generated per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSplits {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    /// Output steps before a hypothesis is cut off.
    pub max_len: usize,
    /// 1 decodes greedily.
    pub beam: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub lookaheads: Vec<Lookahead>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    pub mechanisms: Vec<MechanismConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Seeds model initialization.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub task: ToyTaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSplits,
    pub decode: DecodeSettings,
    pub sweep: SweepSettings,
    pub compare: CompareSettings,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let task = match preset {
            Preset::Noisy => ToyTaskConfig::noisy(),
            Preset::Noiseless | Preset::Large => ToyTaskConfig::noiseless(),
        };
        let (model, train, beam) = match preset {
            Preset::Large => (
                ModelConfig::large(task.vocab_size, task.feature_dim),
                TrainConfig { epochs: 50, batch_size: 32, noam_scale: 10.0, warmup: 25000, ..TrainConfig::default() },
                10,
            ),
            _ => (ModelConfig::toy(task.vocab_size, task.feature_dim), TrainConfig::toy(), 1),
        };
        Self {
            preset,
            seed: 1,
            out: None,
            data: DataSplits { train: 2000, dev: 200, test: 200 },
            decode: DecodeSettings { max_len: 3 * task.max_tokens, beam },
            sweep: SweepSettings {
                lookaheads: vec![
                    Lookahead::Unbounded,
                    Lookahead::Bounded(16),
                    Lookahead::Bounded(8),
                    Lookahead::Bounded(4),
                    Lookahead::Bounded(2),
                ],
            },
            compare: CompareSettings {
                mechanisms: vec![
                    MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded },
                    MechanismConfig::Mta,
                    MechanismConfig::Smocha { window: 2 },
                    MechanismConfig::Mocha { window: 2 },
                ],
            },
            task,
            model,
            train,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.task.validate().map_err(|e| format!("[task] {e}"))?;
        self.model.validate().map_err(|e| format!("[model] {e}"))?;
        self.train.validate().map_err(|e| format!("[train] {e}"))?;
        if self.model.vocab_size != self.task.vocab_size {
            return Err(format!(
                "[model] vocab_size {} disagrees with [task] vocab_size {}",
                self.model.vocab_size, self.task.vocab_size
            ));
        }
        if self.model.feature_dim != self.task.feature_dim {
            return Err(format!(
                "[model] feature_dim {} disagrees with [task] feature_dim {}",
                self.model.feature_dim, self.task.feature_dim
            ));
        }
        if self.data.train == 0 {
            return Err("[data] train must be at least 1".into());
        }
        if self.decode.max_len == 0 {
            return Err("[decode] max_len must be at least 1".into());
        }
        if self.decode.beam == 0 {
            return Err("[decode] beam must be at least 1".into());
        }
        if self.sweep.lookaheads.is_empty() {
            return Err("[sweep] lookaheads must not be empty".into());
        }
        if self.compare.mechanisms.is_empty() {
            return Err("[compare] mechanisms must not be empty".into());
        }
        for m in &self.compare.mechanisms {
            m.validate().map_err(|e| format!("[compare] {e}"))?;
        }
        Ok(())
    }

    /// Canonical serialized form; hashed into every manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

/// 1-based line and column of byte `offset` in `text`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn diagnostic(origin: &str, text: &str, span: Option<std::ops::Range<usize>>, message: &str) -> CliError {
    let message = message.trim_end();
    match span {
        Some(span) if span.start <= text.len() => {
            let (line, col) = line_col(text, span.start);
            CliError::Config(format!("{origin}:{line}:{col}: {message}"))
        }
        _ => CliError::Config(format!("{origin}: {message}")),
    }
}

/// Merges `user` over `base`; nested tables merge key by key except
/// mechanism tables, which replace the base value.
fn merge<'i>(base: &mut DeTable<'i>, user: DeTable<'i>) {
    for (key, value) in user {
        let whole = key.get_ref() == "mechanism";
        match (base.get_mut(key.get_ref().as_ref()), value.get_ref()) {
            (Some(existing), DeValue::Table(_)) if !whole && matches!(existing.get_ref(), DeValue::Table(_)) => {
                let span = value.span();
                let DeValue::Table(user_table) = value.into_inner() else { unreachable!() };
                let DeValue::Table(base_table) = existing.get_mut() else { unreachable!() };
                merge(base_table, user_table);
                // report errors inside merged tables at the user's header
                *existing = Spanned::new(span, std::mem::replace(existing.get_mut(), DeValue::Boolean(false)));
            }
            _ => {
                base.insert(key, value);
            }
        }
    }
}

fn has_key(table: &DeTable<'_>, section: &str, key: &str) -> bool {
    match table.get(section).map(|v| v.get_ref()) {
        Some(DeValue::Table(t)) => t.contains_key(key),
        _ => false,
    }
}

/// Parses a config document; `origin` names it in diagnostics.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    let user = DeTable::parse(text).map_err(|e| diagnostic(origin, text, e.span(), e.message()))?;
    let user_span = user.span();
    let user = user.into_inner();

    let preset = match user.get("preset").map(|v| (v.span(), v.get_ref())) {
        None => Preset::default(),
        Some((span, DeValue::String(name))) => Preset::parse(name).ok_or_else(|| {
            diagnostic(origin, text, Some(span), &format!("unknown preset `{name}`, expected one of `noiseless`, `noisy`, `large`"))
        })?,
        Some((span, _)) => return Err(diagnostic(origin, text, Some(span), "preset must be a string")),
    };
    let follows_task = |key: &str| !has_key(&user, "model", key);
    let (own_vocab, own_features) = (!follows_task("vocab_size"), !follows_task("feature_dim"));

    // Padding the base document past the end of the user text keeps every
    // base span out of range, so only user positions are ever reported.
    let base_text = format!("{}{}", "\n".repeat(text.len() + 1), ExperimentConfig::preset(preset).to_toml());
    let mut merged = DeTable::parse(&base_text).expect("preset parses").into_inner();
    merge(&mut merged, user);

    let de = toml::de::Deserializer::from(Spanned::new(user_span, merged));
    let mut config = ExperimentConfig::deserialize(de).map_err(|e| diagnostic(origin, text, e.span(), e.message()))?;
    if !own_vocab {
        config.model.vocab_size = config.task.vocab_size;
    }
    if !own_features {
        config.model.feature_dim = config.task.feature_dim;
    }
    config.validate().map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    Ok(config)
}

/// Reads `path`, or returns the default preset when no file is given.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        None => Ok(ExperimentConfig::preset(Preset::default())),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text, &path.display().to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Noiseless, Preset::Noisy, Preset::Large] {
            let cfg = ExperimentConfig::preset(p);
            cfg.validate().unwrap();
            let text = cfg.to_toml();
            assert_eq!(parse_config(&text, "x").unwrap(), cfg, "{p}");
        }
    }

    #[test]
    fn empty_file_is_the_default_preset() {
        assert_eq!(parse_config("", "x").unwrap(), ExperimentConfig::preset(Preset::Noiseless));
    }

    #[test]
    fn partial_tables_merge_over_the_preset() {
        let cfg = parse_config("preset = \"noisy\"\n[train]\nepochs = 7\n[model.chunk]\nright = 2\n", "x").unwrap();
        let base = ExperimentConfig::preset(Preset::Noisy);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, base.train.batch_size);
        assert_eq!(cfg.model.chunk.right, 2);
        assert_eq!(cfg.model.chunk.central, base.model.chunk.central);
        assert_eq!(cfg.task, base.task);
    }

    #[test]
    fn mechanism_table_is_replaced_whole() {
        let cfg = parse_config("[model.mechanism]\nkind = \"mocha\"\nwindow = 3\n", "x").unwrap();
        assert_eq!(cfg.model.mechanism, MechanismConfig::Mocha { window: 3 });
        let cfg = parse_config("[model]\nmechanism = { kind = \"dacs\", max_lookahead = 4 }\n", "x").unwrap();
        assert_eq!(cfg.model.mechanism, MechanismConfig::Dacs { max_lookahead: Lookahead::Bounded(4) });
    }

    #[test]
    fn model_dimensions_follow_the_task() {
        let cfg = parse_config("[task]\nvocab_size = 20\nfeature_dim = 8\n", "x").unwrap();
        assert_eq!((cfg.model.vocab_size, cfg.model.feature_dim), (20, 8));
        let err = parse_config("[task]\nvocab_size = 20\n[model]\nvocab_size = 9\n", "x").unwrap_err();
        assert!(err.to_string().contains("vocab_size"), "{err}");
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let err = parse_config("seed = 2\n\n[train]\nepochs = 3\nepochz = 4\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("cfg.toml:5:"), "{msg}");
        assert!(msg.contains("epochz"), "{msg}");

        let err = parse_config("[trian]\nepochs = 3\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().starts_with("cfg.toml:1:"), "{err}");
        assert!(err.to_string().contains("trian"), "{err}");

        let err = parse_config("[model.mechanism]\nkind = \"dacs\"\nmax_lookahead = 2\nwindow = 3\n", "m.toml").unwrap_err();
        assert!(err.to_string().contains("window"), "{err}");
    }

    #[test]
    fn type_errors_report_their_line() {
        let err = parse_config("[train]\nepochs = \"many\"\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().starts_with("cfg.toml:2:"), "{err}");
        let err = parse_config("[sweep]\nlookaheads = [\"inf\", 0]\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().contains("at least 1"), "{err}");
    }

    #[test]
    fn rejects_unknown_presets_and_bad_values() {
        let err = parse_config("preset = \"huge\"\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().starts_with("cfg.toml:1:"), "{err}");
        assert!(parse_config("[decode]\nbeam = 0\n", "x").is_err());
        assert!(parse_config("[compare]\nmechanisms = [{ kind = \"mocha\", window = 0 }]\n", "x").is_err());
        assert!(parse_config("seed = ", "x").unwrap_err().to_string().starts_with("x:1:"));
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
