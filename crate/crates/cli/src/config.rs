//! TOML experiment configuration.
//!
//! Only `output_dir`, `corpus.seed` and `train.seed` are required; everything else
//! falls back to the desk-scale defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use adret::data::SyntheticCorpusConfig;
use adret::objectives::{LossConfig, LossMode, DEFAULT_MARGIN, DEFAULT_TEMPERATURE};
use adret::pooling::{Modality, PoolingSpec};
use adret::training::TrainConfig;
use adret::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: Option<PathBuf>,
    #[serde(default)]
    corpus: RawCorpus,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    pooling: RawPooling,
    #[serde(default)]
    eval: RawEval,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorpus {
    seed: Option<u64>,
    num_groups: Option<usize>,
    val_groups: Option<usize>,
    test_groups: Option<usize>,
    captions_per_image: Option<usize>,
    latent_dim: Option<usize>,
    visual_dim: Option<usize>,
    text_dim: Option<usize>,
    embed_dim: Option<usize>,
    visual_len: Option<(usize, usize)>,
    text_len: Option<(usize, usize)>,
    noise_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    seed: Option<u64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    lr_decay_every: Option<usize>,
    lr_decay_factor: Option<f64>,
    #[serde(default)]
    loss: RawLoss,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    mode: Option<String>,
    k: Option<usize>,
    margin: Option<f64>,
    temperature: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPooling {
    visual: Option<String>,
    text: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    folds: Option<usize>,
    split: Option<String>,
}

/// Which held-out split `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Number of equal image folds averaged; 1 scores the whole split at once.
    pub folds: usize,
    pub split: Split,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces both `corpus.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub loss: Option<String>,
    pub k: Option<usize>,
    pub epochs: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: SyntheticCorpusConfig,
    pub train: TrainConfig,
    pub visual_pooling: PoolingSpec,
    pub text_pooling: PoolingSpec,
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
}

fn required<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(field, "required field is missing"))
}

fn parse_spec(s: Option<String>, default: PoolingSpec, field: &str) -> Result<PoolingSpec> {
    match s {
        None => Ok(default),
        Some(s) => s.parse().map_err(|e: Error| Error::config(field, e.to_string())),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        Self::from_raw(raw, overrides)
    }

    fn from_raw(raw: RawConfig, o: &Overrides) -> Result<Self> {
        let output_dir = required(o.output_dir.clone().or(raw.output_dir), "output_dir")?;
        let c = raw.corpus;
        let d = SyntheticCorpusConfig::default();
        let corpus = SyntheticCorpusConfig {
            num_groups: c.num_groups.unwrap_or(d.num_groups),
            val_groups: c.val_groups.unwrap_or(d.val_groups),
            test_groups: c.test_groups.unwrap_or(d.test_groups),
            captions_per_image: c.captions_per_image.unwrap_or(d.captions_per_image),
            latent_dim: c.latent_dim.unwrap_or(d.latent_dim),
            visual_dim: c.visual_dim.unwrap_or(d.visual_dim),
            text_dim: c.text_dim.unwrap_or(d.text_dim),
            embed_dim: c.embed_dim.unwrap_or(d.embed_dim),
            visual_len: c.visual_len.unwrap_or(d.visual_len),
            text_len: c.text_len.unwrap_or(d.text_len),
            noise_scale: c.noise_scale.unwrap_or(d.noise_scale),
            seed: required(o.seed.or(c.seed), "corpus.seed")?,
        };
        corpus.validate().map_err(|e| prefix(e, "corpus"))?;

        let t = raw.train;
        let l = t.loss;
        let mode_name = o.loss.clone().or(l.mode).unwrap_or_else(|| "infonce-adaptive".into());
        let mode = LossMode::parse(&mode_name, o.k.or(l.k)).map_err(|e| match e {
            Error::Config { field, message } if field == "k" => Error::config("train.loss.k", message),
            other => Error::config("train.loss.mode", other.to_string()),
        })?;
        let desk = TrainConfig::desk();
        let train = TrainConfig {
            batch_size: t.batch_size.unwrap_or(desk.batch_size),
            epochs: o.epochs.or(t.epochs).unwrap_or(desk.epochs),
            lr: t.lr.unwrap_or(desk.lr),
            lr_decay_every: t.lr_decay_every.unwrap_or(desk.lr_decay_every),
            lr_decay_factor: t.lr_decay_factor.unwrap_or(desk.lr_decay_factor),
            loss: LossConfig {
                margin: l.margin.unwrap_or(DEFAULT_MARGIN),
                temperature: l.temperature.unwrap_or(DEFAULT_TEMPERATURE),
                mode,
            },
            seed: required(o.seed.or(t.seed), "train.seed")?,
            validate: true,
        };
        train.validate().map_err(|e| prefix(e, "train"))?;

        let visual_pooling = parse_spec(raw.pooling.visual, PoolingSpec::AdPool, "pooling.visual")?;
        let text_pooling = parse_spec(raw.pooling.text, PoolingSpec::AdPool, "pooling.text")?;
        if visual_pooling == PoolingSpec::Manual(Modality::Text) || text_pooling == PoolingSpec::Manual(Modality::Visual) {
            log::warn!("manual pooling baseline is applied to the other modality's encoder");
        }

        let folds = raw.eval.folds.unwrap_or(1);
        if folds == 0 {
            return Err(Error::config("eval.folds", "must be >= 1"));
        }
        let split = match raw.eval.split.as_deref() {
            None | Some("test") => Split::Test,
            Some("val") => Split::Validation,
            Some(other) => return Err(Error::config("eval.split", format!("expected `val` or `test`, got `{other}`"))),
        };

        Ok(Self { corpus, train, visual_pooling, text_pooling, eval: EvalOptions { folds, split }, output_dir })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.output_dir.join("corpus")
    }
}

/// Qualifies a nested field name with its table.
fn prefix(e: Error, table: &str) -> Error {
    match e {
        Error::Config { field, message } if !field.contains('.') => Error::config(format!("{table}.{field}"), message),
        other => other,
    }
}
