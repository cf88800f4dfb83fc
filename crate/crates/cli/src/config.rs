//! Pipeline configuration: built-in defaults, then an optional JSON file,
//! then `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use feedkit_core::encoder::{EncoderConfig, EncoderMode};
use feedkit_core::eval::EvalConfig;
use feedkit_core::feed::Surface;
use feedkit_core::index::{IndexVariant, IvfParams};
use feedkit_core::mining::MineConfig;
use feedkit_core::synth::SynthConfig;
use feedkit_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory the other paths are relative to.
    pub root: PathBuf,
    pub catalog: PathBuf,
    pub events: PathBuf,
    pub pairs: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub embeddings: PathBuf,
    pub index: PathBuf,
    /// `.pfs` selects the binary store format, anything else the text one.
    pub store: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            root: "feedkit-data".into(),
            catalog: "catalog.jsonl".into(),
            events: "events.jsonl".into(),
            pairs: "pairs.tsv".into(),
            vocab: "vocab.txt".into(),
            checkpoint: "model.pfw".into(),
            trace: "trace.tsv".into(),
            embeddings: "embeddings.pfe".into(),
            index: "index.pfi".into(),
            store: "store.tsv".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 1_000 }
    }
}

/// Encoder shape; the vocabulary size comes from the trained vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: EncoderMode,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: EncoderMode::Simo,
            layers: 1,
            heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            max_seq: 24,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            max_seq: self.max_seq,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

/// Which mined pairs train the model and how the epoch is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Cap on training pairs, drawn in a seeded shuffle; 0 keeps all.
    pub max_pairs: usize,
    /// Validation pairs scored after each epoch; 0 keeps the last epoch.
    pub valid_pairs: usize,
    pub valid_distractors: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            max_pairs: 0,
            valid_pairs: 500,
            valid_distractors: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub variant: IndexVariant,
    pub ivf: IvfParams,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            variant: IndexVariant::Exact,
            ivf: IvfParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedConfig {
    /// Results kept per (item, relation) in the store.
    pub m: usize,
    pub max_queries: usize,
    pub feed_size: usize,
    pub surface: Surface,
    pub max_run: usize,
    /// Percentile of held-out positive scores used as the store threshold.
    pub percentile: f64,
}

impl Default for FeedConfig {
    fn default() -> Self {
        FeedConfig {
            m: feedkit_core::store::DEFAULT_M,
            max_queries: feedkit_core::feed::MAX_QUERIES,
            feed_size: 20,
            surface: Surface::All,
            max_run: feedkit_core::feed::MAX_RUN,
            percentile: feedkit_core::store::DEFAULT_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed. Every stage seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub mine: MineConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub index: IndexConfig,
    pub eval: EvalConfig,
    pub feed: FeedConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            mine: MineConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            selection: SelectionConfig::default(),
            index: IndexConfig::default(),
            eval: EvalConfig {
                distractor_count: 1_000,
                ..EvalConfig::default()
            },
            feed: FeedConfig::default(),
        }
    }
}

/// Seed offsets per stage, so stages never share a random stream.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const INDEX: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const SELECT: u64 = 5;
}

impl PipelineConfig {
    pub fn stage_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Loads defaults, merges `file` over them, then applies `overrides`
    /// of the form `a.b.c=value`, where value is JSON or a bare string.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(PipelineConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut v, user, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(v).context("invalid configuration")?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn derive_seeds(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.stage_seed(stream::TRAIN);
        self.index.ivf.seed = self.stage_seed(stream::INDEX);
        self.eval.seed = self.stage_seed(stream::EVAL);
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.model.encoder(feedkit_core::tokenizer::SPECIAL_TOKENS.len() + 1).validate()?;
        if self.train.mode != self.model.mode {
            bail!(
                "train.mode {:?} and model.mode {:?} disagree",
                self.train.mode,
                self.model.mode
            );
        }
        if self.tokenizer.vocab_size <= feedkit_core::tokenizer::SPECIAL_TOKENS.len() {
            bail!("tokenizer.vocab_size must exceed the reserved tokens");
        }
        let f = &self.feed;
        if f.m == 0 || f.feed_size == 0 || f.max_queries == 0 {
            bail!("feed.m, feed.feed_size and feed.max_queries must be positive");
        }
        if !(0.0..=100.0).contains(&f.percentile) {
            bail!("feed.percentile {} outside [0, 100]", f.percentile);
        }
        if self.index.ivf.clusters == 0 || self.index.ivf.nprobe == 0 {
            bail!("index.ivf.clusters and index.ivf.nprobe must be positive");
        }
        Ok(())
    }
}

fn merge(base: &mut Value, user: Value, at: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, uv) in u {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(bv) => merge(bv, uv, &path)?,
                    None => bail!("unknown config key {path}"),
                }
            }
        }
        (b, u) => *b = u,
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .with_context(|| format!("unknown config key {key}"))?;
    }
    *cur = value;
    Ok(())
}
