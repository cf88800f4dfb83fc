//! Glue between mined pairs, the tokenizer, training and evaluation.

use crate::embeddings::{embed_catalog, EmbeddingTable};
use crate::error::{bail, Error, Result};
use crate::eval::recall_at_k;
use crate::mining::QueryTargetPair;
use crate::tokenizer::Vocabulary;
use crate::trainer::{train_model_observed, Model, TraceRow, TrainConfig, TrainPair};
use crate::types::{Catalog, ItemId};

/// Items embedded per encoder call when embedding a catalog.
pub const EMBED_BATCH: usize = 64;

/// A catalog with every item's metadata tokenized once.
pub struct Corpus<'a> {
    pub catalog: &'a Catalog,
    pub vocab: &'a Vocabulary,
    tokens: Vec<Vec<u32>>,
}

impl<'a> Corpus<'a> {
    /// `max_tokens` is the metadata budget after the special-token prefix.
    pub fn new(catalog: &'a Catalog, vocab: &'a Vocabulary, max_tokens: usize) -> Self {
        let tokens = catalog
            .items()
            .iter()
            .map(|i| vocab.encode(&i.metadata(), max_tokens))
            .collect();
        Corpus { catalog, vocab, tokens }
    }

    pub fn tokens(&self, id: &str) -> Result<&[u32]> {
        self.catalog
            .position(id)
            .map(|i| self.tokens[i].as_slice())
            .ok_or_else(|| Error::Input(format!("item {id} is not in the catalog")))
    }

    pub fn train_pairs(&self, pairs: &[QueryTargetPair]) -> Result<Vec<TrainPair>> {
        pairs
            .iter()
            .map(|p| {
                Ok(TrainPair {
                    query: self.tokens(p.query_id.as_str())?.to_vec(),
                    relation: p.relation,
                    target: self.tokens(p.target_id.as_str())?.to_vec(),
                })
            })
            .collect()
    }

    /// Every catalog item, the pool uniform negatives are drawn from.
    pub fn negative_pool(&self) -> Vec<Vec<u32>> {
        self.tokens.clone()
    }
}

/// Held-out pairs ranked against a fixed distractor set.
#[derive(Debug, Clone)]
pub struct Holdout {
    pub pairs: Vec<QueryTargetPair>,
    pub distractors: Vec<ItemId>,
    pub k: usize,
}

impl Holdout {
    pub fn recall(&self, table: &EmbeddingTable) -> Result<f64> {
        Ok(recall_at_k(&self.pairs, table, &self.distractors, self.k)?.overall.value())
    }
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// Holdout recall after each epoch; empty without a holdout.
    pub epoch_recall: Vec<f64>,
    /// Zero-based epoch of the returned model.
    pub best_epoch: usize,
}

pub fn embed_model(model: &Model, vocab: &Vocabulary, catalog: &Catalog) -> Result<EmbeddingTable> {
    embed_catalog(&model.encoder(), vocab, catalog, EMBED_BATCH)
}

/// Trains `model` on `pairs`. With a holdout, the model is scored after
/// every epoch and the best-scoring epoch is returned (earliest on ties);
/// without one, the final model is.
pub fn fit(
    model: Model,
    corpus: &Corpus<'_>,
    pairs: &[QueryTargetPair],
    config: &TrainConfig,
    holdout: Option<&Holdout>,
) -> Result<Fit> {
    if pairs.is_empty() {
        bail!(Input, "no training pairs");
    }
    let train = corpus.train_pairs(pairs)?;
    let pool = corpus.negative_pool();
    let mut epoch_recall = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let out = train_model_observed(model, &train, &pool, config, |epoch, m| {
        let Some(h) = holdout else { return Ok(()) };
        let r = h.recall(&embed_model(m, corpus.vocab, corpus.catalog)?)?;
        log::info!("epoch {epoch} holdout recall@{} {r:.4}", h.k);
        epoch_recall.push(r);
        if best.as_ref().is_none_or(|b| r > b.0) {
            best = Some((r, epoch, m.clone()));
        }
        Ok(())
    })?;
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (out.model, config.epochs.saturating_sub(1)),
    };
    Ok(Fit {
        model,
        trace: out.trace,
        epoch_recall,
        best_epoch,
    })
}
