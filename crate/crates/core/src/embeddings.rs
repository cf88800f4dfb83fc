//! Per-item role embeddings keyed by item id, with a binary file format.

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::encoder::{Encoder, ItemEmbeddings};
use crate::tokenizer::Vocabulary;
use crate::types::Catalog;
use crate::error::{bail, Result};
use crate::io::{expect_magic, get_f32, get_str, get_u32, put_f32, put_str, put_u32};
use crate::types::{ItemId, Role};

const MAGIC: &[u8; 4] = b"PFE1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<ItemEmbeddings>,
    by_id: HashMap<ItemId, usize>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<ItemEmbeddings>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.target.len());
        let mut by_id = HashMap::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if Role::ALL.iter().any(|&role| r.role(role).len() != dim) {
                bail!(Input, "embeddings for {} do not all have dimension {dim}", r.item_id);
            }
            if by_id.insert(r.item_id.clone(), i).is_some() {
                bail!(Input, "duplicate embeddings for {}", r.item_id);
            }
        }
        Ok(EmbeddingTable { dim, rows, by_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ItemEmbeddings] {
        &self.rows
    }

    pub fn get(&self, id: &str) -> Option<&ItemEmbeddings> {
        self.by_id.get(id).map(|&i| &self.rows[i])
    }

    pub fn role(&self, id: &str, role: Role) -> Option<&[f32]> {
        self.get(id).map(|e| e.role(role))
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, self.dim as u32)?;
        put_u32(w, self.rows.len() as u32)?;
        for r in &self.rows {
            put_str(w, r.item_id.as_str())?;
            for role in Role::ALL {
                for &x in r.role(role) {
                    put_f32(w, x)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let dim = get_u32(r)? as usize;
        let n = get_u32(r)? as usize;
        let mut rows = Vec::with_capacity(n);
        let vec = |r: &mut dyn Read| (0..dim).map(|_| get_f32(r)).collect::<Result<Vec<f32>>>();
        for _ in 0..n {
            let item_id = ItemId::new(get_str(r)?);
            rows.push(ItemEmbeddings {
                item_id,
                q_view: vec(r)?,
                q_buy: vec(r)?,
                target: vec(r)?,
            });
        }
        EmbeddingTable::new(rows)
    }
}

/// Token ids of every item's metadata, truncated to fit after the prefix.
pub fn tokenize_catalog(vocab: &Vocabulary, catalog: &Catalog, encoder_max_seq: usize, prefix_len: usize) -> Vec<Vec<u32>> {
    let max_len = encoder_max_seq.saturating_sub(prefix_len);
    catalog.items().iter().map(|i| vocab.encode(&i.metadata(), max_len)).collect()
}

/// Runs the encoder over the whole catalog in chunks of `batch` items,
/// chunks in parallel. Rows follow catalog order.
pub fn embed_catalog(encoder: &Encoder, vocab: &Vocabulary, catalog: &Catalog, batch: usize) -> Result<EmbeddingTable> {
    let tokens = tokenize_catalog(vocab, catalog, encoder.config().max_seq, encoder.mode.prefix_len());
    let items: Vec<(&ItemId, &[u32])> = catalog.ids().zip(tokens.iter().map(Vec::as_slice)).collect();
    let chunks: Vec<Vec<ItemEmbeddings>> = items
        .par_chunks(batch.max(1))
        .map(|c| encoder.embed_batch(c))
        .collect::<Result<_>>()?;
    EmbeddingTable::new(chunks.into_iter().flatten().collect())
}
