//! Transformer encoder producing role-specific item embeddings.
//!
//! In three-output mode the input is `[Q_V] [Q_B] [TGT]` followed by the
//! item's metadata tokens; the final-layer states at positions 0, 1 and 2 are
//! the view-query, buy-query and target embeddings. Single-output mode feeds
//! one role token and reads position 0, so covering all roles takes three
//! passes.
//!
//! Blocks are pre-norm with a tanh-approximated GELU feed-forward. A linear
//! projection shared by all roles sits between the final layer norm and the
//! L2 normalization.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Segment, Tensor, Var};
use crate::error::{bail, Result};
use crate::metrics;
use crate::tokenizer::{Q_BUY, Q_VIEW, TARGET};
use crate::types::{ItemId, Role};

pub use checkpoint::Checkpoint;

pub const LN_EPS: f64 = 1e-5;

/// Special-token prefixes understood by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Three role tokens, one pass per item.
    Simo,
    /// One role token, one pass per (item, role).
    Siso,
}

impl EncoderMode {
    pub fn prefix_len(self) -> usize {
        match self {
            EncoderMode::Simo => 3,
            EncoderMode::Siso => 1,
        }
    }
}

pub fn role_token(role: Role) -> u32 {
    match role {
        Role::View => Q_VIEW,
        Role::Buy => Q_BUY,
        Role::Target => TARGET,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Longest input including the special-token prefix.
    pub max_seq: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::new(20_000, 128)
    }
}

impl EncoderConfig {
    /// Four layers, eight heads, a 4x feed-forward and room for 64 metadata
    /// tokens after the three special tokens.
    pub fn new(vocab_size: usize, hidden_dim: usize) -> Self {
        EncoderConfig {
            layers: 4,
            heads: 8,
            hidden_dim,
            ffn_dim: 4 * hidden_dim,
            max_seq: 64 + 3,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            bail!(Input, "encoder sizes must be positive: {self:?}");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            bail!(
                Input,
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim,
                self.heads
            );
        }
        if self.max_seq < 4 {
            bail!(Input, "max_seq {} cannot hold the special tokens", self.max_seq);
        }
        if self.vocab_size <= TARGET as usize {
            bail!(Input, "vocabulary of {} lacks the special tokens", self.vocab_size);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Input, "dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }

    /// Closed-form number of trainable encoder weights.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        let embeddings = (self.vocab_size + self.max_seq) * d;
        let per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let head = 2 * d + d * d + d;
        embeddings + self.layers * per_layer + head
    }

    /// Multiply-add count (x2) of the attention score and mixing products in
    /// one forward pass over `seq_len` positions.
    pub fn attention_flops(&self, seq_len: usize) -> u64 {
        (self.layers * 4 * seq_len * seq_len * self.hidden_dim) as u64
    }

    /// Approximate forward FLOPs for one sequence: projections, feed-forward,
    /// attention, and the output head for `outputs` rows.
    pub fn forward_flops(&self, seq_len: usize, outputs: usize) -> u64 {
        let (s, d, f) = (seq_len, self.hidden_dim, self.ffn_dim);
        let dense = self.layers * (8 * s * d * d + 4 * s * d * f);
        (dense + 2 * outputs * d * d) as u64 + self.attention_flops(seq_len)
    }
}

const PER_LAYER: usize = 16;

/// Named weights in a fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.hidden_dim, config.ffn_dim);
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq, d]),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ffn.w1"), vec![d, f]),
            (p("ffn.b1"), vec![f]),
            (p("ffn.w2"), vec![f, d]),
            (p("ffn.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("final_ln.gain".to_string(), vec![d]),
        ("final_ln.bias".to_string(), vec![d]),
        ("proj.weight".to_string(), vec![d, d]),
        ("proj.bias".to_string(), vec![d]),
    ]);
    out
}

impl EncoderParams {
    /// Seeded initialization: Xavier-uniform matrices, N(0, 0.02) embedding
    /// tables, unit layer-norm gains and zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("_emb") {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(EncoderParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub(crate) fn from_named(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expect = layout(&config);
        if named.len() != expect.len() {
            bail!(Format, "expected {} encoder tensors, found {}", expect.len(), named.len());
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (want, shape)) in named.into_iter().zip(expect) {
            if name != want || t.shape() != shape.as_slice() {
                bail!(Format, "tensor {name} {:?} where {want} {shape:?} was expected", t.shape());
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(EncoderParams {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records the weights on `g`, trainable when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t)
                } else {
                    g.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"))
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Encoder weights recorded on a graph, in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[2 + l * PER_LAYER + k]
    }

    fn head(&self, layers: usize, k: usize) -> Var {
        self.vars[2 + layers * PER_LAYER + k]
    }
}

/// One encoder input: the special-token prefix and the metadata tokens.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub prefix: &'a [u32],
    pub tokens: &'a [u32],
}

const SIMO_PREFIX: [u32; 3] = [Q_VIEW, Q_BUY, TARGET];

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Runs the encoder over `inputs` and returns the L2-normalized embeddings
/// of every prefix position, input-major: row `i * prefix_len + j` belongs to
/// the `j`-th special token of input `i`. Metadata beyond `max_seq` is
/// truncated.
pub fn encode_prefixes(
    g: &mut Graph,
    params: &BoundParams,
    config: &EncoderConfig,
    inputs: &[Input<'_>],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    metrics::record_encoder_call();
    if inputs.is_empty() {
        bail!(Input, "no encoder inputs");
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(inputs.len());
    let mut out_rows = Vec::new();
    for inp in inputs {
        let keep = config.max_seq.saturating_sub(inp.prefix.len());
        if inp.prefix.is_empty() || keep == 0 {
            bail!(Input, "prefix of {} tokens does not fit max_seq", inp.prefix.len());
        }
        let tokens = &inp.tokens[..inp.tokens.len().min(keep)];
        let start = ids.len();
        ids.extend(inp.prefix.iter().chain(tokens).map(|&t| t as usize));
        let len = inp.prefix.len() + tokens.len();
        positions.extend(0..len);
        segments.push(Segment { start, len });
        out_rows.extend(start..start + inp.prefix.len());
    }

    let (layers, heads) = (config.layers, config.heads);
    let tok = g.embedding(params.vars[0], &ids)?;
    let pos = g.embedding(params.vars[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    let mut rng = dropout_rng;
    let rate = config.dropout;
    for l in 0..layers {
        let p = |k| params.layer(l, k);
        let h = g.layer_norm(x, p(0), p(1), LN_EPS)?;
        let q = linear(g, h, p(2), p(3))?;
        let k = linear(g, h, p(4), p(5))?;
        let v = linear(g, h, p(6), p(7))?;
        let a = g.attention(q, k, v, heads, &segments)?;
        let mut o = linear(g, a, p(8), p(9))?;
        if let Some(r) = rng.as_deref_mut() {
            o = g.dropout(o, rate, r)?;
        }
        x = g.add(x, o)?;
        let h = g.layer_norm(x, p(10), p(11), LN_EPS)?;
        let f = linear(g, h, p(12), p(13))?;
        let f = g.gelu(f);
        let mut f = linear(g, f, p(14), p(15))?;
        if let Some(r) = rng.as_deref_mut() {
            f = g.dropout(f, rate, r)?;
        }
        x = g.add(x, f)?;
    }
    // Layer norm is row-wise, so only the prefix rows need the head.
    let heads_in = g.gather_rows(x, &out_rows)?;
    let h = g.layer_norm(heads_in, params.head(layers, 0), params.head(layers, 1), LN_EPS)?;
    let y = linear(g, h, params.head(layers, 2), params.head(layers, 3))?;
    g.l2_normalize_rows(y)
}

/// Three unit vectors for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    pub item_id: ItemId,
    pub q_view: Vec<f32>,
    pub q_buy: Vec<f32>,
    pub target: Vec<f32>,
}

impl ItemEmbeddings {
    pub fn role(&self, role: Role) -> &[f32] {
        match role {
            Role::View => &self.q_view,
            Role::Buy => &self.q_buy,
            Role::Target => &self.target,
        }
    }
}

fn to_f32_unit(row: &[f64]) -> Vec<f32> {
    let v: Vec<f32> = row.iter().map(|&x| x as f32).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Inference wrapper around trained weights.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub params: EncoderParams,
    pub mode: EncoderMode,
}

impl Encoder {
    pub fn new(params: EncoderParams, mode: EncoderMode) -> Self {
        Encoder { params, mode }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.params.config()
    }

    fn run(&self, inputs: &[Input<'_>]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g, false);
        let out = encode_prefixes(&mut g, &bound, self.config(), inputs, None)?;
        let d = self.config().hidden_dim;
        Ok(g.value(out).chunks_exact(d).map(to_f32_unit).collect())
    }

    /// All three role embeddings in one pass: `[view, buy, target]`.
    pub fn forward_simo(&self, tokens: &[u32]) -> Result<[Vec<f32>; 3]> {
        let rows = self.run(&[Input {
            prefix: &SIMO_PREFIX,
            tokens,
        }])?;
        let [v, b, t] = <[Vec<f32>; 3]>::try_from(rows).expect("three prefix rows");
        Ok([v, b, t])
    }

    /// One role embedding from a single-role pass.
    pub fn forward_siso(&self, tokens: &[u32], role: Role) -> Result<Vec<f32>> {
        let prefix = [role_token(role)];
        let mut rows = self.run(&[Input {
            prefix: &prefix,
            tokens,
        }])?;
        Ok(rows.remove(0))
    }

    /// Embeds a batch of items with all three roles, using one pass per item
    /// in three-output mode and three passes per item otherwise.
    pub fn embed_batch(&self, items: &[(&ItemId, &[u32])]) -> Result<Vec<ItemEmbeddings>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let triples: Vec<[Vec<f32>; 3]> = match self.mode {
            EncoderMode::Simo => {
                let inputs: Vec<Input> = items
                    .iter()
                    .map(|(_, t)| Input {
                        prefix: &SIMO_PREFIX,
                        tokens: t,
                    })
                    .collect();
                let rows = self.run(&inputs)?;
                rows.chunks_exact(3)
                    .map(|c| [c[0].clone(), c[1].clone(), c[2].clone()])
                    .collect()
            }
            EncoderMode::Siso => {
                let prefixes = Role::ALL.map(|r| [role_token(r)]);
                let mut per_role = Vec::with_capacity(3);
                for prefix in &prefixes {
                    let inputs: Vec<Input> = items
                        .iter()
                        .map(|(_, t)| Input { prefix, tokens: t })
                        .collect();
                    per_role.push(self.run(&inputs)?);
                }
                let [mut v, mut b, mut t] =
                    <[Vec<Vec<f32>>; 3]>::try_from(per_role).expect("three roles");
                (0..items.len())
                    .map(|i| {
                        [
                            std::mem::take(&mut v[i]),
                            std::mem::take(&mut b[i]),
                            std::mem::take(&mut t[i]),
                        ]
                    })
                    .collect()
            }
        };
        Ok(items
            .iter()
            .zip(triples)
            .map(|((id, _), [q_view, q_buy, target])| ItemEmbeddings {
                item_id: (*id).clone(),
                q_view,
                q_buy,
                target,
            })
            .collect())
    }
}
