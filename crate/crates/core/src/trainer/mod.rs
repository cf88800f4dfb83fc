//! Contrastive training of the shared encoder on (query, relation, target)
//! pairs.
//!
//! One parameter set serves both the query and target towers. The objective
//! is the sum of a query-to-target and a target-to-query softmax loss whose
//! candidate sets depend on the [`Sampling`] strategy. The softmax scale is
//! learned as `log beta`.

mod loss;
mod optim;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{
    encode_prefixes, BoundParams, Checkpoint, Encoder, EncoderConfig, EncoderMode,
    EncoderParams, Input,
};
use crate::error::{bail, Error, Result};
use crate::tokenizer::{Q_BUY, Q_VIEW, TARGET};
use crate::types::{Relation, Role};

pub use loss::{loss_query_to_target, loss_target_to_query, UNIT_NORM_TOL};
pub use optim::{clip_global_norm, Adam, OptimizerKind};

/// Negative sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Other positives in the batch.
    InBatch,
    /// Uniformly sampled items only.
    Uniform,
    /// In-batch plus uniform.
    Mixed,
    /// Mixed, plus each buy pair's own items in the opposite role.
    MixedPlusSelf,
}

impl Sampling {
    pub const ALL: [Sampling; 4] = [
        Sampling::InBatch,
        Sampling::Uniform,
        Sampling::Mixed,
        Sampling::MixedPlusSelf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::InBatch => "in_batch",
            Sampling::Uniform => "uniform",
            Sampling::Mixed => "mixed",
            Sampling::MixedPlusSelf => "mixed_plus_self",
        }
    }

    pub fn uses_in_batch(self) -> bool {
        self != Sampling::Uniform
    }

    pub fn uses_uniform(self) -> bool {
        self != Sampling::InBatch
    }

    pub fn uses_self(self) -> bool {
        self == Sampling::MixedPlusSelf
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sampling::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown sampling strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub uniform_negatives: usize,
    pub sampling: Sampling,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub beta_init: f64,
    pub optimizer: OptimizerKind,
    pub mode: EncoderMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            uniform_negatives: 64,
            sampling: Sampling::MixedPlusSelf,
            epochs: 10,
            learning_rate: 1e-3,
            clip_norm: 0.5,
            seed: 0,
            beta_init: 10.0,
            optimizer: OptimizerKind::Adam,
            mode: EncoderMode::Simo,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampling.uses_in_batch() && self.batch_size < 2 {
            bail!(Contract, "{} sampling needs batch_size >= 2", self.sampling);
        }
        if self.batch_size == 0 {
            bail!(Contract, "batch_size must be positive");
        }
        if self.sampling.uses_uniform() && self.uniform_negatives == 0 {
            bail!(Contract, "{} sampling needs uniform_negatives > 0", self.sampling);
        }
        if !(self.clip_norm > 0.0) {
            bail!(Contract, "clip_norm must be positive, got {}", self.clip_norm);
        }
        if !(self.learning_rate > 0.0) || !(self.beta_init > 0.0) {
            bail!(Contract, "learning_rate and beta_init must be positive");
        }
        Ok(())
    }
}

/// A positive example as token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub query: Vec<u32>,
    pub relation: Relation,
    pub target: Vec<u32>,
}

/// One optimizer step's worth of examples.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub pairs: Vec<(&'a [u32], Relation, &'a [u32])>,
    pub negatives: Vec<&'a [u32]>,
}

impl<'a> Batch<'a> {
    pub fn new(pairs: &[&'a TrainPair], negatives: Vec<&'a [u32]>) -> Self {
        Batch {
            pairs: pairs
                .iter()
                .map(|p| (p.query.as_slice(), p.relation, p.target.as_slice()))
                .collect(),
            negatives,
        }
    }

    fn validate(&self, sampling: Sampling) -> Result<()> {
        if self.pairs.is_empty() {
            bail!(Contract, "empty batch");
        }
        if sampling.uses_in_batch() && self.pairs.len() < 2 {
            bail!(Contract, "{sampling} sampling needs at least two pairs per batch");
        }
        if sampling.uses_uniform() == self.negatives.is_empty() {
            bail!(
                Contract,
                "{sampling} sampling with {} uniform negatives",
                self.negatives.len()
            );
        }
        Ok(())
    }
}

/// Picks the query embedding matching the relation.
pub fn select_query_embedding(emb: &crate::encoder::ItemEmbeddings, relation: Relation) -> &[f32] {
    emb.role(Role::from(relation))
}

/// Encoder weights plus the learned softmax scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: EncoderParams,
    pub log_beta: f64,
    pub mode: EncoderMode,
}

impl Model {
    pub fn init(config: &EncoderConfig, mode: EncoderMode, beta_init: f64, seed: u64) -> Result<Self> {
        if !(beta_init > 0.0) {
            bail!(Input, "beta_init must be positive, got {beta_init}");
        }
        Ok(Model {
            params: EncoderParams::init(config, seed)?,
            log_beta: beta_init.ln(),
            mode,
        })
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn encoder(&self) -> Encoder {
        Encoder::new(self.params.clone(), self.mode)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            mode: self.mode,
            seed,
            extras: vec![("log_beta".into(), Tensor::scalar(self.log_beta))],
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let log_beta = match ck.extra("log_beta") {
            Some(t) => t.data()[0],
            None => bail!(Format, "checkpoint has no log_beta"),
        };
        Ok(Model {
            params: ck.params,
            log_beta,
            mode: ck.mode,
        })
    }
}

/// Loss nodes for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub l2: Var,
    /// Candidates per anchor in the query-to-target and target-to-query
    /// softmaxes, positive included.
    pub candidates: [usize; 2],
}

/// Rows of the encoder output for each (item, role) request.
struct Embedded {
    out: Var,
    rows: HashMap<(usize, Role), usize>,
}

fn embed(
    g: &mut Graph,
    bound: &BoundParams,
    config: &EncoderConfig,
    mode: EncoderMode,
    items: &[&[u32]],
    needed: &[(usize, Role)],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Embedded> {
    const SIMO: [u32; 3] = [Q_VIEW, Q_BUY, TARGET];
    const SISO: [[u32; 1]; 3] = [[Q_VIEW], [Q_BUY], [TARGET]];
    let mut rows = HashMap::new();
    let inputs: Vec<Input> = match mode {
        EncoderMode::Simo => {
            for &(i, r) in needed {
                rows.insert((i, r), 3 * i + r.slot());
            }
            items.iter().map(|t| Input { prefix: &SIMO, tokens: t }).collect()
        }
        EncoderMode::Siso => {
            let mut inputs = Vec::new();
            for &(i, r) in needed {
                rows.entry((i, r)).or_insert_with(|| {
                    inputs.push(Input {
                        prefix: &SISO[r.slot()],
                        tokens: items[i],
                    });
                    inputs.len() - 1
                });
            }
            inputs
        }
    };
    let out = encode_prefixes(g, bound, config, &inputs, rng)?;
    Ok(Embedded { out, rows })
}

impl Embedded {
    fn gather(&self, g: &mut Graph, keys: impl IntoIterator<Item = (usize, Role)>) -> Result<Var> {
        let idx: Vec<usize> = keys.into_iter().map(|k| self.rows[&k]).collect();
        g.gather_rows(self.out, &idx)
    }
}

/// Records the full objective for `batch` on `g`.
pub fn build_loss(
    g: &mut Graph,
    bound: &BoundParams,
    log_beta: Var,
    config: &EncoderConfig,
    mode: EncoderMode,
    batch: &Batch<'_>,
    sampling: Sampling,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    batch.validate(sampling)?;
    let b = batch.pairs.len();
    let n = batch.negatives.len();
    let rels: Vec<Relation> = batch.pairs.iter().map(|p| p.1).collect();
    let buys: Vec<usize> = (0..b).filter(|&i| rels[i] == Relation::Buy).collect();
    let with_self = sampling.uses_self() && !buys.is_empty();

    let mut items: Vec<&[u32]> = batch.pairs.iter().map(|p| p.0).collect();
    items.extend(batch.pairs.iter().map(|p| p.2));
    items.extend(batch.negatives.iter().copied());

    let q_keys: Vec<(usize, Role)> = (0..b).map(|i| (i, Role::from(rels[i]))).collect();
    let t_keys: Vec<(usize, Role)> = (0..b).map(|i| (b + i, Role::Target)).collect();
    let neg_roles: Vec<Role> = [Relation::View, Relation::Buy]
        .into_iter()
        .filter(|r| rels.contains(r))
        .map(Role::from)
        .collect();
    let mut needed = q_keys.clone();
    needed.extend(&t_keys);
    for j in 0..n {
        needed.push((2 * b + j, Role::Target));
        needed.extend(neg_roles.iter().map(|&r| (2 * b + j, r)));
    }
    if with_self {
        for &i in &buys {
            needed.push((i, Role::Target));
            needed.push((b + i, Role::Buy));
        }
    }
    let emb = embed(g, bound, config, mode, &items, &needed, dropout_rng)?;

    let q = emb.gather(g, q_keys)?;
    let t = emb.gather(g, t_keys)?;
    let mut extra_qt = Vec::new();
    let mut extra_tq = Vec::new();
    if n > 0 {
        let t_neg = emb.gather(g, (0..n).map(|j| (2 * b + j, Role::Target)))?;
        extra_qt.push(g.matmul_nt(q, t_neg)?);
        let mut per_role = Vec::new();
        for &r in &neg_roles {
            let q_neg = emb.gather(g, (0..n).map(|j| (2 * b + j, r)))?;
            per_role.push((r, g.matmul_nt(t, q_neg)?));
        }
        let sims = match per_role[..] {
            [(_, s)] => s,
            [(Role::View, sv), (_, sb)] => {
                let mask: Vec<bool> = rels.iter().map(|&r| r == Relation::View).collect();
                g.select_rows(&mask, sv, sb)?
            }
            _ => unreachable!("one or two query roles"),
        };
        extra_tq.push(sims);
    }
    if with_self {
        let t_self = emb.gather(g, buys.iter().map(|&i| (i, Role::Target)))?;
        extra_qt.push(g.matmul_nt(q, t_self)?);
        let q_self = emb.gather(g, buys.iter().map(|&i| (b + i, Role::Buy)))?;
        extra_tq.push(g.matmul_nt(t, q_self)?);
    }

    let beta = g.exp(log_beta);
    let in_batch = sampling.uses_in_batch();
    let (l1, c1) = loss::direction_loss(g, q, t, &extra_qt, beta, in_batch)?;
    let (l2, c2) = loss::direction_loss(g, t, q, &extra_tq, beta, in_batch)?;
    let total = g.add(l1, l2)?;
    Ok(LossTerms {
        total,
        l1,
        l2,
        candidates: [c1, c2],
    })
}

/// Loss values for one batch without recording gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub candidates: [usize; 2],
}

pub fn total_loss(batch: &Batch<'_>, model: &Model, sampling: Sampling) -> Result<LossValue> {
    let mut g = Graph::inference();
    let bound = model.params.bind(&mut g, false);
    let lb = g.scalar(model.log_beta);
    let terms = build_loss(&mut g, &bound, lb, model.params.config(), model.mode, batch, sampling, None)?;
    Ok(LossValue {
        total: g.item(terms.total),
        l1: g.item(terms.l1),
        l2: g.item(terms.l2),
        candidates: terms.candidates,
    })
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub beta: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn write_trace(w: &mut dyn Write, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "step\tloss\tl1\tl2\tbeta\tgrad_norm")?;
    for r in trace {
        writeln!(
            w,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.step, r.loss, r.l1, r.l2, r.beta, r.grad_norm
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// Trains a freshly initialized model seeded from `config.seed`.
pub fn train(
    pairs: &[TrainPair],
    negative_pool: &[Vec<u32>],
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::init(encoder, config.mode, config.beta_init, config.seed)?;
    train_model(model, pairs, negative_pool, config)
}

/// Continues training `model`. Each epoch visits the pairs in a seeded
/// shuffle; a trailing batch too small for in-batch negatives is skipped.
/// Uniform negatives are drawn without replacement from `negative_pool` at
/// every step.
pub fn train_model(
    model: Model,
    pairs: &[TrainPair],
    negative_pool: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_model_observed(model, pairs, negative_pool, config, |_, _| Ok(()))
}

/// [`train_model`] calling `on_epoch(epoch, model)` after every epoch, e.g.
/// to keep the best model on held-out pairs.
pub fn train_model_observed(
    mut model: Model,
    pairs: &[TrainPair],
    negative_pool: &[Vec<u32>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        bail!(Input, "no training pairs");
    }
    if config.mode != model.mode {
        bail!(Input, "model is {:?} but config asks for {:?}", model.mode, config.mode);
    }
    let n_neg = if config.sampling.uses_uniform() {
        config.uniform_negatives
    } else {
        0
    };
    if n_neg > negative_pool.len() {
        bail!(
            Input,
            "{} uniform negatives requested from a pool of {}",
            n_neg,
            negative_pool.len()
        );
    }
    let min_batch = if config.sampling.uses_in_batch() { 2 } else { 1 };
    let enc_cfg = model.params.config().clone();
    let mut sizes: Vec<usize> = model.params.tensors().iter().map(Tensor::numel).collect();
    sizes.push(1);
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7f4a_7c15));
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let refs: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let negatives: Vec<&[u32]> = index::sample(&mut rng, negative_pool.len(), n_neg)
                .into_iter()
                .map(|j| negative_pool[j].as_slice())
                .collect();
            let batch = Batch::new(&refs, negatives);

            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let lb = g.param(&Tensor::scalar(model.log_beta));
            let rng_arg = (enc_cfg.dropout > 0.0).then_some(&mut drop_rng);
            let terms = build_loss(&mut g, &bound, lb, &enc_cfg, model.mode, &batch, config.sampling, rng_arg)?;
            let loss = g.item(terms.total);
            let step = trace.len() + 1;
            if !loss.is_finite() {
                bail!(
                    NonFinite,
                    "loss {loss} at step {step} (epoch {epoch}, beta {})",
                    model.beta()
                );
            }
            g.backward(terms.total)?;
            let mut grads: Vec<Vec<f64>> = bound
                .vars
                .iter()
                .chain(std::iter::once(&lb))
                .zip(&sizes)
                .map(|(&v, &n)| g.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            if !grad_norm.is_finite() {
                bail!(NonFinite, "gradient norm {grad_norm} at step {step}");
            }
            let mut beta_slot = [model.log_beta];
            {
                let mut slots: Vec<&mut [f64]> = model
                    .params
                    .tensors_mut()
                    .iter_mut()
                    .map(Tensor::data_mut)
                    .collect();
                slots.push(&mut beta_slot);
                adam.update(&mut slots, &grads);
            }
            model.log_beta = beta_slot[0];
            trace.push(TraceRow {
                step,
                loss,
                l1: g.item(terms.l1),
                l2: g.item(terms.l2),
                beta: model.beta(),
                grad_norm,
            });
            if step % 50 == 0 {
                log::info!("step {step} epoch {epoch} loss {loss:.4} beta {:.3}", model.beta());
            }
        }
        on_epoch(epoch, &model)?;
    }
    if trace.is_empty() {
        bail!(Input, "no full batch could be formed from {} pairs", pairs.len());
    }
    Ok(TrainOutcome { model, trace })
}
