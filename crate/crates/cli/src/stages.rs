//! One function per subcommand. Each reads the artifacts of earlier stages
//! and writes its own through a temp file and rename.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use feedkit_core::embeddings::EmbeddingTable;
use feedkit_core::encoder::Checkpoint;
use feedkit_core::eval::{
    classify_by_relation, interaction_counts, rank_targets, segment_by_popularity, summarize, ModelLabel, Report,
};
use feedkit_core::experiment::{embed_model, fit, Corpus, Holdout};
use feedkit_core::feed::{
    batch_refresh, build_eligible_set, compose_feed_with, incremental_refresh, FeedItem, FeedOptions, Profiles,
    Surface,
};
use feedkit_core::index::Index;
use feedkit_core::io::{open, read_jsonl, write_atomic, write_jsonl};
use feedkit_core::mining::{
    mine_buy_buy, mine_view_buy, read_pairs, sample_negative_items, split_pairs, write_pairs, QueryTargetPair, Splits,
};
use feedkit_core::store::{compute_threshold, SimilarityStore};
use feedkit_core::synth::generate_synthetic_world;
use feedkit_core::tokenizer::Vocabulary;
use feedkit_core::trainer::{write_trace, Model};
use feedkit_core::types::Role;
use feedkit_core::{Catalog, Event, Item, ItemId};

use crate::config::{stream, PipelineConfig};

pub struct Ctx {
    pub cfg: PipelineConfig,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        Ctx { cfg }
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.paths.resolve(p)
    }
}

/// Errors out with a pointer to the stage that produces `path`.
fn require(path: &Path, stage: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!("{} not found: run stage `{stage}` first", path.display());
    }
    Ok(path.to_path_buf())
}

/// Prints to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> feedkit_core::Result<()>,
{
    write_atomic(path, fill).with_context(|| format!("writing {}", path.display()))
}

pub fn load_catalog(ctx: &Ctx, override_path: Option<&Path>) -> Result<Catalog> {
    let p = match override_path {
        Some(p) => require(p, "synth")?,
        None => require(&ctx.path(&ctx.cfg.paths.catalog), "synth")?,
    };
    let items: Vec<Item> = read_jsonl(open(&p)?).with_context(|| format!("reading {}", p.display()))?;
    Ok(Catalog::new(items)?)
}

pub fn load_events(ctx: &Ctx) -> Result<Vec<Event>> {
    let p = require(&ctx.path(&ctx.cfg.paths.events), "synth")?;
    let events: Vec<Event> = read_jsonl(open(&p)?).with_context(|| format!("reading {}", p.display()))?;
    for e in &events {
        e.validate()?;
    }
    Ok(events)
}

fn load_pairs(ctx: &Ctx) -> Result<Vec<QueryTargetPair>> {
    let p = require(&ctx.path(&ctx.cfg.paths.pairs), "mine")?;
    Ok(read_pairs(open(&p)?)?)
}

fn load_vocab(ctx: &Ctx) -> Result<Vocabulary> {
    let p = require(&ctx.path(&ctx.cfg.paths.vocab), "tokenizer-train")?;
    Ok(Vocabulary::read_from(open(&p)?)?)
}

fn load_model(ctx: &Ctx) -> Result<Model> {
    let p = require(&ctx.path(&ctx.cfg.paths.checkpoint), "train")?;
    Ok(Model::from_checkpoint(Checkpoint::read_from(&mut open(&p)?)?)?)
}

fn load_embeddings(ctx: &Ctx) -> Result<EmbeddingTable> {
    let p = require(&ctx.path(&ctx.cfg.paths.embeddings), "embed")?;
    Ok(EmbeddingTable::read_from(&mut open(&p)?)?)
}

fn load_index(ctx: &Ctx) -> Result<Index> {
    let p = require(&ctx.path(&ctx.cfg.paths.index), "index")?;
    Ok(Index::read_from(&mut open(&p)?)?)
}

fn is_binary_store(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "pfs")
}

pub fn load_store(ctx: &Ctx, override_path: Option<&Path>) -> Result<SimilarityStore> {
    let p = match override_path {
        Some(p) => require(p, "precompute")?,
        None => require(&ctx.path(&ctx.cfg.paths.store), "precompute")?,
    };
    let store = if is_binary_store(&p) {
        SimilarityStore::read_binary(&mut open(&p)?)?
    } else {
        SimilarityStore::read_text(open(&p)?)?
    };
    Ok(store)
}

pub fn load_profiles(ctx: &Ctx, catalog: &Catalog) -> Result<Profiles> {
    let events = load_events(ctx)?;
    let mut profiles = Profiles::new(ctx.cfg.feed.max_queries);
    profiles.ingest_all(&events, catalog);
    if profiles.skipped > 0 {
        log::warn!("{} events refer to items outside the catalog", profiles.skipped);
    }
    Ok(profiles)
}

pub fn feed_options(ctx: &Ctx) -> FeedOptions {
    FeedOptions {
        max_run: ctx.cfg.feed.max_run,
        filter: None,
    }
}

fn splits(ctx: &Ctx) -> Result<Splits> {
    Ok(split_pairs(&load_pairs(ctx)?, ctx.cfg.stage_seed(stream::SPLIT)))
}

fn catalog_ids(catalog: &Catalog) -> Vec<ItemId> {
    catalog.ids().cloned().collect()
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let world = generate_synthetic_world(&ctx.cfg.synth)?;
    write(&ctx.path(&ctx.cfg.paths.catalog), |w| {
        writeln!(w, "# seed={}", ctx.cfg.seed)?;
        write_jsonl(w, world.catalog.items())
    })?;
    write(&ctx.path(&ctx.cfg.paths.events), |w| {
        writeln!(w, "# seed={}", ctx.cfg.seed)?;
        write_jsonl(w, &world.events)
    })?;
    println!("synth: {} items, {} events", world.catalog.len(), world.events.len());
    Ok(())
}

pub fn mine(ctx: &Ctx) -> Result<()> {
    let events = load_events(ctx)?;
    let m = &ctx.cfg.mine;
    let mut pairs = mine_view_buy(&events, m.top_n, m.min_count);
    let n_view = pairs.len();
    pairs.extend(mine_buy_buy(&events, m.horizon_days, m.top_n, m.min_count));
    if pairs.is_empty() {
        bail!("no pairs reach min_count {}; the event log is too sparse", m.min_count);
    }
    write(&ctx.path(&ctx.cfg.paths.pairs), |w| {
        writeln!(w, "# seed={}", ctx.cfg.seed)?;
        write_pairs(w, &pairs)
    })?;
    println!("mine: {n_view} view-buy pairs, {} buy-buy pairs", pairs.len() - n_view);
    Ok(())
}

pub fn tokenizer_train(ctx: &Ctx) -> Result<()> {
    let catalog = load_catalog(ctx, None)?;
    let corpus: Vec<String> = catalog.items().iter().map(Item::metadata).collect();
    let vocab = Vocabulary::train(&corpus, ctx.cfg.tokenizer.vocab_size)?;
    write(&ctx.path(&ctx.cfg.paths.vocab), |w| vocab.write_to(w))?;
    println!("tokenizer-train: {} tokens", vocab.len());
    Ok(())
}

fn max_tokens(ctx: &Ctx) -> usize {
    ctx.cfg.model.max_seq.saturating_sub(ctx.cfg.model.mode.prefix_len())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let catalog = load_catalog(ctx, None)?;
    let vocab = load_vocab(ctx)?;
    let split = splits(ctx)?;
    // the split lists view pairs before buy pairs, so subsets need a shuffle
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.stage_seed(stream::SELECT));
    let (mut train_pairs, mut valid) = (split.train, split.valid);
    train_pairs.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    let sel = &ctx.cfg.selection;
    if sel.max_pairs > 0 {
        train_pairs.truncate(sel.max_pairs);
    }
    let holdout = if sel.valid_pairs > 0 && !valid.is_empty() {
        let ids = catalog_ids(&catalog);
        let n = sel.valid_distractors.min(ids.len());
        valid.truncate(sel.valid_pairs);
        Some(Holdout {
            pairs: valid,
            distractors: sample_negative_items(&ids, n, ctx.cfg.stage_seed(stream::SELECT))?,
            k: ctx.cfg.eval.k,
        })
    } else {
        None
    };
    let corpus = Corpus::new(&catalog, &vocab, max_tokens(ctx));
    let enc = ctx.cfg.model.encoder(vocab.len());
    let t = &ctx.cfg.train;
    let model = Model::init(&enc, t.mode, t.beta_init, t.seed)?;
    let fitted = fit(model, &corpus, &train_pairs, t, holdout.as_ref())?;
    write(&ctx.path(&ctx.cfg.paths.checkpoint), |w| {
        fitted.model.to_checkpoint(ctx.cfg.seed).write_to(w)
    })?;
    write(&ctx.path(&ctx.cfg.paths.trace), |w| {
        writeln!(w, "# seed={}", ctx.cfg.seed)?;
        write_trace(w, &fitted.trace)
    })?;
    let first = fitted.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = fitted.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "train: {} pairs, {} steps, loss {first:.4} -> {last:.4}, kept epoch {}, beta {:.3}",
        train_pairs.len(),
        fitted.trace.len(),
        fitted.best_epoch + 1,
        fitted.model.beta()
    );
    Ok(())
}

pub fn embed(ctx: &Ctx) -> Result<()> {
    let catalog = load_catalog(ctx, None)?;
    let vocab = load_vocab(ctx)?;
    let model = load_model(ctx)?;
    let table = embed_model(&model, &vocab, &catalog)?;
    write(&ctx.path(&ctx.cfg.paths.embeddings), |w| table.write_to(w))?;
    println!("embed: {} items, dimension {}", table.len(), table.dim());
    Ok(())
}

pub fn index(ctx: &Ctx) -> Result<()> {
    let table = load_embeddings(ctx)?;
    let ids: Vec<ItemId> = table.rows().iter().map(|r| r.item_id.clone()).collect();
    let vectors: Vec<Vec<f32>> = table.rows().iter().map(|r| r.role(Role::Target).to_vec()).collect();
    let mut ivf = ctx.cfg.index.ivf.clone();
    ivf.clusters = ivf.clusters.min(ids.len().max(1));
    let index = Index::build(ids, vectors, ctx.cfg.index.variant, &ivf)?;
    write(&ctx.path(&ctx.cfg.paths.index), |w| index.write_to(w))?;
    println!("index: {} vectors, {:?}", index.len(), index.variant());
    Ok(())
}

pub fn precompute(ctx: &Ctx) -> Result<()> {
    let table = load_embeddings(ctx)?;
    let index = load_index(ctx)?;
    let split = splits(ctx)?;
    let held_out = if split.valid.is_empty() { &split.train } else { &split.valid };
    let threshold = compute_threshold(held_out, &table, ctx.cfg.feed.percentile)?;
    let store = SimilarityStore::precompute(&index, &table, ctx.cfg.feed.m, threshold.tau)?;
    let path = ctx.path(&ctx.cfg.paths.store);
    if is_binary_store(&path) {
        write(&path, |w| store.write_binary(w))?;
    } else {
        write(&path, |w| {
            writeln!(w, "# seed={}", ctx.cfg.seed)?;
            store.write_text(w)
        })?;
    }
    println!(
        "precompute: tau {:.6} from {} held-out pairs, {} lists, {} results",
        threshold.tau,
        threshold.support,
        store.len(),
        store.result_count()
    );
    Ok(())
}

pub fn feed(ctx: &Ctx, customer: &str, surface: Option<Surface>, size: Option<usize>) -> Result<()> {
    let catalog = load_catalog(ctx, None)?;
    let store = load_store(ctx, None)?;
    let profiles = load_profiles(ctx, &catalog)?;
    let surface = surface.unwrap_or(ctx.cfg.feed.surface);
    let eligible = build_eligible_set(&catalog, surface);
    let items: Vec<FeedItem> = match profiles.get(customer) {
        Some(p) => compose_feed_with(
            p,
            &store,
            &catalog,
            &eligible,
            size.unwrap_or(ctx.cfg.feed.feed_size),
            &feed_options(ctx),
        ),
        None => {
            log::warn!("no events for customer {customer}");
            Vec::new()
        }
    };
    emit(&(serde_json::to_string_pretty(&items)? + "\n"))
}

#[derive(Serialize)]
struct FeedRecord<'a> {
    customer_id: &'a str,
    surface: Surface,
    items: &'a [FeedItem],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RefreshMode {
    Batch,
    Incremental,
}

pub struct RefreshArgs {
    pub mode: RefreshMode,
    pub active: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub surface: Option<Surface>,
    pub every: u64,
    pub rounds: u64,
}

fn read_active(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn refresh_once(ctx: &Ctx, args: &RefreshArgs) -> Result<usize> {
    let catalog = load_catalog(ctx, None)?;
    let store = load_store(ctx, None)?;
    let profiles = load_profiles(ctx, &catalog)?;
    let surface = args.surface.unwrap_or(ctx.cfg.feed.surface);
    let eligible = build_eligible_set(&catalog, surface);
    let size = ctx.cfg.feed.feed_size;
    let opts = feed_options(ctx);
    let feeds = match args.mode {
        RefreshMode::Batch => batch_refresh(&profiles, &store, &catalog, &eligible, size, &opts),
        RefreshMode::Incremental => {
            let Some(active) = &args.active else {
                bail!("incremental refresh needs --active <file>");
            };
            incremental_refresh(&read_active(active)?, &profiles, &store, &catalog, &eligible, size, &opts)
        }
    };
    let out = match &args.out {
        Some(p) => p.clone(),
        None => ctx.path(&ctx.cfg.paths.reports).join("feeds.jsonl"),
    };
    let records: Vec<FeedRecord> = feeds
        .iter()
        .map(|(c, items)| FeedRecord {
            customer_id: c,
            surface,
            items,
        })
        .collect();
    write(&out, |w| {
        writeln!(w, "# seed={}", ctx.cfg.seed)?;
        write_jsonl(w, &records)
    })?;
    Ok(feeds.len())
}

pub fn refresh(ctx: &Ctx, args: &RefreshArgs) -> Result<()> {
    let mut round = 0u64;
    loop {
        let start = std::time::Instant::now();
        let n = refresh_once(ctx, args)?;
        println!("refresh: {n} feeds in {:.3}s", start.elapsed().as_secs_f64());
        round += 1;
        if args.every == 0 || (args.rounds > 0 && round >= args.rounds) {
            return Ok(());
        }
        std::thread::sleep(std::time::Duration::from_secs(args.every));
    }
}

pub fn eval(ctx: &Ctx, untrained: bool) -> Result<()> {
    let catalog = load_catalog(ctx, None)?;
    let vocab = load_vocab(ctx)?;
    let split = splits(ctx)?;
    if split.test.is_empty() {
        bail!("the test split is empty; mine more pairs");
    }
    let model = if untrained {
        let t = &ctx.cfg.train;
        Model::init(&ctx.cfg.model.encoder(vocab.len()), t.mode, t.beta_init, t.seed)?
    } else {
        load_model(ctx)?
    };
    let table = embed_model(&model, &vocab, &catalog)?;
    let e = &ctx.cfg.eval;
    let ids = catalog_ids(&catalog);
    let distractors = sample_negative_items(&ids, e.distractor_count.min(ids.len()), e.seed)?;
    let ranks = rank_targets(&split.test, &table, &distractors)?;
    let popularity = segment_by_popularity(&split.test, &interaction_counts(&split.train));
    let relationships = classify_by_relation(&split.test);
    let sampling = ctx.cfg.train.sampling.as_str().to_string();
    let dim = model.params.config().hidden_dim;
    let mode = format!("{:?}", model.mode).to_lowercase();
    let label = ModelLabel {
        config: format!("{mode}-{dim}-{sampling}{}", if untrained { "-untrained" } else { "" }),
        dimension: dim,
        sampling,
    };
    let mut report = Report {
        header: serde_json::Map::new(),
        records: summarize(&label, &split.test, &ranks, e.k, &popularity, &relationships),
    };
    let baseline = e.k as f64 / (distractors.len() + 1) as f64;
    for (k, v) in [
        ("seed", serde_json::json!(ctx.cfg.seed)),
        ("k", serde_json::json!(e.k)),
        ("distractors", serde_json::json!(distractors.len())),
        ("test_pairs", serde_json::json!(split.test.len())),
        ("random_baseline", serde_json::json!(baseline)),
        ("untrained", serde_json::json!(untrained)),
        ("model", serde_json::to_value(&ctx.cfg.model)?),
    ] {
        report.header.insert(k.into(), v);
    }
    let dir = ctx.path(&ctx.cfg.paths.reports);
    let stem = if untrained { "eval-untrained" } else { "eval" };
    write(&dir.join(format!("{stem}.jsonl")), |w| report.write_jsonl(w))?;
    write(&dir.join(format!("{stem}.txt")), |w| report.write_table(w))?;
    let mut table = Vec::new();
    report.write_table(&mut table)?;
    emit(&String::from_utf8_lossy(&table))
}
