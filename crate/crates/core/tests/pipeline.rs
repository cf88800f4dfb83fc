//! The whole offline pipeline through the public API on a small world.

use std::io::Cursor;

use feedkit_core::encoder::{Checkpoint, EncoderConfig, EncoderMode};
use feedkit_core::embeddings::EmbeddingTable;
use feedkit_core::eval::recall_at_k;
use feedkit_core::experiment::{embed_model, fit, Corpus, Holdout};
use feedkit_core::feed::{build_eligible_set, compose_feed, Profiles, Surface};
use feedkit_core::index::{Index, IvfParams};
use feedkit_core::mining::{mine_buy_buy, mine_view_buy, read_pairs, sample_negative_items, split_pairs, write_pairs};
use feedkit_core::store::{nearest_rank, SimilarityStore};
use feedkit_core::synth::{generate_synthetic_world, SynthConfig};
use feedkit_core::tokenizer::Vocabulary;
use feedkit_core::trainer::{Model, Sampling, TrainConfig};
use feedkit_core::{Relation, Role};

#[test]
fn small_world_end_to_end() {
    let world = generate_synthetic_world(&SynthConfig {
        categories: 6,
        items_per_category: 40,
        customers: 1500,
        sessions: 6000,
        ..SynthConfig::default()
    })
    .unwrap();

    let mut pairs = mine_view_buy(&world.events, 10_000, 2);
    pairs.extend(mine_buy_buy(&world.events, 90, 10_000, 2));
    assert!(pairs.iter().any(|p| p.relation == Relation::View));
    assert!(pairs.iter().any(|p| p.relation == Relation::Buy));
    let mut buf = Vec::new();
    write_pairs(&mut buf, &pairs).unwrap();
    assert_eq!(read_pairs(Cursor::new(buf)).unwrap(), pairs);

    let splits = split_pairs(&pairs, 0);
    assert_eq!(splits.train.len() + splits.valid.len() + splits.test.len(), pairs.len());

    let titles: Vec<String> = world.catalog.items().iter().map(|i| i.metadata()).collect();
    let vocab = Vocabulary::train(&titles, 300).unwrap();
    let mut enc = EncoderConfig::new(vocab.len(), 32);
    enc.layers = 1;
    enc.heads = 2;
    enc.ffn_dim = 64;
    enc.max_seq = 20;
    let mode = EncoderMode::Simo;
    let corpus = Corpus::new(&world.catalog, &vocab, enc.max_seq - mode.prefix_len());
    let ids: Vec<_> = world.catalog.ids().cloned().collect();
    let holdout = Holdout {
        pairs: splits.valid.clone(),
        distractors: sample_negative_items(&ids, 100, 1).unwrap(),
        k: 10,
    };
    let config = TrainConfig {
        epochs: 3,
        mode,
        sampling: Sampling::Mixed,
        batch_size: 32,
        uniform_negatives: 32,
        ..TrainConfig::default()
    };
    let train = &splits.train[..splits.train.len().min(800)];
    let untrained = Model::init(&enc, mode, config.beta_init, 0).unwrap();
    let before = holdout.recall(&embed_model(&untrained, &vocab, &world.catalog).unwrap()).unwrap();
    let out = fit(untrained, &corpus, train, &config, Some(&holdout)).unwrap();
    assert_eq!(out.epoch_recall.len(), 3);
    let table = embed_model(&out.model, &vocab, &world.catalog).unwrap();
    let after = recall_at_k(&holdout.pairs, &table, &holdout.distractors, 10).unwrap().overall.value();
    assert!(after > before, "training did not help: {before} -> {after}");

    // weights are stored as f32: a reload is close, and a rewrite is byte-stable
    let mut buf = Vec::new();
    out.model.to_checkpoint(0).write_to(&mut buf).unwrap();
    let reloaded = Model::from_checkpoint(Checkpoint::read_from(&mut Cursor::new(&buf)).unwrap()).unwrap();
    let mut again = Vec::new();
    reloaded.to_checkpoint(0).write_to(&mut again).unwrap();
    assert_eq!(again, buf);
    let re = embed_model(&reloaded, &vocab, &world.catalog).unwrap();
    for (a, b) in re.rows().iter().zip(table.rows()) {
        for role in [Role::View, Role::Buy, Role::Target] {
            let gap = a.role(role).iter().zip(b.role(role)).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(gap < 1e-4, "{} {role:?} moved by {gap}", a.item_id);
        }
    }
    let mut buf = Vec::new();
    table.write_to(&mut buf).unwrap();
    assert_eq!(EmbeddingTable::read_from(&mut Cursor::new(buf)).unwrap().rows(), table.rows());

    // threshold, store and index
    let positives: Vec<f64> = splits
        .valid
        .iter()
        .map(|p| {
            let q = table.role(p.query_id.as_str(), p.relation.into()).unwrap();
            let t = table.role(p.target_id.as_str(), Role::Target).unwrap();
            q.iter().zip(t).map(|(a, b)| (a * b) as f64).sum()
        })
        .collect();
    let tau = nearest_rank(&positives, 10.0).unwrap();
    let targets: Vec<Vec<f32>> = table.rows().iter().map(|r| r.target.clone()).collect();
    let exact = Index::exact(ids.clone(), targets.clone()).unwrap();
    let params = IvfParams { clusters: 8, nprobe: 8, ..IvfParams::default() };
    let ivf = Index::ivf(ids.clone(), targets, &params).unwrap();
    let store = SimilarityStore::precompute(&exact, &table, 20, tau).unwrap();
    // probing every cluster makes IVF exact
    assert_eq!(SimilarityStore::precompute(&ivf, &table, 20, tau).unwrap(), store);
    assert!(store.result_count() > 0);
    for (item, rel) in store.keys() {
        assert!(store.lookup(item.as_str(), rel).iter().all(|h| f64::from(h.score) > tau));
    }

    let mut profiles = Profiles::new(10);
    profiles.ingest_all(&world.events, &world.catalog);
    let eligible = build_eligible_set(&world.catalog, Surface::All);
    let nonempty = profiles
        .customers()
        .iter()
        .filter(|c| !compose_feed(profiles.get(c).unwrap(), &store, &world.catalog, &eligible, 10).is_empty())
        .count();
    assert!(nonempty > profiles.len() / 2, "{nonempty} of {} feeds non-empty", profiles.len());
}
