//! Fixtures shared by the benchmarks.

use feedkit_core::encoder::{EncoderConfig, EncoderMode};
use feedkit_core::synth::{generate_synthetic_world, SynthConfig, SyntheticWorld};
use feedkit_core::tokenizer::Vocabulary;
use feedkit_core::trainer::{Model, TrainConfig};
use feedkit_core::ItemId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` random unit vectors with ids `v0..`.
pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> (Vec<ItemId>, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| Distribution::<f32>::sample(&StandardNormal, &mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    ((0..n).map(|i| ItemId::new(format!("v{i}"))).collect(), vectors)
}

pub fn world() -> SyntheticWorld {
    generate_synthetic_world(&SynthConfig::default()).expect("default synth config is valid")
}

pub fn vocab(world: &SyntheticWorld) -> Vocabulary {
    let titles: Vec<String> = world.catalog.items().iter().map(|i| i.metadata()).collect();
    Vocabulary::train(&titles, 1000).expect("vocabulary")
}

/// A freshly initialized encoder; speed does not depend on the weights.
pub fn model(vocab: &Vocabulary, mode: EncoderMode) -> Model {
    let mut cfg = EncoderConfig::new(vocab.len(), 64);
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.ffn_dim = 128;
    cfg.max_seq = 24;
    Model::init(&cfg, mode, TrainConfig::default().beta_init, 0).expect("model")
}
