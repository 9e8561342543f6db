#![allow(dead_code)]

use aop_core::model::{Model, ModelConfig, Variant};
use aop_core::synthetic::generate_synthetic_corpus;
use aop_core::transformer::Dims;
use aop_core::vocab::{Encoded, Vocabularies};

pub const TINY: Dims = Dims { d_model: 8, heads: 2, depth: 4, filter: 16 };

pub struct Fixture {
    pub vocab: Vocabularies,
    pub train: Vec<Encoded>,
    /// Encoded with the training vocabulary, so some carry OOV tokens.
    pub test: Vec<Encoded>,
}

/// Small synthetic corpus. `skills` restricts the skill set; examples whose
/// skills fall outside it are dropped.
pub fn fixture(seed: u64, skills: Option<&[&str]>) -> Fixture {
    let corpus = generate_synthetic_corpus(seed, [36, 6, 24]).unwrap();
    let skills: Vec<String> = match skills {
        Some(s) => s.iter().map(|s| s.to_string()).collect(),
        None => corpus.skills.clone(),
    };
    let keep = |ex: &&aop_core::data::DialogueExample| ex.skills.iter().all(|s| skills.contains(s));
    let train: Vec<_> = corpus.train.iter().filter(keep).cloned().collect();
    let vocab = Vocabularies::build(&train, &skills);
    let encode = |xs: &[aop_core::data::DialogueExample]| -> Vec<Encoded> {
        xs.iter().filter(keep).map(|ex| vocab.encode(ex).unwrap()).collect()
    };
    let train_enc = encode(&train);
    let test = encode(&corpus.test);
    Fixture { vocab, train: train_enc, test }
}

pub fn config(variant: Variant, f: &Fixture, dims: Dims, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: f.vocab.words.len(),
        tag_size: f.vocab.tags.len(),
        dims,
        layers: 1,
        hops: 2,
        skills: f.vocab.skills.clone(),
        normalize_oracle: false,
        seed,
    }
}

pub fn model(variant: Variant, f: &Fixture, seed: u64) -> Model {
    Model::new(config(variant, f, TINY, seed)).unwrap()
}

pub fn one_hot(r: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; r];
    v[i] = 1.0;
    v
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
