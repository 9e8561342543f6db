mod common;

use aop_core::gradcheck::check_model;
use aop_core::graph::Graph;
use aop_core::model::{AlphaMode, Model, Variant};
use aop_core::training::{
    attention_error_rate, example_loss, mean_token_loss, token_nll, train, train_step, EpochRecord, TrainConfig,
};
use aop_core::transformer::Dims;
use common::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[test]
fn total_is_the_sum_of_both_losses() {
    let f = fixture(11, None);
    let cfg = TrainConfig::default();
    let m = model(Variant::Aop, &f, 11);
    for ex in &f.train[..5] {
        let mut g = Graph::new();
        let (_, parts) = example_loss(&m, &mut g, ex, &cfg).unwrap();
        assert!(parts.skill > 0.0);
        assert_eq!(parts.total, parts.token + parts.skill);
    }
}

#[test]
fn ablations_drop_the_skill_loss() {
    let f = fixture(11, None);
    let on = TrainConfig::default();
    let off = TrainConfig { skill_loss: false, ..TrainConfig::default() };
    let no_lv = model(Variant::AopNoSkillLoss, &f, 11);
    let aop = model(Variant::Aop, &f, 11);
    for ex in &f.train[..5] {
        for (m, cfg) in [(&no_lv, &on), (&aop, &off)] {
            let mut g = Graph::new();
            let (_, parts) = example_loss(m, &mut g, ex, cfg).unwrap();
            assert_eq!(parts.skill, 0.0);
            assert_eq!(parts.total, parts.token);
        }
    }
}

#[test]
fn single_example_is_memorised() {
    let f = fixture(12, None);
    let ex = f.train.iter().find(|e| e.targets.len() >= 6).unwrap().clone();
    let dims = Dims { d_model: 32, heads: 2, depth: 16, filter: 64 };
    let mut m = Model::new(config(Variant::Aop, &f, dims, 12)).unwrap();
    let cfg = TrainConfig::default();
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        last = train_step(&mut m, &[&ex], &cfg).unwrap().total;
        if last < 1e-2 {
            break;
        }
    }
    assert!(last < 1e-2, "loss {last} after 500 steps");
    let target = &ex.targets[..ex.targets.len() - 1];
    let (out, _) = m.greedy_decode(&ex, &AlphaMode::Learned, target.len() + 5).unwrap();
    assert_eq!(out, target);
}

fn short_run(seed: u64) -> (Vec<EpochRecord>, aop_core::training::TrainReport, Model) {
    let f = fixture(13, None);
    let mut m = model(Variant::Aop, &f, seed);
    let cfg = TrainConfig { max_epochs: 6, patience: 2, batch_size: 8, seed, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let report = train(&mut m, &f.train, &f.test, &cfg, |r| seen.push(*r)).unwrap();
    (seen, report, m)
}

#[test]
fn training_is_reproducible_and_keeps_the_best_epoch() {
    let (seen, report, m) = short_run(5);
    let (_, again, _) = short_run(5);
    assert_eq!(report, again);
    assert_eq!(seen, report.epochs);

    let f = fixture(13, None);
    let best = report.epochs[report.best_epoch - 1];
    assert_eq!(best.valid_token_loss, report.best_valid_loss);
    assert!(report.epochs.iter().all(|e| e.valid_token_loss >= report.best_valid_loss));
    assert!((mean_token_loss(&m, &f.test).unwrap() - report.best_valid_loss).abs() < 1e-12);
    assert_eq!(report.steps, (report.epochs.len() * f.train.len().div_ceil(8)) as u64);
}

#[test]
fn epoch_log_rows() {
    let r = EpochRecord { epoch: 2, train_token_loss: 1.5, train_skill_loss: 0.25, valid_token_loss: 2.0, attention_error_rate: 0.1 };
    assert_eq!(EpochRecord::CSV_HEADER.split(',').count(), 5);
    assert_eq!(r.csv_row(), "2,1.5,0.25,2,0.1");
}

#[test]
fn bad_training_inputs() {
    let f = fixture(13, None);
    let mut m = model(Variant::Aop, &f, 1);
    let cfg = TrainConfig::default();
    assert!(train(&mut m, &[], &f.test, &cfg, |_| {}).is_err());
    let zero = TrainConfig { patience: 0, ..TrainConfig::default() };
    assert!(train(&mut m, &f.train, &f.test, &zero, |_| {}).is_err());
    assert!(train_step(&mut m, &[], &cfg).is_err());
}

#[test]
fn oracle_attention_makes_no_errors() {
    let f = fixture(14, None);
    let m = model(Variant::AopOracle, &f, 14);
    assert_eq!(attention_error_rate(&m, &f.test).unwrap(), 0.0);
}

#[test]
fn untrained_router_is_near_chance() {
    // A random predictor of r independent fair bits matches a gold set with
    // probability 2^-r; estimate the same quantity for untrained routers.
    let f = fixture(15, None);
    let r = f.vocab.skills.len();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(15);
    let trials = 4000;
    let mut misses = 0;
    for i in 0..trials {
        let ex = &f.test[i % f.test.len()];
        if (0..r).any(|k| rng.gen::<bool>() != ex.skills.bits()[k]) {
            misses += 1;
        }
    }
    let chance = misses as f64 / trials as f64;
    assert!((chance - (1.0 - 0.5f64.powi(r as i32))).abs() < 0.02);

    let seeds = 24;
    let mean: f64 =
        (0..seeds).map(|s| attention_error_rate(&model(Variant::Aop, &f, 100 + s), &f.test).unwrap()).sum::<f64>() / seeds as f64;
    assert!(mean > 0.75 && mean <= 1.0, "untrained error {mean}, chance {chance}");
}

#[test]
fn token_nll_counts_every_target() {
    let f = fixture(16, None);
    let m = model(Variant::Trs, &f, 16);
    let (nll, count) = token_nll(&m, &f.test).unwrap();
    assert_eq!(count, f.test.iter().map(|e| e.targets.len()).sum::<usize>());
    assert!((mean_token_loss(&m, &f.test).unwrap() - nll / count as f64).abs() < 1e-12);
}

#[test]
fn small_variants_pass_gradient_checks() {
    let f = fixture(17, Some(&["SQL", "BOOK", "Hotel"]));
    let ex = f.train.iter().min_by_key(|e| e.input.len() + e.targets.len()).unwrap();
    let dims = Dims { d_model: 4, heads: 2, depth: 2, filter: 6 };
    for variant in [Variant::Trs, Variant::Aor, Variant::Moe, Variant::AopUniversal, Variant::AopOracle] {
        let mut m = Model::new(config(variant, &f, dims, 17)).unwrap();
        let report = check_model(&mut m, ex, &TrainConfig::default()).unwrap();
        assert!(report.passes(), "{}: max relative error {}", variant.name(), report.max_rel_error());
    }
}
