//! Teacher-forced training with token cross-entropy plus skill supervision,
//! early stopping on validation token loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{contract, Error, Result};
use crate::experts::{selected_skills, SkillVector};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::optim::{Adam, Schedule};
use crate::vocab::{Encoded, PAD_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub token_weight: f64,
    pub skill_weight: f64,
    /// Adds the skill loss when the variant has a router.
    pub skill_loss: bool,
    pub schedule: Schedule,
    pub adam: Adam,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            token_weight: 1.0,
            skill_weight: 1.0,
            skill_loss: true,
            schedule: Schedule::Constant(1e-3),
            adam: Adam::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(contract("batch size, patience and epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Summed NLL of `targets` under `probs` (one row per position); `<PAD>`
/// targets are skipped.
pub fn token_loss(g: &mut Graph, probs: Var, targets: &[usize]) -> Result<Var> {
    let masked: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD_ID).then_some(t)).collect();
    g.nll(probs, &masked)
}

/// Binary cross-entropy of `sigmoid(logits)` against the gold skills, summed.
pub fn skill_loss(g: &mut Graph, logits: Var, v: &SkillVector) -> Result<Var> {
    if g.value(logits).numel() != v.len() {
        return Err(contract(format!("{} scores for {} skills", g.value(logits).numel(), v.len())));
    }
    g.bce_with_logits(logits, &v.as_weights())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub token: f64,
    pub skill: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, other: LossParts) {
        self.token += other.token;
        self.skill += other.skill;
        self.total += other.total;
    }
}

/// Builds the loss of one example and returns its node with the parts.
pub fn example_loss(model: &Model, g: &mut Graph, ex: &Encoded, cfg: &TrainConfig) -> Result<(Var, LossParts)> {
    let alpha = model.alpha_for(ex)?;
    let fwd = model.forward(g, ex, &alpha)?;
    let token = token_loss(g, fwd.probs, &ex.targets)?;
    let use_skill = cfg.skill_loss && model.variant().uses_skill_loss();
    let (total, skill) = match (use_skill, fwd.logits) {
        (true, Some(logits)) => {
            let skill = skill_loss(g, logits, &ex.skills)?;
            let a = g.scale(token, cfg.token_weight)?;
            let b = g.scale(skill, cfg.skill_weight)?;
            (g.add(a, b)?, g.value(skill).data()[0])
        }
        _ => (g.scale(token, cfg.token_weight)?, 0.0),
    };
    let parts = LossParts { token: g.value(token).data()[0], skill, total: g.value(total).data()[0] };
    Ok((total, parts))
}

/// One optimizer step on the mean loss of `batch`. Returns summed parts.
pub fn train_step(model: &mut Model, batch: &[&Encoded], cfg: &TrainConfig) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    model.store.zero_grad();
    let mut sum = LossParts::default();
    for ex in batch {
        let mut g = Graph::new();
        let (loss, parts) = example_loss(model, &mut g, ex, cfg)?;
        g.backward(loss)?;
        g.accumulate_into(&mut model.store);
        sum.add(parts);
    }
    model.store.scale_grads(1.0 / batch.len() as f64);
    cfg.adam.step(&mut model.store, &cfg.schedule)?;
    Ok(sum)
}

/// Total token NLL and number of scored positions.
pub fn token_nll(model: &Model, data: &[Encoded]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut count = 0;
    for ex in data {
        let mut g = Graph::new();
        let alpha = model.alpha_for(ex)?;
        let fwd = model.forward(&mut g, ex, &alpha)?;
        let loss = token_loss(&mut g, fwd.probs, &ex.targets)?;
        nll += g.value(loss).data()[0];
        count += ex.targets.iter().filter(|&&t| t != PAD_ID).count();
    }
    Ok((nll, count))
}

/// Mean token NLL over `data`.
pub fn mean_token_loss(model: &Model, data: &[Encoded]) -> Result<f64> {
    let (nll, count) = token_nll(model, data)?;
    if count == 0 {
        return Err(contract("no scored target positions"));
    }
    Ok(nll / count as f64)
}

/// Skills the model selects on `ex`: `sigmoid(qK) > 0.5` with a router,
/// otherwise the nonzero weights it was given.
pub fn predicted_skills(model: &Model, ex: &Encoded) -> Result<Vec<bool>> {
    let outcome = model.attention_outcome(ex)?;
    Ok(match outcome.logits {
        Some(z) => selected_skills(&z),
        None => outcome.alpha.iter().map(|&a| a > 0.0).collect(),
    })
}

/// Fraction of examples whose selected skill set differs from the gold one.
pub fn attention_error_rate(model: &Model, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for ex in data {
        if predicted_skills(model, ex)? != ex.skills.bits() {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_token_loss: f64,
    pub train_skill_loss: f64,
    pub valid_token_loss: f64,
    pub attention_error_rate: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_token_loss,train_skill_loss,valid_token_loss,attention_error_rate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_token_loss, self.train_skill_loss, self.valid_token_loss, self.attention_error_rate
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub steps: u64,
}

/// Trains `model` in place. Losses are per-token and per-example means.
/// The parameters of the epoch with the lowest validation token loss are
/// restored before returning; `on_epoch` sees every record as it is made.
pub fn train(
    model: &mut Model,
    train_set: &[Encoded],
    valid_set: &[Encoded],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(contract("empty training set"));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, Vec<crate::tensor::Tensor>)> = None;
    let mut epochs = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut tokens = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &train_set[i]).collect();
            let parts = train_step(model, &batch, cfg).map_err(|e| diverged(epoch, e))?;
            sum.add(parts);
            tokens += batch.iter().map(|ex| ex.targets.len()).sum::<usize>();
        }
        let valid_token_loss = if valid_set.is_empty() {
            sum.token / tokens as f64
        } else {
            mean_token_loss(model, valid_set).map_err(|e| diverged(epoch, e))?
        };
        let record = EpochRecord {
            epoch,
            train_token_loss: sum.token / tokens as f64,
            train_skill_loss: sum.skill / train_set.len() as f64,
            valid_token_loss,
            attention_error_rate: attention_error_rate(model, valid_set)?,
        };
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| valid_token_loss < *b) {
            best = Some((epoch, valid_token_loss, model.store.snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_valid_loss, values) = best.ok_or_else(|| contract("no epoch completed"))?;
    model.store.restore(&values)?;
    Ok(TrainReport { epochs, best_epoch, best_valid_loss, steps: model.store.steps() })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Contract(format!("training diverged in epoch {epoch}: non-finite {what}")),
        other => other,
    }
}
