//! Expert bank, skill attention and the two ways of mixing experts.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{contract, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{self, GruParams};
use crate::transformer::DecoderParams;

/// Skill layout of the full dialogue setting: two API skills, ten domains
/// and chit-chat.
pub const DIALOGUE_SKILLS: [&str; 13] = [
    "SQL",
    "BOOK",
    "Taxi",
    "Police",
    "Restaurant",
    "Hospital",
    "Hotel",
    "Attraction",
    "Train",
    "Weather",
    "Schedule",
    "Navigate",
    "Persona",
];

/// Multi-hot indicator over the declared skills.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SkillVector(Vec<bool>);

impl SkillVector {
    pub fn new(bits: Vec<bool>) -> Self {
        SkillVector(bits)
    }

    pub fn empty(r: usize) -> Self {
        SkillVector(alloc::vec![false; r])
    }

    /// Sets the bits of `names` within the declared `skills`.
    pub fn from_names<S: AsRef<str>>(skills: &[String], names: &[S]) -> Result<Self> {
        let mut bits = alloc::vec![false; skills.len()];
        for name in names {
            let name = name.as_ref();
            let i = skill_index(skills, name)?;
            bits[i] = true;
        }
        Ok(SkillVector(bits))
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn set(&mut self, i: usize) {
        self.0[i] = true;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn names<'a>(&self, skills: &'a [String]) -> Vec<&'a str> {
        self.0
            .iter()
            .zip(skills)
            .filter(|(b, _)| **b)
            .map(|(_, s)| s.as_str())
            .collect()
    }
}

pub fn skill_index(skills: &[String], name: &str) -> Result<usize> {
    skills
        .iter()
        .position(|s| s == name)
        .ok_or_else(|| Error::Lookup(name.to_string()))
}

/// `r` decoders with one key column each.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank<T> {
    pub experts: Vec<DecoderParams<T>>,
    /// `d_model x r`
    pub keys: T,
    pub skills: Vec<String>,
}

impl<T> ExpertBank<T> {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

/// Skill weights and the raw scores they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutcome {
    pub alpha: Vec<f64>,
    /// `q K`; absent when the weights were supplied from outside.
    pub logits: Option<Vec<f64>>,
}

/// Final hidden state of a GRU scan over the encoder outputs `h` (`n x d`).
pub fn compute_query(g: &mut Graph, encoder: &GruParams<Var>, h: Var) -> Result<Var> {
    if g.shape(h)[0] == 0 {
        return Err(contract("query encoder needs at least one position"));
    }
    let states = gru::scan(g, encoder, h, None)?;
    Ok(*states.last().expect("non-empty scan"))
}

/// `logits = q K`, `alpha = softmax(logits)`; both `1 x r`.
pub fn attention_scores(g: &mut Graph, q: Var, keys: Var) -> Result<(Var, Var)> {
    let logits = g.matmul(q, keys)?;
    let alpha = g.softmax_rows(logits, false)?;
    Ok((logits, alpha))
}

/// `theta* = sum_i alpha_i theta_i`, leaf by leaf. Gradients reach both the
/// weights and every expert.
pub fn mix_parameters(g: &mut Graph, experts: &[DecoderParams<Var>], alpha: Var) -> Result<DecoderParams<Var>> {
    let r = g.value(alpha).numel();
    if r != experts.len() {
        return Err(contract(format!("{r} weights for {} experts", experts.len())));
    }
    let refs: Vec<&DecoderParams<Var>> = experts.iter().collect();
    let mixed = DecoderParams::zip_with(&refs, |leaves| {
        let vars: Vec<Var> = leaves.iter().map(|&&v| v).collect();
        g.weighted_sum(alpha, &vars)
    })?;
    let flat: usize = experts[0].leaves().iter().map(|&&v| g.value(v).numel()).sum();
    g.counter.param_sum_elements += (r * flat) as u64;
    Ok(mixed)
}

/// `sum_i alpha_i outputs_i` for same-shape decoder outputs.
pub fn mix_representations(g: &mut Graph, outputs: &[Var], alpha: Var) -> Result<Var> {
    if g.value(alpha).numel() != outputs.len() {
        return Err(dim_err("mix_representations", format!("{} weights for {} outputs", g.value(alpha).numel(), outputs.len())));
    }
    g.weighted_sum(alpha, outputs)
}

/// The gold skill vector used directly as attention weights.
pub fn oracle_attention(v: &SkillVector, normalize: bool) -> Result<Vec<f64>> {
    let count = v.count();
    if count == 0 {
        return Err(contract("oracle attention needs at least one skill bit"));
    }
    let mut alpha = v.as_weights();
    if normalize {
        alpha.iter_mut().for_each(|a| *a /= count as f64);
    }
    Ok(alpha)
}

/// Binary weights with ones at the named skills.
pub fn manual_attention<S: AsRef<str>>(skills: &[String], chosen: &[S], normalize: bool) -> Result<Vec<f64>> {
    if chosen.is_empty() {
        return Err(contract("manual attention needs at least one skill"));
    }
    oracle_attention(&SkillVector::from_names(skills, chosen)?, normalize)
}

/// Skills whose score clears 0.5 under the sigmoid.
pub fn selected_skills(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&z| z > 0.0).collect()
}
