//! Evaluation metrics: corpus BLEU, entity F1, exact match, perplexity and
//! persona consistency.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{DialogueExample, PersonaProfile};
use crate::error::{contract, Result};
use crate::model::Model;
use crate::query::{query_kind, QueryKind};
use crate::training::token_nll;
use crate::vocab::Encoded;

const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 (0 to 100) against one reference per hypothesis.
///
/// Unsmoothed by default: any order without a match gives 0. With `smooth`,
/// orders above 1 get add-one counts.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>], smooth: bool) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(contract("BLEU of an empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(contract("hypothesis and reference counts differ"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (m, t) = if smooth && n > 0 { (matches[n] + 1, totals[n] + 1) } else { (matches[n], totals[n]) };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(m as f64 / t as f64);
    }
    let bp = if hyp_len < ref_len { libm::exp(1.0 - ref_len as f64 / hyp_len as f64) } else { 1.0 };
    Ok(100.0 * bp * libm::exp(log_sum / MAX_ORDER as f64))
}

/// Surface forms (one or more tokens) mapped to canonical entity names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    entries: BTreeMap<Vec<String>, String>,
    longest: usize,
}

impl EntityLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) {
        let key: Vec<String> = surface.split_whitespace().map(str::to_string).collect();
        if key.is_empty() {
            return;
        }
        self.longest = self.longest.max(key.len());
        self.entries.insert(key, canonical.to_string());
    }

    /// Every value token stored in the memories of `examples`.
    pub fn from_memories(examples: &[DialogueExample]) -> Self {
        let mut lex = Self::new();
        for ex in examples {
            let offset = ex.history.len();
            for (i, tok) in ex.memory.iter().enumerate() {
                if ex.types.get(offset + i).is_some_and(|ty| ty != tok) {
                    lex.insert(tok, tok);
                }
            }
        }
        lex
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entities mentioned in `tokens`, by greedy longest match.
    pub fn extract<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let toks: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let mut hit = None;
            for len in (1..=self.longest.min(toks.len() - i)).rev() {
                let key: Vec<String> = toks[i..i + len].iter().map(|t| t.to_string()).collect();
                if let Some(c) = self.entries.get(&key) {
                    hit = Some((len, c.clone()));
                    break;
                }
            }
            match hit {
                Some((len, c)) => {
                    out.push(c);
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Micro-averaged entity precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EntityScore {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EntityScore {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn merge(&mut self, other: EntityScore) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }
}

/// Entity counts of one hypothesis against its gold response.
pub fn entity_counts<S: AsRef<str>, T: AsRef<str>>(hypothesis: &[S], gold: &[T], lexicon: &EntityLexicon) -> EntityScore {
    let predicted = lexicon.extract(hypothesis);
    let gold = lexicon.extract(gold);
    let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &gold {
        *remaining.entry(g.as_str()).or_insert(0) += 1;
    }
    let mut tp = 0;
    for p in &predicted {
        if let Some(c) = remaining.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    EntityScore { true_positives: tp, predicted: predicted.len(), gold: gold.len() }
}

/// Corpus entity F1, micro-averaged.
pub fn entity_f1<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], golds: &[Vec<T>], lexicon: &EntityLexicon) -> EntityScore {
    let mut total = EntityScore::default();
    for (h, g) in hypotheses.iter().zip(golds) {
        total.merge(entity_counts(h, g, lexicon));
    }
    total
}

/// Collapses runs of whitespace into single spaces and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of pairs that are identical after whitespace normalization;
/// 0 for an empty list.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[S], golds: &[T]) -> f64 {
    if golds.is_empty() {
        return 0.0;
    }
    let hits = hypotheses
        .iter()
        .zip(golds)
        .filter(|(h, g)| normalize_whitespace(h.as_ref()) == normalize_whitespace(g.as_ref()))
        .count();
    hits as f64 / golds.len() as f64
}

/// `exp(nll / count)`.
pub fn perplexity_from_nll(nll: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(contract("perplexity over zero tokens"));
    }
    Ok(libm::exp(nll / count as f64))
}

/// Perplexity of `model` on `data` (teacher forced).
pub fn perplexity(model: &Model, data: &[Encoded]) -> Result<f64> {
    let (nll, count) = token_nll(model, data)?;
    perplexity_from_nll(nll, count)
}

/// Natural-language inference judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nli {
    Entail,
    Independent,
    Contradict,
}

impl Nli {
    pub fn score(self) -> i64 {
        match self {
            Nli::Entail => 1,
            Nli::Independent => 0,
            Nli::Contradict => -1,
        }
    }

    pub fn from_score(s: i64) -> Option<Self> {
        match s {
            1 => Some(Nli::Entail),
            0 => Some(Nli::Independent),
            -1 => Some(Nli::Contradict),
            _ => None,
        }
    }
}

pub trait NliOracle {
    fn judge(&mut self, utterance: &[String], sentence: &[String]) -> Result<Nli>;
}

/// Rule oracle: the first rule whose two keywords occur in the utterance and
/// the persona sentence decides; otherwise `Independent`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordOracle {
    pub rules: Vec<(String, String, Nli)>,
}

impl KeywordOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, utterance_word: &str, sentence_word: &str, judgment: Nli) -> Self {
        self.rules.push((utterance_word.to_string(), sentence_word.to_string(), judgment));
        self
    }
}

impl NliOracle for KeywordOracle {
    fn judge(&mut self, utterance: &[String], sentence: &[String]) -> Result<Nli> {
        for (u, s, j) in &self.rules {
            if utterance.contains(u) && sentence.contains(s) {
                return Ok(*j);
            }
        }
        Ok(Nli::Independent)
    }
}

/// Sum of the oracle's judgments of `utterance` against every sentence.
pub fn consistency(utterance: &[String], profile: &PersonaProfile, oracle: &mut dyn NliOracle) -> Result<i64> {
    let mut c = 0;
    for sentence in &profile.sentences {
        c += oracle.judge(utterance, sentence)?.score();
    }
    Ok(c)
}

/// Per-domain scores. `None` marks an undefined cell (no gold entities or
/// no examples of that query kind).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRow {
    pub domain: String,
    pub entities: Option<EntityScore>,
    pub sql_acc: Option<f64>,
    pub book_acc: Option<f64>,
}

fn kind_of(tokens: &[String]) -> Option<QueryKind> {
    query_kind(tokens)
}

fn joined(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Splits predictions by the domain of each example.
pub fn per_domain_f1(predictions: &[Vec<String>], dataset: &[DialogueExample], lexicon: &EntityLexicon) -> Vec<DomainRow> {
    let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.iter().enumerate().take(predictions.len()) {
        if let Some(d) = ex.domain() {
            by_domain.entry(d.to_string()).or_default().push(i);
        }
    }
    by_domain
        .into_iter()
        .map(|(domain, idx)| {
            let mut ent = EntityScore::default();
            let mut sql = (Vec::new(), Vec::new());
            let mut book = (Vec::new(), Vec::new());
            for &i in &idx {
                let gold = &dataset[i].target;
                match kind_of(gold) {
                    Some(QueryKind::Select) => {
                        sql.0.push(joined(&predictions[i]));
                        sql.1.push(joined(gold));
                    }
                    Some(QueryKind::Book) => {
                        book.0.push(joined(&predictions[i]));
                        book.1.push(joined(gold));
                    }
                    None => ent.merge(entity_counts(&predictions[i], gold, lexicon)),
                }
            }
            DomainRow {
                domain,
                entities: (ent.gold > 0).then_some(ent),
                sql_acc: (!sql.1.is_empty()).then(|| exact_match(&sql.0, &sql.1)),
                book_acc: (!book.1.is_empty()).then(|| exact_match(&book.0, &book.1)),
            }
        })
        .collect()
}

/// Aggregate evaluation results. Rates are fractions; BLEU is 0 to 100.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub f1: f64,
    pub bleu: Option<f64>,
    pub sql_acc: Option<f64>,
    pub sql_bleu: Option<f64>,
    pub book_acc: Option<f64>,
    pub book_bleu: Option<f64>,
    pub ppl: Option<f64>,
    pub consistency: Option<f64>,
    pub per_domain: Vec<DomainRow>,
}

/// Scores predictions against a dataset. Plain responses feed F1 and BLEU;
/// query targets feed the SQL and BOOK columns.
pub fn evaluate(predictions: &[Vec<String>], dataset: &[DialogueExample], lexicon: &EntityLexicon) -> Result<EvalReport> {
    if predictions.len() != dataset.len() {
        return Err(contract("one prediction per example is required"));
    }
    let mut plain = (Vec::new(), Vec::new());
    let mut sql = (Vec::new(), Vec::new());
    let mut book = (Vec::new(), Vec::new());
    for (p, ex) in predictions.iter().zip(dataset) {
        let bucket = match kind_of(&ex.target) {
            Some(QueryKind::Select) => &mut sql,
            Some(QueryKind::Book) => &mut book,
            None => &mut plain,
        };
        bucket.0.push(p.clone());
        bucket.1.push(ex.target.clone());
    }
    let acc = |b: &(Vec<Vec<String>>, Vec<Vec<String>>)| -> Option<f64> {
        if b.1.is_empty() {
            return None;
        }
        let h: Vec<String> = b.0.iter().map(|t| joined(t)).collect();
        let g: Vec<String> = b.1.iter().map(|t| joined(t)).collect();
        Some(exact_match(&h, &g))
    };
    let score = |b: &(Vec<Vec<String>>, Vec<Vec<String>>)| -> Result<Option<f64>> {
        if b.1.is_empty() {
            Ok(None)
        } else {
            bleu(&b.0, &b.1, false).map(Some)
        }
    };
    Ok(EvalReport {
        f1: entity_f1(&plain.0, &plain.1, lexicon).f1(),
        bleu: score(&plain)?,
        sql_acc: acc(&sql),
        sql_bleu: score(&sql)?,
        book_acc: acc(&book),
        book_bleu: score(&book)?,
        ppl: None,
        consistency: None,
        per_domain: per_domain_f1(predictions, dataset, lexicon),
    })
}
