//! End-to-end operations behind the CLI subcommands.

use std::fmt::Write as _;

use aop_core::data::{DialogueExample, PersonaProfile};
use aop_core::experts::manual_attention;
use aop_core::gradcheck::{check_model, GradReport};
use aop_core::metrics::{consistency, evaluate, perplexity, EntityLexicon, EvalReport, NliOracle};
use aop_core::model::{AlphaMode, Model, ModelConfig, Variant};
use aop_core::query::{query_kind, QueryKind};
use aop_core::synthetic::{generate_synthetic_corpus, SYNTHETIC_SKILLS};
use aop_core::training::{train, EpochRecord, TrainReport};
use aop_core::transformer::Dims;
use aop_core::vocab::{decode_ids, Encoded, Vocabularies};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::DataDir;
use crate::error::{Error, Result};

/// Skill names that select an API call rather than a domain.
pub const API_SKILLS: [&str; 2] = ["SQL", "BOOK"];
pub const PERSONA_SKILL: &str = "Persona";

pub fn encode_all(vocab: &Vocabularies, examples: &[DialogueExample]) -> Result<Vec<Encoded>> {
    Ok(examples.iter().map(|ex| vocab.encode(ex)).collect::<aop_core::error::Result<_>>()?)
}

/// Builds the vocabulary from the training split and trains a fresh model.
pub fn train_model(
    run: &RunConfig,
    data: &DataDir,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainReport)> {
    if data.train.is_empty() {
        return Err(Error::Usage("the training split is empty".into()));
    }
    let vocab = Vocabularies::build(&data.train, &data.skills);
    let mut model = Model::new(run.model_config(&vocab)?)?;
    let train_set = encode_all(&vocab, &data.train)?;
    let valid_set = encode_all(&vocab, &data.valid)?;
    let report = train(&mut model, &train_set, &valid_set, &run.train_config(), on_epoch)?;
    Ok((Checkpoint::new(model, vocab, run), report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<String>,
    pub alpha: Vec<f64>,
}

/// Greedy decoding with the model's own weights (gold skills for the oracle
/// variant).
pub fn predict(ckpt: &Checkpoint, examples: &[DialogueExample], max_len: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let enc = ckpt.vocab.encode(ex)?;
        let alpha = ckpt.model.alpha_for(&enc)?;
        let (ids, outcome) = ckpt.model.greedy_decode(&enc, &alpha, max_len)?;
        out.push(Prediction { tokens: decode_ids(&ckpt.vocab.words, &enc, &ids)?, alpha: outcome.alpha });
    }
    Ok(out)
}

/// Exact matches among examples whose target is an SQL or BOOK query.
pub fn query_exact_match(predictions: &[Prediction], examples: &[DialogueExample]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (p, ex) in predictions.iter().zip(examples) {
        if query_kind(&ex.target).is_some() {
            total += 1;
            hits += usize::from(p.tokens == ex.target);
        }
    }
    (hits, total)
}

/// Memory tokens grouped into sentences by segment tag.
pub fn persona_profile(ex: &DialogueExample) -> PersonaProfile {
    let offset = ex.history.len();
    let mut sentences: Vec<Vec<String>> = Vec::new();
    let mut last: Option<&str> = None;
    for (i, tok) in ex.memory.iter().enumerate() {
        let seg = ex.segments.get(offset + i).map(String::as_str);
        match sentences.last_mut() {
            Some(s) if seg == last => s.push(tok.clone()),
            _ => sentences.push(vec![tok.clone()]),
        }
        last = seg;
    }
    PersonaProfile { sentences }
}

/// Full evaluation of a checkpoint on one split.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    examples: &[DialogueExample],
    max_len: usize,
    oracle: Option<&mut dyn NliOracle>,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let predictions = predict(ckpt, examples, max_len)?;
    let tokens: Vec<Vec<String>> = predictions.iter().map(|p| p.tokens.clone()).collect();
    let lexicon = EntityLexicon::from_memories(examples);
    let mut report = evaluate(&tokens, examples, &lexicon)?;
    if !examples.is_empty() {
        report.ppl = Some(perplexity(&ckpt.model, &encode_all(&ckpt.vocab, examples)?)?);
    }
    if let Some(oracle) = oracle {
        let mut sum = 0i64;
        let mut n = 0usize;
        for (p, ex) in predictions.iter().zip(examples) {
            if ex.skills.iter().any(|s| s == PERSONA_SKILL) {
                sum += consistency(&p.tokens, &persona_profile(ex), oracle)?;
                n += 1;
            }
        }
        report.consistency = (n > 0).then(|| sum as f64 / n as f64);
    }
    Ok((report, predictions))
}

#[derive(Debug, Serialize)]
pub struct DomainJson {
    pub domain: String,
    pub f1: Option<f64>,
    pub sql_acc: Option<f64>,
    pub book_acc: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalJson {
    pub f1: f64,
    pub bleu: Option<f64>,
    pub sql_acc: Option<f64>,
    pub sql_bleu: Option<f64>,
    pub book_acc: Option<f64>,
    pub book_bleu: Option<f64>,
    pub ppl: Option<f64>,
    pub consistency: Option<f64>,
    pub per_domain: Vec<DomainJson>,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        EvalJson {
            f1: r.f1,
            bleu: r.bleu,
            sql_acc: r.sql_acc,
            sql_bleu: r.sql_bleu,
            book_acc: r.book_acc,
            book_bleu: r.book_bleu,
            ppl: r.ppl,
            consistency: r.consistency,
            per_domain: r
                .per_domain
                .iter()
                .map(|d| DomainJson {
                    domain: d.domain.clone(),
                    f1: d.entities.map(|e| e.f1()),
                    sql_acc: d.sql_acc,
                    book_acc: d.book_acc,
                })
                .collect(),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Aligned text rendering of an evaluation report.
pub fn format_report(r: &EvalReport) -> String {
    let rows = [
        ("F1", Some(r.f1)),
        ("BLEU", r.bleu),
        ("SQL acc", r.sql_acc),
        ("SQL BLEU", r.sql_bleu),
        ("BOOK acc", r.book_acc),
        ("BOOK BLEU", r.book_bleu),
        ("PPL", r.ppl),
        ("Consistency", r.consistency),
    ];
    let mut s = String::new();
    for (name, v) in rows {
        let _ = writeln!(s, "{name:<12} {:>10}", cell(v));
    }
    if !r.per_domain.is_empty() {
        let _ = writeln!(s, "\n{:<12} {:>10} {:>10} {:>10}", "domain", "F1", "SQL acc", "BOOK acc");
        for d in &r.per_domain {
            let _ = writeln!(
                s,
                "{:<12} {:>10} {:>10} {:>10}",
                d.domain,
                cell(d.entities.map(|e| e.f1())),
                cell(d.sql_acc),
                cell(d.book_acc)
            );
        }
    }
    s
}

/// Each skill alone, then every API skill paired with every domain skill.
pub fn default_skill_sets(skills: &[String]) -> Vec<Vec<String>> {
    let mut sets: Vec<Vec<String>> = skills.iter().map(|s| vec![s.clone()]).collect();
    let domains = skills.iter().filter(|s| !API_SKILLS.contains(&s.as_str()) && s.as_str() != PERSONA_SKILL);
    for d in domains {
        for api in skills.iter().filter(|s| API_SKILLS.contains(&s.as_str())) {
            sets.push(vec![api.clone(), d.clone()]);
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposeRow {
    pub skills: Vec<String>,
    /// One character per declared skill: `1` when selected.
    pub bitmap: String,
    pub alpha: Vec<f64>,
    pub response: Vec<String>,
}

/// Decodes `context` once per skill set with hand-picked weights.
pub fn compose(ckpt: &Checkpoint, context: &DialogueExample, sets: &[Vec<String>], max_len: usize) -> Result<Vec<ComposeRow>> {
    let skills = &ckpt.vocab.skills;
    let enc = ckpt.vocab.encode(context)?;
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let alpha = manual_attention(skills, set, ckpt.model.config.normalize_oracle)?;
        let (ids, outcome) = ckpt.model.greedy_decode(&enc, &AlphaMode::Fixed(alpha), max_len)?;
        rows.push(ComposeRow {
            skills: set.clone(),
            bitmap: skills.iter().map(|k| if set.contains(k) { '1' } else { '0' }).collect(),
            alpha: outcome.alpha,
            response: decode_ids(&ckpt.vocab.words, &enc, &ids)?,
        });
    }
    Ok(rows)
}

pub fn format_compose(rows: &[ComposeRow], skills: &[String]) -> String {
    let width = rows.iter().map(|r| r.skills.join(",").len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:<b$}  response\n", "skills", "bitmap", w = width, b = skills.len().max(6));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:<b$}  {}",
            r.skills.join(","),
            r.bitmap,
            r.response.join(" "),
            w = width,
            b = skills.len().max(6)
        );
    }
    s
}

/// Domain named by a domain skill, as it appears in generated queries.
pub fn domain_of(skill: &str) -> String {
    skill.to_lowercase()
}

/// Whether `tokens` start with the query prefix for `api` over `domain`.
pub fn has_query_prefix(tokens: &[String], api: &str, domain: &str) -> bool {
    let prefix: &[&str] = match api {
        "SQL" => &["SELECT", "*", "FROM"],
        "BOOK" => &["BOOK", "FROM"],
        _ => return false,
    };
    tokens.len() > prefix.len()
        && tokens.iter().zip(prefix).all(|(t, p)| t == p)
        && tokens[prefix.len()] == domain
        && matches!(query_kind(tokens), Some(QueryKind::Select) | Some(QueryKind::Book))
}

/// Gradient check of a freshly initialised model on the smallest example of
/// a synthetic corpus restricted to the first `experts` skills.
pub fn gradcheck_run(variant: Variant, d_model: usize, experts: usize, seed: u64) -> Result<GradReport> {
    if experts == 0 || experts > SYNTHETIC_SKILLS.len() {
        return Err(Error::Usage(format!("experts must be between 1 and {}", SYNTHETIC_SKILLS.len())));
    }
    if d_model < 2 || !d_model.is_multiple_of(2) {
        return Err(Error::Usage("dims must be an even number of at least 2".into()));
    }
    let skills: Vec<String> = SYNTHETIC_SKILLS[..experts].iter().map(|s| s.to_string()).collect();
    let corpus = generate_synthetic_corpus(seed, [36, 6, 6])?;
    let keep = |ex: &&DialogueExample| ex.skills.iter().all(|s| skills.contains(s));
    let train: Vec<DialogueExample> = corpus.train.iter().filter(keep).cloned().collect();
    if train.is_empty() {
        return Err(Error::Usage("no synthetic example uses only the chosen skills".into()));
    }
    let vocab = Vocabularies::build(&train, &skills);
    let encoded = encode_all(&vocab, &train)?;
    let ex = encoded.iter().min_by_key(|e| e.input.len() + e.targets.len()).expect("non-empty");
    let mut model = Model::new(ModelConfig {
        variant,
        vocab_size: vocab.words.len(),
        tag_size: vocab.tags.len(),
        dims: Dims { d_model, heads: 2, depth: d_model / 2, filter: 2 * d_model },
        layers: 1,
        hops: 2,
        skills,
        normalize_oracle: false,
        seed,
    })?;
    Ok(check_model(&mut model, ex, &Default::default())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn default_sets_pair_apis_with_domains() {
        let sets = default_skill_sets(&names(&["SQL", "BOOK", "Hotel", "Train"]));
        assert_eq!(sets.len(), 4 + 4);
        assert!(sets.contains(&names(&["BOOK", "Train"])));
        let big = names(&["SQL", "BOOK", "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "Persona"]);
        assert_eq!(default_skill_sets(&big).len(), 13 + 20);
    }

    #[test]
    fn query_prefixes() {
        let t = names(&["SELECT", "*", "FROM", "hotel", "WHERE", "area=north"]);
        assert!(has_query_prefix(&t, "SQL", "hotel"));
        assert!(!has_query_prefix(&t, "SQL", "train"));
        assert!(!has_query_prefix(&t, "BOOK", "hotel"));
        assert!(!has_query_prefix(&names(&["SELECT", "*", "FROM"]), "SQL", "hotel"));
    }

    #[test]
    fn persona_sentences_follow_segments() {
        let ex = DialogueExample {
            history: names(&["hi"]),
            memory: names(&["i", "like", "tea", "i", "swim"]),
            target: names(&["ok"]),
            skills: names(&["Persona"]),
            types: names(&["Usr", "Per", "Per", "Per", "Per", "Per"]),
            segments: names(&["turn0", "p0", "p0", "p0", "p1", "p1"]),
        };
        let p = persona_profile(&ex);
        assert_eq!(p.sentences, vec![names(&["i", "like", "tea"]), names(&["i", "swim"])]);
    }

    #[test]
    fn gradcheck_passes_at_small_size() {
        let report = gradcheck_run(Variant::Aop, 4, 3, 3).unwrap();
        assert!(report.passes(), "{}", report.max_rel_error());
        assert!(gradcheck_run(Variant::Aop, 4, 9, 3).is_err());
    }
}
