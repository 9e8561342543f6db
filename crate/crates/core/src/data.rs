//! Dialogue examples, API-call triggering rules, memory population and
//! skill annotation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::experts::SkillVector;
use crate::query::{synthesize_sql_query, Clause};
use crate::vocab::TM;

/// Token emitted when a booking call fails.
pub const NOT_AVAILABLE: &str = "Not Available";
/// More records than this are replaced by `<TM>` unless an act filters them.
pub const MAX_MEMORY_RECORDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Speaker {
    Usr,
    Sys,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Usr => "Usr",
            Speaker::Sys => "Sys",
        }
    }
}

/// A speech act such as `INFORM-HOTEL`, with the slot values it mentions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeechAct {
    pub tag: String,
    pub values: Vec<(String, String)>,
}

impl SpeechAct {
    pub fn new(tag: &str, values: &[(&str, &str)]) -> Self {
        SpeechAct {
            tag: tag.to_string(),
            values: values.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect(),
        }
    }

    /// `INFORM-*` or `RECOMMEND-*`.
    pub fn is_informing(&self) -> bool {
        self.tag.starts_with("INFORM-") || self.tag.starts_with("RECOMMEND-")
    }

    /// Lower-cased domain part of the tag.
    pub fn domain(&self) -> Option<String> {
        self.tag.split_once('-').map(|(_, d)| d.to_ascii_lowercase())
    }
}

/// Per-domain slot values tracked across a dialogue.
pub type DialogueState = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedTurn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    pub state: DialogueState,
    pub acts: Vec<SpeechAct>,
}

/// One database row as ordered `(attribute, value)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRecord {
    fields: Vec<(String, String)>,
}

impl MemoryRecord {
    pub fn new(fields: &[(&str, &str)]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, _) in fields {
            if !seen.insert(*name) {
                return Err(contract(format!("duplicate attribute `{name}` in record")));
            }
        }
        Ok(MemoryRecord { fields: fields.iter().map(|(a, v)| (a.to_string(), v.to_string())).collect() })
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn get(&self, attribute: &str) -> Option<&str> {
        self.fields.iter().find(|(a, _)| a == attribute).map(|(_, v)| v.as_str())
    }
}

/// Memory tokens with their type and segment tags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryTokens {
    pub tokens: Vec<String>,
    pub types: Vec<String>,
    pub segments: Vec<String>,
}

impl MemoryTokens {
    fn single(token: &str) -> Self {
        MemoryTokens {
            tokens: alloc::vec![token.to_string()],
            types: alloc::vec![token.to_string()],
            segments: alloc::vec!["rec0".to_string()],
        }
    }

    fn push(&mut self, token: &str, ty: &str, segment: &str) {
        self.tokens.push(token.to_string());
        self.types.push(ty.to_string());
        self.segments.push(segment.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Persona sentences of a chit-chat speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaProfile {
    pub sentences: Vec<Vec<String>>,
}

/// One training instance. `types` and `segments` cover `history ++ memory`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub history: Vec<String>,
    pub memory: Vec<String>,
    pub target: Vec<String>,
    pub skills: Vec<String>,
    pub types: Vec<String>,
    pub segments: Vec<String>,
}

impl DialogueExample {
    pub fn validate(&self, skills: &[String]) -> Result<()> {
        let n = self.history.len() + self.memory.len();
        if self.types.len() != n || self.segments.len() != n {
            return Err(contract(format!(
                "{n} source tokens but {} types and {} segments",
                self.types.len(),
                self.segments.len()
            )));
        }
        for s in &self.skills {
            if !skills.contains(s) {
                return Err(Error::Lookup(s.clone()));
            }
        }
        Ok(())
    }

    /// Domain skill of the example: its first skill bit other than SQL/BOOK.
    pub fn domain(&self) -> Option<&str> {
        self.skills.iter().map(String::as_str).find(|s| *s != "SQL" && *s != "BOOK")
    }
}

/// Slots of `domain` whose value differs between `prev` and `cur`.
pub fn changed_slots(prev: &DialogueState, cur: &DialogueState, domain: &str) -> Vec<Clause> {
    let empty = BTreeMap::new();
    let before = prev.get(domain).unwrap_or(&empty);
    cur.get(domain)
        .map(|slots| {
            slots
                .iter()
                .filter(|(k, v)| before.get(*k) != Some(*v))
                .map(|(k, v)| Clause::eq(k, v))
                .collect()
        })
        .unwrap_or_default()
}

/// An API call is issued when the turn informs or recommends, the state
/// changed since the previous turn, and the resulting query is new. Returns
/// the query string when issued.
pub fn should_issue_api(turn: &AnnotatedTurn, prev_state: &DialogueState, issued: &BTreeSet<String>) -> Option<String> {
    let act = turn.acts.iter().find(|a| a.is_informing())?;
    if turn.state == *prev_state {
        return None;
    }
    let domain = act.domain()?;
    let changed = changed_slots(prev_state, &turn.state, &domain);
    let query = synthesize_sql_query(&domain, &changed).ok()?.join(" ");
    if issued.contains(&query) {
        None
    } else {
        Some(query)
    }
}

/// Result of a booking call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BookingOutcome {
    Confirmed(MemoryRecord),
    Failed,
}

fn flatten_records(records: &[&MemoryRecord]) -> MemoryTokens {
    let mut out = MemoryTokens::default();
    for (i, rec) in records.iter().enumerate() {
        let seg = format!("rec{i}");
        for (attr, value) in &rec.fields {
            out.push(attr, attr, &seg);
            out.push(value, attr, &seg);
        }
    }
    out
}

/// Memory content for the results of a query.
///
/// * no informing act and more than five records: a single `<TM>`
/// * no informing act and at most five records: every record
/// * informing act: records matching the act's values, at most five
pub fn populate_memory(results: &[MemoryRecord], acts: &[SpeechAct]) -> MemoryTokens {
    let informing: Vec<&SpeechAct> = acts.iter().filter(|a| a.is_informing()).collect();
    if informing.is_empty() {
        if results.len() > MAX_MEMORY_RECORDS {
            return MemoryTokens::single(TM);
        }
        let all: Vec<&MemoryRecord> = results.iter().collect();
        return flatten_records(&all);
    }
    let keep: Vec<&MemoryRecord> = results
        .iter()
        .filter(|rec| {
            informing.iter().all(|act| {
                act.values.iter().all(|(slot, value)| rec.get(slot).is_none_or(|v| v == value))
            })
        })
        .take(MAX_MEMORY_RECORDS)
        .collect();
    flatten_records(&keep)
}

/// Memory content for a booking call: the one confirmation record, or
/// `Not Available`.
pub fn populate_booking_memory(outcome: &BookingOutcome) -> MemoryTokens {
    match outcome {
        BookingOutcome::Confirmed(rec) => flatten_records(&[rec]),
        BookingOutcome::Failed => MemoryTokens::single(NOT_AVAILABLE),
    }
}

/// What a target is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Sql,
    Book,
    /// Plain system response in a domain.
    Response,
    Chat,
}

/// Skill name for a lower-case domain: `hotel` -> `Hotel`.
pub fn domain_skill(domain: &str) -> String {
    let mut chars = domain.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Query targets set the API bit and the domain bit; responses set the
/// domain bit; chit-chat sets `Persona`.
pub fn build_skill_vector(kind: TargetKind, domain: Option<&str>, skills: &[String]) -> Result<SkillVector> {
    let mut names: Vec<String> = Vec::new();
    match kind {
        TargetKind::Chat => names.push("Persona".to_string()),
        _ => {
            let domain = domain.ok_or_else(|| contract("domain required for task-oriented targets"))?;
            names.push(domain_skill(domain));
            match kind {
                TargetKind::Sql => names.push("SQL".to_string()),
                TargetKind::Book => names.push("BOOK".to_string()),
                _ => {}
            }
        }
    }
    SkillVector::from_names(skills, &names)
}
