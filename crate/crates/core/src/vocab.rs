//! Token and tag vocabularies, and conversion of dialogue examples into ids.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::DialogueExample;
use crate::error::{contract, Error, Result};
use crate::experts::SkillVector;
use crate::transformer::ModelInput;

pub const PAD: &str = "<PAD>";
pub const SOS: &str = "<SOS>";
pub const EOS: &str = "<EOS>";
pub const TM: &str = "<TM>";
pub const UNK: &str = "<UNK>";

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const TM_ID: usize = 3;
pub const UNK_ID: usize = 4;

const SPECIALS: [&str; 5] = [PAD, SOS, EOS, TM, UNK];

/// Bidirectional string/id table. Ids are assigned in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Empty table (no special tokens).
    pub fn plain() -> Self {
        Self::default()
    }

    /// Table that starts with `<PAD> <SOS> <EOS> <TM> <UNK>`.
    pub fn with_specials() -> Self {
        let mut v = Self::default();
        for s in SPECIALS {
            v.add(s);
        }
        v
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Self::default();
        for t in tokens {
            v.add(t.as_ref());
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Vocabularies needed to turn examples into model inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub words: Vocab,
    /// Shared type and segment tags.
    pub tags: Vocab,
    pub skills: Vec<String>,
}

impl Vocabularies {
    /// Collects every token and tag seen in `examples`.
    pub fn build(examples: &[DialogueExample], skills: &[String]) -> Self {
        let mut words = Vocab::with_specials();
        let mut tags = Vocab::plain();
        tags.add(UNK);
        for ex in examples {
            for t in ex.history.iter().chain(&ex.memory).chain(&ex.target) {
                words.add(t);
            }
            for t in ex.types.iter().chain(&ex.segments) {
                tags.add(t);
            }
        }
        Vocabularies { words, tags, skills: skills.to_vec() }
    }

    pub fn encode(&self, ex: &DialogueExample) -> Result<Encoded> {
        encode_example(self, ex)
    }
}

/// An example in id form.
///
/// Tokens of the source that are missing from the word table are embedded as
/// `<UNK>` but keep a private extended id (`|V| + j`) so the copy path can
/// still produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub input: ModelInput,
    pub source_ext: Vec<usize>,
    pub oov: Vec<String>,
    /// `<SOS>` followed by the target, in-table ids.
    pub decoder_input: Vec<usize>,
    /// Target followed by `<EOS>`, extended ids.
    pub targets: Vec<usize>,
    pub skills: SkillVector,
}

impl Encoded {
    pub fn extended_vocab(&self, words: &Vocab) -> usize {
        words.len() + self.oov.len()
    }

    /// Extended id to string.
    pub fn token<'a>(&'a self, words: &'a Vocab, id: usize) -> Option<&'a str> {
        if id < words.len() {
            words.token(id)
        } else {
            self.oov.get(id - words.len()).map(String::as_str)
        }
    }
}

pub fn encode_example(v: &Vocabularies, ex: &DialogueExample) -> Result<Encoded> {
    let source: Vec<&String> = ex.history.iter().chain(&ex.memory).collect();
    if source.is_empty() {
        return Err(contract("example with empty history and memory"));
    }
    if ex.types.len() != source.len() || ex.segments.len() != source.len() {
        return Err(contract(format!(
            "{} source tokens but {} types and {} segments",
            source.len(),
            ex.types.len(),
            ex.segments.len()
        )));
    }
    let mut oov: Vec<String> = Vec::new();
    let mut ids = Vec::with_capacity(source.len());
    let mut source_ext = Vec::with_capacity(source.len());
    for tok in &source {
        match v.words.id(tok) {
            Some(id) => {
                ids.push(id);
                source_ext.push(id);
            }
            None => {
                ids.push(UNK_ID);
                let j = match oov.iter().position(|o| o == *tok) {
                    Some(j) => j,
                    None => {
                        oov.push((*tok).clone());
                        oov.len() - 1
                    }
                };
                source_ext.push(v.words.len() + j);
            }
        }
    }
    let tag = |t: &String| v.tags.id(t).unwrap_or(0);
    let types = ex.types.iter().map(tag).collect();
    let segments = ex.segments.iter().map(tag).collect();

    let mut decoder_input = Vec::with_capacity(ex.target.len() + 1);
    let mut targets = Vec::with_capacity(ex.target.len() + 1);
    decoder_input.push(SOS_ID);
    for tok in &ex.target {
        let in_table = v.words.id(tok);
        decoder_input.push(in_table.unwrap_or(UNK_ID));
        let ext = in_table
            .or_else(|| oov.iter().position(|o| o == tok).map(|j| v.words.len() + j))
            .unwrap_or(UNK_ID);
        targets.push(ext);
    }
    targets.push(EOS_ID);
    decoder_input.truncate(targets.len());

    let skills = SkillVector::from_names(&v.skills, &ex.skills)?;
    Ok(Encoded {
        input: ModelInput::new(ids, types, segments)?,
        source_ext,
        oov,
        decoder_input,
        targets,
        skills,
    })
}

/// Maps extended ids back to strings, stopping at `<EOS>`.
pub fn decode_ids(words: &Vocab, ex: &Encoded, ids: &[usize]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == EOS_ID {
            break;
        }
        let tok = ex
            .token(words, id)
            .ok_or(Error::Vocabulary { id, size: ex.extended_vocab(words) })?;
        out.push(tok.to_string());
    }
    Ok(out)
}
