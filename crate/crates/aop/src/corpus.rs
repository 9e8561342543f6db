//! Corpus files: one JSON object per line with the fields
//! `history`, `memory`, `target`, `skills`, `types` and `segments`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aop_core::data::DialogueExample;
use aop_core::synthetic::SyntheticCorpus;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    history: Vec<String>,
    memory: Vec<String>,
    target: Vec<String>,
    skills: Vec<String>,
    types: Vec<String>,
    segments: Vec<String>,
}

impl From<&DialogueExample> for Line {
    fn from(ex: &DialogueExample) -> Self {
        Line {
            history: ex.history.clone(),
            memory: ex.memory.clone(),
            target: ex.target.clone(),
            skills: ex.skills.clone(),
            types: ex.types.clone(),
            segments: ex.segments.clone(),
        }
    }
}

impl From<Line> for DialogueExample {
    fn from(l: Line) -> Self {
        DialogueExample {
            history: l.history,
            memory: l.memory,
            target: l.target,
            skills: l.skills,
            types: l.types,
            segments: l.segments,
        }
    }
}

/// A dialogue context for composition. `target` and `skills` may be omitted.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextLine {
    history: Vec<String>,
    memory: Vec<String>,
    #[serde(default)]
    target: Vec<String>,
    #[serde(default)]
    skills: Vec<String>,
    types: Vec<String>,
    segments: Vec<String>,
}

pub fn load_context(path: &Path, skills: &[String]) -> Result<DialogueExample> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let c: ContextLine =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), detail: e.to_string() })?;
    let ex = DialogueExample {
        history: c.history,
        memory: c.memory,
        target: c.target,
        skills: c.skills,
        types: c.types,
        segments: c.segments,
    };
    ex.validate(skills).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 1, detail: e.to_string() })?;
    Ok(ex)
}

/// Parses one example object, checking it against the declared skills.
pub fn parse_example(json: &str, skills: &[String]) -> std::result::Result<DialogueExample, String> {
    let line: Line = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let ex = DialogueExample::from(line);
    ex.validate(skills).map_err(|e| e.to_string())?;
    Ok(ex)
}

/// Parses corpus text. Blank lines are skipped; every example must carry at
/// least one declared skill.
pub fn parse_corpus(text: &str, skills: &[String], path: &Path) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse { path: path.to_path_buf(), line: i + 1, detail };
        let ex = parse_example(raw, skills).map_err(bad)?;
        if ex.skills.is_empty() {
            return Err(bad("example without skills".into()));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, skills: &[String]) -> Result<Vec<DialogueExample>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_corpus(&text, skills, path)
}

pub fn corpus_to_string(examples: &[DialogueExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(&Line::from(ex)).expect("strings serialize"));
        s.push('\n');
    }
    s
}

pub fn save_corpus(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    fs::write(path, corpus_to_string(examples)).map_err(io_err(path))
}

/// One skill name per line; blank lines and `#` comments are ignored.
pub fn load_skills(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let skills: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if skills.is_empty() {
        return Err(Error::Format(format!("{}: no skills declared", path.display())));
    }
    Ok(skills)
}

pub fn save_skills(path: &Path, skills: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for s in skills {
        writeln!(f, "{s}").map_err(io_err(path))?;
    }
    Ok(())
}

/// A prepared data directory: `skills.txt` plus `train/valid/test.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDir {
    pub skills: Vec<String>,
    pub train: Vec<DialogueExample>,
    pub valid: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let skills = load_skills(&dir.join("skills.txt"))?;
        let load = |s| -> Result<Vec<DialogueExample>> {
            let p = split_path(dir, s);
            if p.exists() {
                load_corpus(&p, &skills)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(DataDir { train: load("train")?, valid: load("valid")?, test: load("test")?, skills: skills.clone() })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_skills(&dir.join("skills.txt"), &self.skills)?;
        for (name, split) in SPLITS.iter().zip([&self.train, &self.valid, &self.test]) {
            save_corpus(&split_path(dir, name), split)?;
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[DialogueExample]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split `{other}` (expected train, valid or test)"))),
        }
    }
}

impl From<SyntheticCorpus> for DataDir {
    fn from(c: SyntheticCorpus) -> Self {
        DataDir { skills: c.skills, train: c.train, valid: c.valid, test: c.test }
    }
}
