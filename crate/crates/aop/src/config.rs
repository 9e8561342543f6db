//! Run configuration: presets, `key = value` files and flag overrides.
//! Later layers win: preset, then file, then flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use aop_core::model::{ModelConfig, Variant};
use aop_core::optim::Schedule;
use aop_core::training::TrainConfig;
use aop_core::transformer::Dims;
use aop_core::vocab::Vocabularies;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Usage(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub filter: usize,
    pub layers: usize,
    pub hops: usize,
    /// Number of experts; when set it must match the number of skills.
    pub experts: Option<usize>,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    /// Warm-up steps of the inverse square root schedule; `None` keeps `lr`.
    pub warmup: Option<u64>,
    pub normalize_oracle: bool,
    pub max_len: usize,
}

impl RunConfig {
    pub fn preset(preset: Preset, variant: Variant) -> Self {
        let desk = RunConfig {
            preset,
            variant,
            d_model: 64,
            heads: 2,
            depth: 16,
            filter: 128,
            layers: 1,
            hops: 6,
            experts: None,
            seed: 0,
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            lr: 1e-3,
            warmup: None,
            normalize_oracle: true,
            max_len: 40,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper if variant == Variant::Moe => {
                RunConfig { d_model: 100, layers: 2, max_epochs: 100, patience: 5, ..desk }
            }
            Preset::Paper => RunConfig {
                d_model: 300,
                depth: 40,
                filter: 50,
                warmup: Some(4000),
                max_epochs: 100,
                patience: 5,
                ..desk
            },
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid number `{v}`"))
        }
        match key {
            // Base values for the preset are chosen by `resolve`.
            "preset" => self.preset = Preset::parse(value).map_err(|e| e.to_string())?,
            "variant" => self.variant = Variant::parse(value).map_err(|e| e.to_string())?,
            "d_model" | "d" => self.d_model = num(value)?,
            "heads" => self.heads = num(value)?,
            "depth" => self.depth = num(value)?,
            "filter" => self.filter = num(value)?,
            "layers" => self.layers = num(value)?,
            "hops" => self.hops = num(value)?,
            "experts" => self.experts = Some(num(value)?),
            "seed" => self.seed = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "max_epochs" => self.max_epochs = num(value)?,
            "patience" => self.patience = num(value)?,
            "lr" => self.lr = num(value)?,
            "warmup" => self.warmup = if value == "none" { None } else { Some(num(value)?) },
            "normalize_oracle" => self.normalize_oracle = num(value)?,
            "max_len" => self.max_len = num(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies a config file body. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (key, value, line) in parse_pairs(text, path)? {
            self.set(&key, &value).map_err(|detail| Error::Parse { path: path.to_path_buf(), line, detail })?;
        }
        Ok(())
    }

    /// Layers an optional config file and then `flags` over the preset they
    /// name (flags first, then the file, then `desk`).
    pub fn resolve(file: Option<&Path>, flags: &[(&str, String)]) -> Result<Self> {
        let pairs = match file {
            Some(path) => parse_pairs(&std::fs::read_to_string(path).map_err(io_err(path))?, path)?,
            None => Vec::new(),
        };
        let pick = |key: &str| {
            flags
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.as_str())
                .or_else(|| pairs.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str()))
        };
        let preset = Preset::parse(pick("preset").unwrap_or("desk"))?;
        let variant = Variant::parse(pick("variant").unwrap_or("AoP"))?;
        let mut c = RunConfig::preset(preset, variant);
        if let Some(path) = file {
            for (key, value, line) in &pairs {
                c.set(key, value).map_err(|detail| Error::Parse { path: path.to_path_buf(), line: *line, detail })?;
            }
        }
        for (key, value) in flags {
            c.set(key, value).map_err(|e| Error::Usage(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
        Ok(c)
    }

    /// Every setting as `key = value` lines, loadable by [`RunConfig::apply_text`].
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("preset", self.preset.name().into());
        line("variant", self.variant.name().into());
        line("d_model", self.d_model.to_string());
        line("heads", self.heads.to_string());
        line("depth", self.depth.to_string());
        line("filter", self.filter.to_string());
        line("layers", self.layers.to_string());
        line("hops", self.hops.to_string());
        if let Some(r) = self.experts {
            line("experts", r.to_string());
        }
        line("seed", self.seed.to_string());
        line("batch_size", self.batch_size.to_string());
        line("max_epochs", self.max_epochs.to_string());
        line("patience", self.patience.to_string());
        line("lr", self.lr.to_string());
        line("warmup", self.warmup.map_or("none".into(), |w| w.to_string()));
        line("normalize_oracle", self.normalize_oracle.to_string());
        line("max_len", self.max_len.to_string());
        s
    }

    pub fn dims(&self) -> Dims {
        Dims { d_model: self.d_model, heads: self.heads, depth: self.depth, filter: self.filter }
    }

    pub fn model_config(&self, vocab: &Vocabularies) -> Result<ModelConfig> {
        if let Some(r) = self.experts {
            if r != vocab.skills.len() {
                return Err(Error::Usage(format!(
                    "experts = {r} but the corpus declares {} skills",
                    vocab.skills.len()
                )));
            }
        }
        Ok(ModelConfig {
            variant: self.variant,
            vocab_size: vocab.words.len(),
            tag_size: vocab.tags.len(),
            dims: self.dims(),
            layers: self.layers,
            hops: self.hops,
            skills: vocab.skills.clone(),
            normalize_oracle: self.normalize_oracle,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let transformer = self.variant != Variant::Moe;
        let schedule = match self.warmup {
            Some(warmup) if transformer => Schedule::InverseSqrtWarmup { d_model: self.d_model, warmup, scale: 1.0 },
            _ => Schedule::Constant(self.lr),
        };
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            schedule,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// `key = value` lines with their 1-based line numbers. Repeated keys are
/// rejected.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse { path: path.to_path_buf(), line: i + 1, detail };
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = seen.insert(key.to_string(), i + 1) {
            return Err(bad(format!("`{key}` already set on line {prev}")));
        }
        out.push((key.to_string(), value.to_string(), i + 1));
    }
    Ok(out)
}
