//! Binary checkpoint format.
//!
//! ```text
//! "AOPMODEL" | u32 version | u64 meta length | meta (JSON)
//! u64 tensor count
//! per tensor: u32 name length | name | u32 ndim | u64 dims... | f64 payload
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in
//! parameter-store order, so saving the same model twice gives identical bytes.

use std::fs;
use std::path::Path;

use aop_core::model::{Model, ModelConfig, Variant};
use aop_core::tensor::Tensor;
use aop_core::transformer::Dims;
use aop_core::vocab::{Vocab, Vocabularies};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"AOPMODEL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    variant: String,
    d_model: usize,
    heads: usize,
    depth: usize,
    filter: usize,
    layers: usize,
    hops: usize,
    normalize_oracle: bool,
    seed: u64,
    max_len: usize,
    words: Vec<String>,
    tags: Vec<String>,
    skills: Vec<String>,
}

/// A model together with what is needed to encode new inputs for it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabularies,
    /// Default decoding length recorded at training time.
    pub max_len: usize,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocabularies, run: &RunConfig) -> Self {
        Checkpoint { model, vocab, max_len: run.max_len }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let meta = Meta {
            variant: c.variant.name().to_string(),
            d_model: c.dims.d_model,
            heads: c.dims.heads,
            depth: c.dims.depth,
            filter: c.dims.filter,
            layers: c.layers,
            hops: c.hops,
            normalize_oracle: c.normalize_oracle,
            seed: c.seed,
            max_len: self.max_len,
            words: self.vocab.words.tokens().to_vec(),
            tags: self.vocab.tags.tokens().to_vec(),
            skills: self.vocab.skills.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let store = &self.model.store;
        out.extend_from_slice(&(store.len() as u64).to_le_bytes());
        for id in store.ids() {
            let name = store.name(id).as_bytes();
            let value = store.value(id);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.len()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let vocab = Vocabularies {
            words: Vocab::from_tokens(&meta.words),
            tags: Vocab::from_tokens(&meta.tags),
            skills: meta.skills.clone(),
        };
        if vocab.words.len() != meta.words.len() || vocab.tags.len() != meta.tags.len() {
            return Err(Error::Format("checkpoint vocabulary has duplicate entries".into()));
        }
        let config = ModelConfig {
            variant: Variant::parse(&meta.variant)?,
            vocab_size: vocab.words.len(),
            tag_size: vocab.tags.len(),
            dims: Dims { d_model: meta.d_model, heads: meta.heads, depth: meta.depth, filter: meta.filter },
            layers: meta.layers,
            hops: meta.hops,
            skills: meta.skills,
            normalize_oracle: meta.normalize_oracle,
            seed: meta.seed,
        };
        let mut model = Model::new(config)?;
        let count = r.len()?;
        if count != model.store.len() {
            return Err(Error::Format(format!("checkpoint has {count} tensors, model expects {}", model.store.len())));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor `{name}` is truncated")))?;
            let data: Vec<f64> = r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let id = model.store.id(&name).ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(Error::Format(format!("tensor `{name}` appears twice")));
            }
            model.store.set_value(id, Tensor::new(shape, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after the tensor table", r.remaining())));
        }
        Ok(Checkpoint { model, vocab, max_len: meta.max_len })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}
