//! Transformer encoder/decoder, input embeddings and the copy-augmented
//! output distribution.
//!
//! Activations are laid out `positions x features`. Parameter groups are
//! generic over their leaf type so that the same structure can hold stored
//! ids (`ParamId`), graph handles (`Var`), plain values (`Tensor`) or shapes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{init_glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Sizes of the transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    /// Per-head key/value width.
    pub depth: usize,
    /// Feed-forward inner width.
    pub filter: usize,
}

impl Dims {
    pub fn attention_width(&self) -> usize {
        self.heads * self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn: AttentionParams<T>,
    pub norm1: NormParams<T>,
    pub ff: FeedForwardParams<T>,
    pub norm2: NormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: AttentionParams<T>,
    pub norm1: NormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub ff: FeedForwardParams<T>,
    pub norm3: NormParams<T>,
}

const DECODER_LAYER_FIELDS: usize = 18;

impl<T> DecoderLayer<T> {
    fn fields(&self) -> [&T; DECODER_LAYER_FIELDS] {
        [
            &self.self_attn.wq,
            &self.self_attn.wk,
            &self.self_attn.wv,
            &self.self_attn.wo,
            &self.norm1.gain,
            &self.norm1.bias,
            &self.cross_attn.wq,
            &self.cross_attn.wk,
            &self.cross_attn.wv,
            &self.cross_attn.wo,
            &self.norm2.gain,
            &self.norm2.bias,
            &self.ff.w1,
            &self.ff.b1,
            &self.ff.w2,
            &self.ff.b2,
            &self.norm3.gain,
            &self.norm3.bias,
        ]
    }

    fn from_fields(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        let mut next = || it.next();
        Some(DecoderLayer {
            self_attn: AttentionParams { wq: next()?, wk: next()?, wv: next()?, wo: next()? },
            norm1: NormParams { gain: next()?, bias: next()? },
            cross_attn: AttentionParams { wq: next()?, wk: next()?, wv: next()?, wo: next()? },
            norm2: NormParams { gain: next()?, bias: next()? },
            ff: FeedForwardParams { w1: next()?, b1: next()?, w2: next()?, b2: next()? },
            norm3: NormParams { gain: next()?, bias: next()? },
        })
    }
}

/// Full parameter set of one decoder stack.
///
/// With `Tensor` leaves this is a vector space: it flattens to one `f64`
/// vector in a fixed field order, and scaling/addition act on that vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub layers: Vec<DecoderLayer<T>>,
}

impl<T> DecoderParams<T> {
    pub fn leaves(&self) -> Vec<&T> {
        self.layers.iter().flat_map(|l| l.fields()).collect()
    }

    pub fn from_leaves(layers: usize, leaves: impl IntoIterator<Item = T>) -> Result<Self> {
        let mut it = leaves.into_iter();
        let mut out = Vec::with_capacity(layers);
        for _ in 0..layers {
            out.push(
                DecoderLayer::from_fields(&mut it)
                    .ok_or_else(|| contract("too few leaves for decoder parameters"))?,
            );
        }
        if it.next().is_some() {
            return Err(contract("too many leaves for decoder parameters"));
        }
        Ok(DecoderParams { layers: out })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DecoderParams<U> {
        let leaves: Vec<U> = self.leaves().into_iter().map(&mut f).collect();
        DecoderParams::from_leaves(self.layers.len(), leaves).expect("same structure")
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<DecoderParams<U>> {
        let leaves = self.leaves().into_iter().map(&mut f).collect::<Result<Vec<U>>>()?;
        DecoderParams::from_leaves(self.layers.len(), leaves)
    }

    /// Combines the matching leaf of every set in `sets`.
    pub fn zip_with<U>(
        sets: &[&DecoderParams<T>],
        mut f: impl FnMut(&[&T]) -> Result<U>,
    ) -> Result<DecoderParams<U>> {
        let first = sets.first().ok_or_else(|| contract("no parameter sets to combine"))?;
        let per_set: Vec<Vec<&T>> = sets.iter().map(|s| s.leaves()).collect();
        let count = per_set[0].len();
        if per_set.iter().any(|l| l.len() != count) {
            return Err(contract("parameter sets have different structure"));
        }
        let mut out = Vec::with_capacity(count);
        let mut column = Vec::with_capacity(sets.len());
        for j in 0..count {
            column.clear();
            column.extend(per_set.iter().map(|l| l[j]));
            out.push(f(&column)?);
        }
        DecoderParams::from_leaves(first.layers.len(), out)
    }
}

pub type DecoderShape = DecoderParams<Vec<usize>>;

impl DecoderParams<Tensor> {
    pub fn signature(&self) -> DecoderShape {
        self.map(|t| t.shape().to_vec())
    }

    pub fn flat_len(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in self.leaves() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(signature: &DecoderShape, flat: &[f64]) -> Result<Self> {
        let total: usize = signature.leaves().iter().map(|s| s.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(dim_err("unflatten", format!("signature needs {total} values, got {}", flat.len())));
        }
        let mut offset = 0;
        signature.try_map(|shape| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat[offset..offset + n].to_vec());
            offset += n;
            t
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|t| t.scale(factor))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        DecoderParams::zip_with(&[self, other], |pair| pair[0].add(pair[1]))
    }

    /// `sum_i weights[i] * sets[i]`, evaluated leaf by leaf.
    pub fn linear_combination(weights: &[f64], sets: &[&Self]) -> Result<Self> {
        if weights.len() != sets.len() {
            return Err(contract(format!("{} weights for {} parameter sets", weights.len(), sets.len())));
        }
        DecoderParams::zip_with(sets, |leaves| {
            let mut acc = vec![0.0; leaves[0].numel()];
            for (w, t) in weights.iter().zip(leaves) {
                if t.shape() != leaves[0].shape() {
                    return Err(dim_err("linear_combination", "leaf shapes differ".into()));
                }
                acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += w * v);
            }
            Tensor::new(leaves[0].shape().to_vec(), acc)
        })
    }
}

impl DecoderParams<ParamId> {
    pub fn values(&self, store: &ParamStore) -> DecoderParams<Tensor> {
        self.map(|&id| store.value(id).clone())
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> DecoderParams<Var> {
        self.map(|&id| g.param(store, id))
    }
}

fn new_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dims: &Dims,
) -> Result<AttentionParams<ParamId>> {
    let (d, a) = (dims.d_model, dims.attention_width());
    Ok(AttentionParams {
        wq: store.insert(&format!("{prefix}.wq"), init_glorot(rng, d, a))?,
        wk: store.insert(&format!("{prefix}.wk"), init_glorot(rng, d, a))?,
        wv: store.insert(&format!("{prefix}.wv"), init_glorot(rng, d, a))?,
        wo: store.insert(&format!("{prefix}.wo"), init_glorot(rng, a, d))?,
    })
}

fn new_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<NormParams<ParamId>> {
    Ok(NormParams {
        gain: store.insert(&format!("{prefix}.gain"), Tensor::full(&[1, d], 1.0))?,
        bias: store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[1, d]))?,
    })
}

fn new_feed_forward<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dims: &Dims,
) -> Result<FeedForwardParams<ParamId>> {
    let (d, f) = (dims.d_model, dims.filter);
    Ok(FeedForwardParams {
        w1: store.insert(&format!("{prefix}.w1"), init_glorot(rng, d, f))?,
        b1: store.insert(&format!("{prefix}.b1"), Tensor::zeros(&[1, f]))?,
        w2: store.insert(&format!("{prefix}.w2"), init_glorot(rng, f, d))?,
        b2: store.insert(&format!("{prefix}.b2"), Tensor::zeros(&[1, d]))?,
    })
}

pub fn new_encoder_layer<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dims: &Dims,
) -> Result<EncoderLayer<ParamId>> {
    Ok(EncoderLayer {
        attn: new_attention(store, rng, &format!("{prefix}.attn"), dims)?,
        norm1: new_norm(store, &format!("{prefix}.norm1"), dims.d_model)?,
        ff: new_feed_forward(store, rng, &format!("{prefix}.ff"), dims)?,
        norm2: new_norm(store, &format!("{prefix}.norm2"), dims.d_model)?,
    })
}

pub fn new_decoder<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dims: &Dims,
    layers: usize,
) -> Result<DecoderParams<ParamId>> {
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        out.push(DecoderLayer {
            self_attn: new_attention(store, rng, &format!("{p}.self"), dims)?,
            norm1: new_norm(store, &format!("{p}.norm1"), dims.d_model)?,
            cross_attn: new_attention(store, rng, &format!("{p}.cross"), dims)?,
            norm2: new_norm(store, &format!("{p}.norm2"), dims.d_model)?,
            ff: new_feed_forward(store, rng, &format!("{p}.ff"), dims)?,
            norm3: new_norm(store, &format!("{p}.norm3"), dims.d_model)?,
        });
    }
    Ok(DecoderParams { layers: out })
}

/// Token ids plus type and segment ids, all of equal length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub types: Vec<usize>,
    pub segments: Vec<usize>,
}

impl ModelInput {
    pub fn new(ids: Vec<usize>, types: Vec<usize>, segments: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(contract("empty model input"));
        }
        if ids.len() != types.len() || ids.len() != segments.len() {
            return Err(dim_err(
                "model_input",
                format!("{} tokens, {} types, {} segments", ids.len(), types.len(), segments.len()),
            ));
        }
        Ok(ModelInput { ids, types, segments })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word table `|V| x d` and the shared type/segment table `|S| x d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTables<T> {
    pub word: T,
    pub tag: T,
}

/// Sinusoidal position encoding, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / libm::pow(10_000.0, exponent);
            data[pos * d + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    Tensor::matrix(len, d, data).expect("positive dims")
}

/// Word + position + type + segment embedding of every input position.
pub fn embed_input(g: &mut Graph, tables: &EmbeddingTables<Var>, input: &ModelInput) -> Result<Var> {
    let words = g.gather_rows(tables.word, &input.ids)?;
    let types = g.gather_rows(tables.tag, &input.types)?;
    let segments = g.gather_rows(tables.tag, &input.segments)?;
    let d = g.shape(tables.word)[1];
    let pe = g.constant(positional_encoding(input.len(), d));
    let x = g.add(words, pe)?;
    let x = g.add(x, types)?;
    g.add(x, segments)
}

/// Word + position embedding of decoder input ids. Also returns the word
/// part alone, which feeds the copy gate.
pub fn embed_target(g: &mut Graph, word: Var, ids: &[usize]) -> Result<(Var, Var)> {
    let words = g.gather_rows(word, ids)?;
    let d = g.shape(word)[1];
    let pe = g.constant(positional_encoding(ids.len(), d));
    Ok((g.add(words, pe)?, words))
}

/// Multi-head scaled dot-product attention. Returns the projected output and
/// the attention weights averaged over heads (`queries x keys`).
pub fn attention(
    g: &mut Graph,
    p: &AttentionParams<Var>,
    queries: Var,
    keys: Var,
    dims: &Dims,
    causal: bool,
) -> Result<(Var, Var)> {
    let q = g.matmul(queries, p.wq)?;
    let k = g.matmul(keys, p.wk)?;
    let v = g.matmul(keys, p.wv)?;
    if g.shape(q)[1] != dims.attention_width() {
        return Err(dim_err("attention", format!("projection width {} vs heads*depth {}", g.shape(q)[1], dims.attention_width())));
    }
    let scale = 1.0 / libm::sqrt(dims.depth as f64);
    let mut heads = Vec::with_capacity(dims.heads);
    let mut weights = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let start = h * dims.depth;
        let qh = g.slice_cols(q, start, dims.depth)?;
        let kh = g.slice_cols(k, start, dims.depth)?;
        let vh = g.slice_cols(v, start, dims.depth)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax_rows(scores, causal)?;
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(joined, p.wo)?;
    let avg = if weights.len() == 1 {
        weights[0]
    } else {
        let w = g.constant(Tensor::full(&[1, weights.len()], 1.0 / weights.len() as f64));
        g.weighted_sum(w, &weights)?
    };
    Ok((out, avg))
}

fn feed_forward(g: &mut Graph, p: &FeedForwardParams<Var>, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, p.w2)?;
    g.add_row(o, p.b2)
}

fn add_norm(g: &mut Graph, x: Var, sub: Var, norm: &NormParams<Var>) -> Result<Var> {
    let s = g.add(x, sub)?;
    g.layer_norm(s, norm.gain, norm.bias, LAYER_NORM_EPS)
}

pub fn encoder_layer(g: &mut Graph, p: &EncoderLayer<Var>, x: Var, dims: &Dims) -> Result<Var> {
    let (a, _) = attention(g, &p.attn, x, x, dims, false)?;
    let x = add_norm(g, x, a, &p.norm1)?;
    let f = feed_forward(g, &p.ff, x)?;
    add_norm(g, x, f, &p.norm2)
}

/// `H = TRS_enc(x)` over an embedded input.
pub fn encode(g: &mut Graph, layers: &[EncoderLayer<Var>], x: Var, dims: &Dims) -> Result<Var> {
    if g.shape(x)[1] != dims.d_model {
        return Err(dim_err("encode", format!("embedding width {} vs d_model {}", g.shape(x)[1], dims.d_model)));
    }
    let mut h = x;
    for layer in layers {
        h = encoder_layer(g, layer, h, dims)?;
    }
    Ok(h)
}

/// One decoder layer; returns the output and the head-averaged cross-attention.
pub fn decoder_layer(g: &mut Graph, p: &DecoderLayer<Var>, y: Var, h: Var, dims: &Dims) -> Result<(Var, Var)> {
    let (s, _) = attention(g, &p.self_attn, y, y, dims, true)?;
    let y = add_norm(g, y, s, &p.norm1)?;
    let (c, cross) = attention(g, &p.cross_attn, y, h, dims, false)?;
    let y = add_norm(g, y, c, &p.norm2)?;
    let f = feed_forward(g, &p.ff, y)?;
    Ok((add_norm(g, y, f, &p.norm3)?, cross))
}

/// `O = TRS_dec(E(y_shifted), H)`: every layer applied once, in order.
pub fn decode(g: &mut Graph, theta: &DecoderParams<Var>, y: Var, h: Var, dims: &Dims) -> Result<(Var, Var)> {
    if theta.layers.is_empty() {
        return Err(contract("decoder without layers"));
    }
    g.counter.decoder_passes += 1;
    let mut out = y;
    let mut cross = None;
    for layer in &theta.layers {
        let (o, a) = decoder_layer(g, layer, out, h, dims)?;
        out = o;
        cross = Some(a);
    }
    Ok((out, cross.expect("at least one layer")))
}

/// Weight-shared decoder: the first (only) layer applied `hops` times.
pub fn universal_decode(
    g: &mut Graph,
    theta: &DecoderParams<Var>,
    y: Var,
    h: Var,
    dims: &Dims,
    hops: usize,
) -> Result<(Var, Var)> {
    if hops < 1 {
        return Err(contract("universal decoder needs at least one hop"));
    }
    let layer = theta.layers.first().ok_or_else(|| contract("decoder without layers"))?;
    g.counter.decoder_passes += 1;
    let mut out = y;
    let mut cross = None;
    for _ in 0..hops {
        let (o, a) = decoder_layer(g, layer, out, h, dims)?;
        out = o;
        cross = Some(a);
    }
    Ok((out, cross.expect("at least one hop")))
}

/// Learned scalar gate `p_gen = sigmoid(O w_s + C w_c + E w_e + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyGate<T> {
    pub w_state: T,
    pub w_context: T,
    pub w_input: T,
    pub bias: T,
}

impl CopyGate<ParamId> {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize) -> Result<Self> {
        Ok(CopyGate {
            w_state: store.insert("copy.w_state", init_glorot(rng, d, 1))?,
            w_context: store.insert("copy.w_context", init_glorot(rng, d, 1))?,
            w_input: store.insert("copy.w_input", init_glorot(rng, d, 1))?,
            bias: store.insert("copy.bias", Tensor::zeros(&[1, 1]))?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> CopyGate<Var> {
        CopyGate {
            w_state: g.param(store, self.w_state),
            w_context: g.param(store, self.w_context),
            w_input: g.param(store, self.w_input),
            bias: g.param(store, self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    Learned,
    /// Forces `p_gen` to a constant in [0, 1].
    Fixed(f64),
}

/// What the output layer needs besides the decoder states.
#[derive(Debug, Clone, Copy)]
pub struct OutputInputs<'a> {
    /// Decoder outputs, `k x d`.
    pub states: Var,
    /// Encoder outputs, `n x d`.
    pub memory: Var,
    /// Cross-attention, `k x n`.
    pub attention: Var,
    /// Word embeddings of the decoder inputs, `k x d`.
    pub input_words: Var,
    /// Extended-vocabulary id of every source position.
    pub source_ids: &'a [usize],
    /// In-vocabulary size plus the number of source-only tokens.
    pub extended_vocab: usize,
}

/// Per-step distribution over the extended vocabulary:
/// `p_gen * softmax(O W) + (1 - p_gen) * copy`, where `copy` scatters the
/// cross-attention mass onto the source token ids.
pub fn output_distribution(
    g: &mut Graph,
    w_out: Var,
    gate: &CopyGate<Var>,
    mode: GateMode,
    inp: &OutputInputs<'_>,
) -> Result<Var> {
    let logits = g.matmul(inp.states, w_out)?;
    let (k, vocab) = g.value(logits).dims2()?;
    let n = g.shape(inp.memory)[0];
    if inp.source_ids.len() != n || g.shape(inp.attention) != [k, n] {
        return Err(dim_err(
            "output_distribution",
            format!("{} source ids, memory of {n}, attention {:?}", inp.source_ids.len(), g.shape(inp.attention)),
        ));
    }
    if inp.extended_vocab < vocab {
        return Err(dim_err("output_distribution", format!("extended vocab {} < {vocab}", inp.extended_vocab)));
    }
    let vocab_dist = g.softmax_rows(logits, false)?;
    let vocab_dist = g.pad_cols(vocab_dist, inp.extended_vocab - vocab)?;

    let mut scatter = vec![0.0; n * inp.extended_vocab];
    for (j, &id) in inp.source_ids.iter().enumerate() {
        if id >= inp.extended_vocab {
            return Err(Error::Vocabulary { id, size: inp.extended_vocab });
        }
        scatter[j * inp.extended_vocab + id] = 1.0;
    }
    let scatter = g.constant(Tensor::matrix(n, inp.extended_vocab, scatter)?);
    let copy_dist = g.matmul(inp.attention, scatter)?;

    let p_gen = match mode {
        GateMode::Fixed(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(contract(format!("fixed copy gate {p} outside [0, 1]")));
            }
            g.constant(Tensor::full(&[k, 1], p))
        }
        GateMode::Learned => {
            let context = g.matmul(inp.attention, inp.memory)?;
            let a = g.matmul(inp.states, gate.w_state)?;
            let b = g.matmul(context, gate.w_context)?;
            let c = g.matmul(inp.input_words, gate.w_input)?;
            let z = g.add(a, b)?;
            let z = g.add(z, c)?;
            let bias = g.row(gate.bias, 0)?;
            let ones = g.constant(Tensor::full(&[k, 1], 1.0));
            let bias = g.matmul(ones, bias)?;
            let z = g.add(z, bias)?;
            g.sigmoid(z)?
        }
    };
    let one_minus = g.affine(p_gen, -1.0, 1.0)?;
    let generated = g.mul_col(vocab_dist, p_gen)?;
    let copied = g.mul_col(copy_dist, one_minus)?;
    g.add(generated, copied)
}
