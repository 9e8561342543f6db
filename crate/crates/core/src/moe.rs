//! Recurrent mixture-of-experts baseline: feed-forward experts gated per
//! position between two GRU layers, followed by an attentive GRU decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::gru::{self, GruParams};
use crate::optim::{init_glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardExpert<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams<T> {
    pub lower: GruParams<T>,
    /// `d x r`
    pub gate: T,
    pub experts: Vec<FeedForwardExpert<T>>,
    pub upper: GruParams<T>,
    pub decoder: GruParams<T>,
    /// `2d x d`, merges decoder state with attention context.
    pub combine: T,
}

impl MoeParams<ParamId> {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize, experts: usize) -> Result<Self> {
        let mut ex = Vec::with_capacity(experts);
        let lower = GruParams::new(store, rng, "moe.lower", d, d)?;
        let gate = store.insert("moe.gate", init_glorot(rng, d, experts))?;
        for i in 0..experts {
            ex.push(FeedForwardExpert {
                w: store.insert(&format!("moe.expert{i}.w"), init_glorot(rng, d, d))?,
                b: store.insert(&format!("moe.expert{i}.b"), Tensor::zeros(&[1, d]))?,
            });
        }
        Ok(MoeParams {
            lower,
            gate,
            experts: ex,
            upper: GruParams::new(store, rng, "moe.upper", d, d)?,
            decoder: GruParams::new(store, rng, "moe.decoder", d, d)?,
            combine: store.insert("moe.combine", init_glorot(rng, 2 * d, d))?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> MoeParams<Var> {
        MoeParams {
            lower: self.lower.bind(g, store),
            gate: g.param(store, self.gate),
            experts: self
                .experts
                .iter()
                .map(|e| FeedForwardExpert { w: g.param(store, e.w), b: g.param(store, e.b) })
                .collect(),
            upper: self.upper.bind(g, store),
            decoder: self.decoder.bind(g, store),
            combine: g.param(store, self.combine),
        }
    }
}

/// Encoder: GRU, gated expert layer, GRU. `gate_override` replaces the
/// learned per-position gate with fixed per-expert weights.
pub fn moe_encode(g: &mut Graph, p: &MoeParams<Var>, x: Var, gate_override: Option<&[f64]>) -> Result<Var> {
    let lower = gru::scan(g, &p.lower, x, None)?;
    let h1 = g.stack_rows(&lower)?;
    let n = lower.len();
    let r = p.experts.len();
    let gate = match gate_override {
        Some(w) => {
            if w.len() != r {
                return Err(contract(format!("{} gate weights for {r} experts", w.len())));
            }
            let mut data = Vec::with_capacity(n * r);
            for _ in 0..n {
                data.extend_from_slice(w);
            }
            g.constant(Tensor::matrix(n, r, data)?)
        }
        None => {
            let logits = g.matmul(h1, p.gate)?;
            g.softmax_rows(logits, false)?
        }
    };
    let mut mixed = None;
    for (i, e) in p.experts.iter().enumerate() {
        let y = g.matmul(h1, e.w)?;
        let y = g.add_row(y, e.b)?;
        let y = g.relu(y)?;
        let gi = g.slice_cols(gate, i, 1)?;
        let y = g.mul_col(y, gi)?;
        mixed = Some(match mixed {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    let mixed = mixed.ok_or_else(|| contract("mixture without experts"))?;
    let upper = gru::scan(g, &p.upper, mixed, None)?;
    g.stack_rows(&upper)
}

/// Attentive GRU decoder over embedded decoder inputs `y` (`k x d`).
/// Returns the output states and the attention over `h`.
pub fn moe_decode(g: &mut Graph, p: &MoeParams<Var>, y: Var, h: Var) -> Result<(Var, Var)> {
    g.counter.decoder_passes += 1;
    let n = g.shape(h)[0];
    let last = g.row(h, n - 1)?;
    let states = gru::scan(g, &p.decoder, y, Some(last))?;
    let s = g.stack_rows(&states)?;
    let scores = g.matmul_t(s, h)?;
    let attn = g.softmax_rows(scores, false)?;
    let context = g.matmul(attn, h)?;
    let joined = g.concat_cols(&[s, context])?;
    let o = g.matmul(joined, p.combine)?;
    Ok((g.tanh(o)?, attn))
}
