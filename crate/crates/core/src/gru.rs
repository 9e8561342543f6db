use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::optim::{init_glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gated recurrent unit. Gate order in the packed matrices is
/// update, reset, candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams<T> {
    /// Input weights, `d_in x 3h`.
    pub w: T,
    /// Recurrent weights of the update and reset gates, `h x 2h`.
    pub u_gates: T,
    /// Recurrent weights of the candidate, `h x h`.
    pub u_cand: T,
    /// `1 x 3h`
    pub bias: T,
}

impl GruParams<ParamId> {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(GruParams {
            w: store.insert(&format!("{prefix}.w"), init_glorot(rng, d_in, 3 * hidden))?,
            u_gates: store.insert(&format!("{prefix}.u_gates"), init_glorot(rng, hidden, 2 * hidden))?,
            u_cand: store.insert(&format!("{prefix}.u_cand"), init_glorot(rng, hidden, hidden))?,
            bias: store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[1, 3 * hidden]))?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> GruParams<Var> {
        GruParams {
            w: g.param(store, self.w),
            u_gates: g.param(store, self.u_gates),
            u_cand: g.param(store, self.u_cand),
            bias: g.param(store, self.bias),
        }
    }
}

impl GruParams<Var> {
    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.u_cand)[0]
    }
}

/// One step given the precomputed input projection `xw` (`1 x 3h`, bias included).
fn step(g: &mut Graph, p: &GruParams<Var>, xw: Var, prev: Var, hidden: usize) -> Result<Var> {
    let x_gates = g.slice_cols(xw, 0, 2 * hidden)?;
    let x_cand = g.slice_cols(xw, 2 * hidden, hidden)?;
    let h_gates = g.matmul(prev, p.u_gates)?;
    let gates = g.add(x_gates, h_gates)?;
    let gates = g.sigmoid(gates)?;
    let update = g.slice_cols(gates, 0, hidden)?;
    let reset = g.slice_cols(gates, hidden, hidden)?;
    let reset_prev = g.mul(reset, prev)?;
    let h_cand = g.matmul(reset_prev, p.u_cand)?;
    let cand = g.add(x_cand, h_cand)?;
    let cand = g.tanh(cand)?;
    // prev + z * (cand - prev)
    let delta = g.sub(cand, prev)?;
    let delta = g.mul(update, delta)?;
    g.add(prev, delta)
}

/// Left-to-right scan over the rows of `xs` (`n x d_in`). Returns every
/// hidden state; the initial state defaults to zeros.
pub fn scan(g: &mut Graph, p: &GruParams<Var>, xs: Var, initial: Option<Var>) -> Result<Vec<Var>> {
    let n = g.shape(xs)[0];
    if n == 0 {
        return Err(contract("recurrent scan over an empty sequence"));
    }
    let hidden = p.hidden(g);
    let xw = g.matmul(xs, p.w)?;
    let xw = g.add_row(xw, p.bias)?;
    let mut prev = match initial {
        Some(h) => h,
        None => g.constant(Tensor::zeros(&[1, hidden])),
    };
    let mut states = Vec::with_capacity(n);
    for t in 0..n {
        let row = g.row(xw, t)?;
        prev = step(g, p, row, prev, hidden)?;
        states.push(prev);
    }
    Ok(states)
}
