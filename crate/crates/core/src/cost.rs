//! Operation-count model comparing parameter mixing against output mixing.
//!
//! Experts are modelled as affine maps `W_i: d -> n` applied to a length-`t`
//! sequence. Output mixing runs every expert and sums the `r` outputs;
//! parameter mixing sums the `r` weight matrices once and runs one map.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};

/// Counters updated while a forward pass runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mul_adds: u64,
    pub decoder_passes: u64,
    /// Scalars touched while summing expert parameters.
    pub param_sum_elements: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: &OpCounter) {
        self.mul_adds += other.mul_adds;
        self.decoder_passes += other.decoder_passes;
        self.param_sum_elements += other.param_sum_elements;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub experts: u64,
    pub seq_len: u64,
    pub input_dim: u64,
    pub output_dim: u64,
}

impl CostModel {
    pub fn new(experts: u64, seq_len: u64, input_dim: u64, output_dim: u64) -> Result<Self> {
        if experts == 0 || seq_len == 0 || input_dim == 0 || output_dim == 0 {
            return Err(contract(format!(
                "cost model needs r, t, d, n >= 1, got ({experts}, {seq_len}, {input_dim}, {output_dim})"
            )));
        }
        Ok(CostModel { experts, seq_len, input_dim, output_dim })
    }
}

/// `r t d n + r t n`: every expert applied to the sequence, then the outputs summed.
pub fn moe_cost(m: &CostModel) -> u64 {
    let CostModel { experts: r, seq_len: t, input_dim: d, output_dim: n } = *m;
    r * t * d * n + r * t * n
}

/// `(r + t) d n`: weights summed once, then a single map.
pub fn aop_cost(m: &CostModel) -> u64 {
    let CostModel { experts: r, seq_len: t, input_dim: d, output_dim: n } = *m;
    (r + t) * d * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRow {
    pub model: CostModel,
    pub moe: u64,
    pub aop: u64,
    /// False for rows outside the claim's hypothesis (`t < 2` or `r < 2`).
    pub asserted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TheoremReport {
    pub rows: Vec<GridRow>,
    pub violations: Vec<GridRow>,
}

impl TheoremReport {
    pub fn checked(&self) -> usize {
        self.rows.iter().filter(|r| r.asserted).count()
    }

    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates both closed forms on every grid point. Rows with `t >= 2` and
/// `r >= 2` must satisfy `aop < moe`; anything else is reported but not asserted.
pub fn verify_theorem(grid: &[CostModel]) -> TheoremReport {
    let mut rows = Vec::with_capacity(grid.len());
    let mut violations = Vec::new();
    for m in grid {
        let row = GridRow {
            model: *m,
            moe: moe_cost(m),
            aop: aop_cost(m),
            asserted: m.seq_len >= 2 && m.experts >= 2,
        };
        if row.asserted && row.aop >= row.moe {
            violations.push(row);
        }
        rows.push(row);
    }
    TheoremReport { rows, violations }
}

/// Cartesian product of the four axes.
pub fn grid(experts: &[u64], seq_lens: &[u64], input_dims: &[u64], output_dims: &[u64]) -> Result<Vec<CostModel>> {
    let mut out = Vec::new();
    for &r in experts {
        for &t in seq_lens {
            for &d in input_dims {
                for &n in output_dims {
                    out.push(CostModel::new(r, t, d, n)?);
                }
            }
        }
    }
    Ok(out)
}

/// r in 2..=13, t in 2..=64, d and n in {8, 64, 300}.
pub fn default_grid() -> Vec<CostModel> {
    let experts: Vec<u64> = (2..=13).collect();
    let seq_lens: Vec<u64> = (2..=64).collect();
    grid(&experts, &seq_lens, &[8, 64, 300], &[8, 64, 300]).expect("positive axes")
}
