//! Define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Graph`]; [`Graph::backward`]
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because a node can only reference nodes created before it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cost::OpCounter;
use crate::error::{contract, dim_err, Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    WeightedSum { weights: Var, items: Vec<Var> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    PadCols(Var),
    Sum(Var),
    Nll { probs: Var, targets: Vec<Option<usize>> },
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    pub counter: OpCounter,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(value, op, tracked))
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf that is not bound to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Binding the same id twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                store.add_grad(id, g);
            }
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .map_err(|_| dim_err(op, format!("expected rank 2, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.counter.mul_adds += (m * k * n) as u64;
        let tracked = self.any_tracked(&[a, b]);
        self.push_checked("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_t")?;
        let (n, k2) = self.dims(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err("matmul_t", format!("{m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.counter.mul_adds += (m * k * n) as u64;
        let tracked = self.any_tracked(&[a, b]);
        self.push_checked("matmul_t", Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), tracked))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        crate::tensor::check_same(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let tracked = self.any_tracked(&[a, b]);
        self.push_checked("add", t, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let tracked = self.any_tracked(&[a, b]);
        self.push_checked("sub", t, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let tracked = self.any_tracked(&[a, b]);
        self.push_checked("mul", t, Op::Mul(a, b), tracked)
    }

    /// `x[m x n] + row[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_row")?;
        let (r, c) = self.dims(row, "add_row")?;
        if r != 1 || c != n {
            return Err(dim_err("add_row", format!("{m}x{n} plus {r}x{c}")));
        }
        let b = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let tracked = self.any_tracked(&[x, row]);
        self.push_checked("add_row", Tensor::matrix(m, n, out)?, Op::AddRow(x, row), tracked)
    }

    /// `x[m x n] * col[m x 1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mul_col")?;
        let (r, c) = self.dims(col, "mul_col")?;
        if r != m || c != 1 {
            return Err(dim_err("mul_col", format!("{m}x{n} times {r}x{c}")));
        }
        let g = self.value(col).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (chunk, gv) in out.chunks_mut(n).zip(&g) {
            for o in chunk.iter_mut() {
                *o *= gv;
            }
        }
        let tracked = self.any_tracked(&[x, col]);
        self.push_checked("mul_col", Tensor::matrix(m, n, out)?, Op::MulCol(x, col), tracked)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[x]);
        self.push_checked("affine", t, Op::Affine(x, scale), tracked)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `sum_i weights[i] * items[i]` where `weights` holds one scalar per item.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let w = self.value(weights).data().to_vec();
        if items.is_empty() || w.len() != items.len() {
            return Err(dim_err(
                "weighted_sum",
                format!("{} weights for {} items", w.len(), items.len()),
            ));
        }
        let shape = self.shape(items[0]).to_vec();
        let mut out = vec![0.0; self.value(items[0]).numel()];
        for (&wi, &item) in w.iter().zip(items) {
            let t = self.value(item);
            if t.shape() != shape.as_slice() {
                return Err(dim_err("weighted_sum", format!("{:?} vs {:?}", t.shape(), shape)));
            }
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += wi * v;
            }
        }
        self.counter.mul_adds += (w.len() * out.len()) as u64;
        let mut deps = items.to_vec();
        deps.push(weights);
        let tracked = self.any_tracked(&deps);
        self.push_checked(
            "weighted_sum",
            Tensor::new(shape, out)?,
            Op::WeightedSum { weights, items: items.to_vec() },
            tracked,
        )
    }

    fn map(&mut self, x: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[x]);
        self.push_checked(name, t, op, tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, "sigmoid", Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, "tanh", Op::Tanh(x), libm::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "relu", Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, "log", Op::Log(x), libm::log)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for `j > i`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let valid = if causal { (i + 1).min(n) } else { n };
            softmax_in_place(&mut row[..valid]);
            for v in &mut row[valid..] {
                *v = 0.0;
            }
        }
        let tracked = self.any_tracked(&[x]);
        self.push_checked("softmax", Tensor::matrix(m, n, out)?, Op::Softmax(x), tracked)
    }

    /// Row-wise layer normalization with learned scale and offset (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        for p in [gamma, beta] {
            let (r, c) = self.dims(p, "layer_norm")?;
            if r != 1 || c != n {
                return Err(dim_err("layer_norm", format!("{m}x{n} with {r}x{c} affine")));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let mut normed = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[i] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                normed[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let tracked = self.any_tracked(&[x, gamma, beta]);
        self.push_checked(
            "layer_norm",
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm { x, gamma, beta, normed, rstd },
            tracked,
        )
    }

    /// Selects rows of `table` by id.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(dim_err("gather_rows", "empty id list".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let tracked = self.any_tracked(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), cols, out)?,
            Op::Gather { table, ids: ids.to_vec() },
            tracked,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(dim_err("slice_cols", format!("[{start}, {}) of {n} columns", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat_cols", "nothing to concatenate".into()));
        }
        let m = self.dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(dim_err("concat_cols", format!("row counts {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "row")?;
        if i >= m {
            return Err(dim_err("row", format!("row {i} of {m}")));
        }
        let data = self.value(x).row_slice(i).to_vec();
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::matrix(1, n, data)?, Op::Row(x, i), tracked))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(dim_err("stack_rows", "no rows".into()));
        }
        let n = self.dims(rows[0], "stack_rows")?.1;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let (a, b) = self.dims(r, "stack_rows")?;
            if a != 1 || b != n {
                return Err(dim_err("stack_rows", format!("{a}x{b} vs 1x{n}")));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let tracked = self.any_tracked(rows);
        Ok(self.push(Tensor::matrix(rows.len(), n, out)?, Op::StackRows(rows.to_vec()), tracked))
    }

    /// Appends `extra` zero columns.
    pub fn pad_cols(&mut self, x: Var, extra: usize) -> Result<Var> {
        if extra == 0 {
            return Ok(x);
        }
        let (m, n) = self.dims(x, "pad_cols")?;
        let mut out = Vec::with_capacity(m * (n + extra));
        for i in 0..m {
            out.extend_from_slice(self.value(x).row_slice(i));
            out.extend(core::iter::repeat_n(0.0, extra));
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::matrix(m, n + extra, out)?, Op::PadCols(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let tracked = self.any_tracked(&[x]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// `-sum_t log probs[t, target_t]`, skipping `None` targets.
    pub fn nll(&mut self, probs: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (k, v) = self.dims(probs, "nll")?;
        if targets.len() != k {
            return Err(dim_err("nll", format!("{k} rows for {} targets", targets.len())));
        }
        let p = self.value(probs);
        let mut loss = 0.0;
        for (t, target) in targets.iter().enumerate() {
            if let Some(y) = *target {
                if y >= v {
                    return Err(Error::Vocabulary { id: y, size: v });
                }
                loss -= libm::log(p.get(t, y));
            }
        }
        let tracked = self.any_tracked(&[probs]);
        self.push_checked("nll", Tensor::scalar(loss), Op::Nll { probs, targets: targets.to_vec() }, tracked)
    }

    /// Summed binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(dim_err("bce", format!("{} logits for {} targets", z.len(), targets.len())));
        }
        let loss = z.iter().zip(targets).map(|(&z, &v)| softplus(z) - v * z).sum();
        let tracked = self.any_tracked(&[logits]);
        self.push_checked(
            "bce",
            Tensor::scalar(loss),
            Op::BceLogits { logits, targets: targets.to_vec() },
            tracked,
        )
    }

    /// Reverse pass from a scalar. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).cols();
                if self.is_tracked(*a) {
                    let ga = self.grad_buf(grads, *a);
                    kernels::gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.is_tracked(*b) {
                    let gb = self.grad_buf(grads, *b);
                    kernels::gemm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T, a: m x k, b: n x k
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).rows();
                if self.is_tracked(*a) {
                    let ga = self.grad_buf(grads, *a);
                    kernels::gemm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.is_tracked(*b) {
                    let gb = self.grad_buf(grads, *b);
                    kernels::gemm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let ga = self.grad_buf(grads, *a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_to(grads, *a, g);
                self.add_to(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_to(grads, *a, g);
                if self.is_tracked(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if self.is_tracked(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                self.add_to(grads, *x, g);
                if self.is_tracked(*row) {
                    let n = out.cols();
                    let gr = self.grad_buf(grads, *row);
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::MulCol(x, col) => {
                let n = out.cols();
                if self.is_tracked(*x) {
                    let cv = self.value(*col).data();
                    let gx = self.grad_buf(grads, *x);
                    for ((gx_row, g_row), c) in gx.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        gx_row.iter_mut().zip(g_row).for_each(|(o, v)| *o += v * c);
                    }
                }
                if self.is_tracked(*col) {
                    let xv = self.value(*x).data();
                    let gc = self.grad_buf(grads, *col);
                    for ((o, g_row), x_row) in gc.iter_mut().zip(g.chunks(n)).zip(xv.chunks(n)) {
                        *o += g_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Affine(x, scale) => {
                if self.is_tracked(*x) {
                    let gx = self.grad_buf(grads, *x);
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += scale * v);
                }
            }
            Op::WeightedSum { weights, items } => {
                let w = self.value(*weights).data().to_vec();
                for (wi, &item) in w.iter().zip(items) {
                    if self.is_tracked(item) {
                        let gi = self.grad_buf(grads, item);
                        gi.iter_mut().zip(g).for_each(|(o, v)| *o += wi * v);
                    }
                }
                if self.is_tracked(*weights) {
                    let dots: Vec<f64> = items
                        .iter()
                        .map(|&item| self.value(item).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    let gw = self.grad_buf(grads, *weights);
                    gw.iter_mut().zip(dots).for_each(|(o, d)| *o += d);
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), s) in gx.iter_mut().zip(g).zip(y) {
                    *o += gv * s * (1.0 - s);
                }
            }
            Op::Tanh(x) => {
                let y = out.data();
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), t) in gx.iter_mut().zip(g).zip(y) {
                    *o += gv * (1.0 - t * t);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    *o += gv / v;
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                let gx = self.grad_buf(grads, *x);
                for ((gx_row, g_row), y_row) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let n = out.cols();
                let gam = self.value(*gamma).data();
                if self.is_tracked(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (i, (gx_row, g_row)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let xh = &normed[i * n..(i + 1) * n];
                        let mut mean_gy = 0.0;
                        let mut mean_gy_xh = 0.0;
                        for j in 0..n {
                            let gy = g_row[j] * gam[j];
                            mean_gy += gy;
                            mean_gy_xh += gy * xh[j];
                        }
                        mean_gy /= n as f64;
                        mean_gy_xh /= n as f64;
                        for j in 0..n {
                            let gy = g_row[j] * gam[j];
                            gx_row[j] += rstd[i] * (gy - mean_gy - xh[j] * mean_gy_xh);
                        }
                    }
                }
                if self.is_tracked(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for (g_row, xh) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            gg[j] += g_row[j] * xh[j];
                        }
                    }
                }
                if self.is_tracked(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for g_row in g.chunks(n) {
                        gb.iter_mut().zip(g_row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let n = out.cols();
                let gt = self.grad_buf(grads, *table);
                for (g_row, &id) in g.chunks(n).zip(ids) {
                    gt[id * n..(id + 1) * n].iter_mut().zip(g_row).for_each(|(o, v)| *o += v);
                }
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let n = self.value(*x).cols();
                let gx = self.grad_buf(grads, *x);
                for (i, g_row) in g.chunks(w).enumerate() {
                    gx[i * n + start..i * n + start + w]
                        .iter_mut()
                        .zip(g_row)
                        .for_each(|(o, v)| *o += v);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.is_tracked(p) {
                        let gp = self.grad_buf(grads, p);
                        for (i, gp_row) in gp.chunks_mut(w).enumerate() {
                            gp_row
                                .iter_mut()
                                .zip(&g[i * total + offset..i * total + offset + w])
                                .for_each(|(o, v)| *o += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Row(x, i) => {
                let n = out.cols();
                let gx = self.grad_buf(grads, *x);
                gx[i * n..(i + 1) * n].iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            Op::StackRows(rows) => {
                let n = out.cols();
                for (&r, g_row) in rows.iter().zip(g.chunks(n)) {
                    self.add_to(grads, r, g_row);
                }
            }
            Op::PadCols(x) => {
                let total = out.cols();
                let n = self.value(*x).cols();
                let gx = self.grad_buf(grads, *x);
                for (gx_row, g_row) in gx.chunks_mut(n).zip(g.chunks(total)) {
                    gx_row.iter_mut().zip(g_row).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sum(x) => {
                let gx = self.grad_buf(grads, *x);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Nll { probs, targets } => {
                let v = self.value(*probs).cols();
                let p = self.value(*probs).data();
                let gp = self.grad_buf(grads, *probs);
                for (t, target) in targets.iter().enumerate() {
                    if let Some(y) = *target {
                        gp[t * v + y] -= g[0] / p[t * v + y];
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let gz = self.grad_buf(grads, *logits);
                for ((o, &zv), &tv) in gz.iter_mut().zip(z).zip(targets) {
                    *o += g[0] * (sigmoid(zv) - tv);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn add_to(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.is_tracked(v) {
            let buf = self.grad_buf(grads, v);
            buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}
