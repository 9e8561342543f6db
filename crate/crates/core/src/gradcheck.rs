//! Central finite-difference checks of reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::optim::ParamId;
use crate::tensor::Tensor;
use crate::training::{example_loss, TrainConfig};
use crate::vocab::Encoded;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor. Central differences of an O(10) loss carry about
/// 1e-9 of round-off, so gradients below the floor are judged by absolute
/// error instead.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(FLOOR);
    (analytic - numeric).abs() / scale
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point)?;
        point[i] = orig - h;
        let down = f(&point)?;
        point[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Checks an operation built by `build` on tracked copies of `inputs`. The
/// output is reduced with fixed random weights so every element matters.
/// Returns the largest relative error over all input coordinates.
pub fn check_op(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut weights: Option<Tensor> = None;
    let mut eval = |values: &[Tensor], backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = weights
            .get_or_insert_with(|| {
                let shape = g.shape(out).to_vec();
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("same shape")
            })
            .clone();
        let w = g.constant(w);
        let weighted = g.mul(out, w)?;
        let loss = g.sum(weighted)?;
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if backward {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.numel()]));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut values = inputs.to_vec();
        let numeric = central_difference(
            |x| {
                values[k] = Tensor::new(input.shape().to_vec(), x.to_vec())?;
                Ok(eval(&values, false)?.0)
            },
            input.data(),
            STEP,
        )?;
        for (a, n) in analytic[k].iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude, to spot dead parameters.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.numel).sum()
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }
}

fn loss_value(model: &Model, ex: &Encoded, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = example_loss(model, &mut g, ex, cfg)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the training-loss gradient of every parameter of `model` on `ex`
/// with central differences.
pub fn check_model(model: &mut Model, ex: &Encoded, cfg: &TrainConfig) -> Result<GradReport> {
    model.store.zero_grad();
    let mut g = Graph::new();
    let (loss, _) = example_loss(model, &mut g, ex, cfg)?;
    g.backward(loss)?;
    g.accumulate_into(&mut model.store);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = model.store.grad(id).to_vec();
        let original = model.store.value(id).clone();
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let x = original.data()[i];
            model.store.value_mut(id).data_mut()[i] = x + STEP;
            let up = loss_value(model, ex, cfg)?;
            model.store.value_mut(id).data_mut()[i] = x - STEP;
            let down = loss_value(model, ex, cfg)?;
            model.store.value_mut(id).data_mut()[i] = x;
            worst = worst.max(relative_error(*a, (up - down) / (2.0 * STEP)));
        }
        params.push(ParamCheck {
            name: String::from(model.store.name(id)),
            numel: analytic.len(),
            max_rel_error: worst,
            max_abs_grad: analytic.iter().fold(0.0, |m, g| m.max(g.abs())),
        });
    }
    model.store.zero_grad();
    Ok(GradReport { params })
}
