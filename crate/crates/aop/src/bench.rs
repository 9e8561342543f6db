//! Cost-theorem tables and wall-clock comparison of the two mixing paths.

use std::time::Instant;

use aop_core::cost::{default_grid, grid, verify_theorem, CostModel, OpCounter, TheoremReport};
use aop_core::experts::SkillVector;
use aop_core::graph::Graph;
use aop_core::model::{AlphaMode, Model, ModelConfig, Variant};
use aop_core::transformer::{Dims, ModelInput};
use aop_core::vocab::{Encoded, SOS_ID, UNK_ID};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses `default` or `r=A;t=B;d=C;n=D`, where each list is comma-separated
/// values or `lo-hi` ranges, e.g. `r=2-4;t=2,8;d=8;n=8`.
pub fn parse_grid(spec: &str) -> Result<Vec<CostModel>> {
    if spec == "default" {
        return Ok(default_grid());
    }
    let bad = |m: String| Error::Usage(format!("grid `{spec}`: {m}"));
    let mut axes: [Option<Vec<u64>>; 4] = Default::default();
    for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, list) = part.split_once('=').ok_or_else(|| bad(format!("`{part}` is not `axis=values`")))?;
        let slot = match key.trim() {
            "r" => 0,
            "t" => 1,
            "d" => 2,
            "n" => 3,
            other => return Err(bad(format!("unknown axis `{other}`"))),
        };
        let mut values = Vec::new();
        for item in list.split(',') {
            let item = item.trim();
            let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(format!("`{s}` is not a number")));
            match item.split_once('-') {
                Some((lo, hi)) => values.extend(num(lo)?..=num(hi)?),
                None => values.push(num(item)?),
            }
        }
        axes[slot] = Some(values);
    }
    let [r, t, d, n] = axes.map(|a| a.unwrap_or_default());
    if [&r, &t, &d, &n].iter().any(|a| a.is_empty()) {
        return Err(bad("every axis r, t, d, n needs at least one value".into()));
    }
    grid(&r, &t, &d, &n).map_err(|e| bad(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRowJson {
    pub r: u64,
    pub t: u64,
    pub d: u64,
    pub n: u64,
    pub moe: u64,
    pub aop: u64,
    /// Whether the row lies inside the theorem's hypothesis.
    pub asserted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremJson {
    pub checked: usize,
    pub asserted: usize,
    pub violations: usize,
    pub rows: Vec<GridRowJson>,
}

impl From<&TheoremReport> for TheoremJson {
    fn from(r: &TheoremReport) -> Self {
        let row = |g: &aop_core::cost::GridRow| GridRowJson {
            r: g.model.experts,
            t: g.model.seq_len,
            d: g.model.input_dim,
            n: g.model.output_dim,
            moe: g.moe,
            aop: g.aop,
            asserted: g.asserted,
        };
        TheoremJson {
            checked: r.checked(),
            asserted: r.rows.iter().filter(|g| g.asserted).count(),
            violations: r.violations.len(),
            rows: r.rows.iter().map(row).collect(),
        }
    }
}

pub fn theorem_table(grid: &[CostModel]) -> (TheoremReport, TheoremJson) {
    let report = verify_theorem(grid);
    let json = TheoremJson::from(&report);
    (report, json)
}

/// Skill names for a bench model with `r` experts.
pub fn bench_skills(r: usize) -> Vec<String> {
    (0..r).map(|i| format!("skill{i}")).collect()
}

/// An untrained AoP model; timing does not depend on the weights.
pub fn bench_model(r: usize, dims: Dims, vocab_size: usize, seed: u64) -> Result<Model> {
    Ok(Model::new(ModelConfig {
        variant: Variant::Aop,
        vocab_size,
        tag_size: 2,
        dims,
        layers: 1,
        hops: 1,
        skills: bench_skills(r),
        normalize_oracle: true,
        seed,
    })?)
}

/// Random source and target sequences of length `t`.
pub fn random_inputs(count: usize, t: usize, vocab_size: usize, r: usize, seed: u64) -> Result<Vec<Encoded>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(UNK_ID + 1..vocab_size)).collect();
        let mut decoder_input = vec![SOS_ID];
        decoder_input.extend((1..t).map(|_| rng.gen_range(UNK_ID + 1..vocab_size)));
        let targets = decoder_input[1..].iter().copied().chain([rng.gen_range(UNK_ID + 1..vocab_size)]).collect();
        out.push(Encoded {
            input: ModelInput::new(ids.clone(), vec![0; t], vec![1; t])?,
            source_ext: ids,
            oov: Vec::new(),
            decoder_input,
            targets,
            skills: SkillVector::empty(r),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalReport {
    pub experts: usize,
    pub seq_len: usize,
    pub inputs: usize,
    pub reps: usize,
    /// Median seconds to run every input once.
    pub aop_median_s: f64,
    pub aor_median_s: f64,
    /// `aor_median_s / aop_median_s`.
    pub speedup: f64,
    /// Decoder passes per forward; every forward is checked to agree.
    pub aop_decoder_passes: u64,
    pub aor_decoder_passes: u64,
    pub aop_param_sum_elements: u64,
    pub expert_flat_len: u64,
    pub aop_mul_adds: u64,
    pub aor_mul_adds: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Times `aop_forward` against `aor_forward` on the same model and inputs.
/// Counters come from a single forward per input and must be identical
/// across inputs.
pub fn empirical_compare(model: &Model, inputs: &[Encoded], reps: usize) -> Result<EmpiricalReport> {
    if inputs.is_empty() || reps == 0 {
        return Err(Error::Usage("empirical comparison needs inputs and at least one repetition".into()));
    }
    let alpha = AlphaMode::Learned;
    let count = |aop: bool| -> Result<OpCounter> {
        let mut first: Option<OpCounter> = None;
        for ex in inputs {
            let mut g = Graph::new();
            if aop {
                model.aop_forward(&mut g, ex, &alpha)?;
            } else {
                model.aor_forward(&mut g, ex, &alpha)?;
            }
            let c = g.counter;
            match &first {
                Some(f) if f.decoder_passes != c.decoder_passes || f.param_sum_elements != c.param_sum_elements => {
                    return Err(Error::Format("operation counts differ between inputs".into()))
                }
                Some(_) => {}
                None => first = Some(c),
            }
        }
        Ok(first.expect("inputs are non-empty"))
    };
    let aop_count = count(true)?;
    let aor_count = count(false)?;

    let time = |aop: bool| -> Result<f64> {
        let start = Instant::now();
        for ex in inputs {
            let mut g = Graph::new();
            if aop {
                model.aop_forward(&mut g, ex, &alpha)?;
            } else {
                model.aor_forward(&mut g, ex, &alpha)?;
            }
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let (mut aop_t, mut aor_t) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for rep in 0..reps {
        // Alternate the order so drift affects both paths alike.
        if rep % 2 == 0 {
            aop_t.push(time(true)?);
            aor_t.push(time(false)?);
        } else {
            aor_t.push(time(false)?);
            aop_t.push(time(true)?);
        }
    }
    let expert = &model.expert_params()[0];
    let flat: usize = expert.leaves().iter().map(|&&id| model.store.value(id).numel()).sum();
    let (aop_median_s, aor_median_s) = (median(aop_t), median(aor_t));
    Ok(EmpiricalReport {
        experts: model.num_experts(),
        seq_len: inputs[0].decoder_input.len(),
        inputs: inputs.len(),
        reps,
        aop_median_s,
        aor_median_s,
        speedup: aor_median_s / aop_median_s,
        aop_decoder_passes: aop_count.decoder_passes,
        aor_decoder_passes: aor_count.decoder_passes,
        aop_param_sum_elements: aop_count.param_sum_elements,
        expert_flat_len: flat as u64,
        aop_mul_adds: aop_count.mul_adds,
        aor_mul_adds: aor_count.mul_adds,
    })
}
