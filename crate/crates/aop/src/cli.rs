//! Command-line front-end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use aop_core::model::Variant;
use aop_core::synthetic::generate_synthetic_corpus;
use aop_core::training::EpochRecord;
use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_model, empirical_compare, parse_grid, random_inputs, theorem_table};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{load_context, load_skills, DataDir};
use crate::error::{io_err, Error, Result};
use crate::export::alpha_tsv;
use crate::nli::ProcessOracle;
use crate::pipeline::{
    compose, default_skill_sets, evaluate_checkpoint, format_compose, format_report, gradcheck_run, EvalJson,
};

#[derive(Debug, Parser)]
#[command(name = "aop", version, about = "Attention over parameters: train, evaluate and benchmark expert decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a data directory (skills.txt and train/valid/test.jsonl).
    PrepareData(PrepareArgs),
    /// Train a model and write a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Decode a split and score it.
    Eval(EvalArgs),
    /// Decode one context under hand-picked skill sets.
    Compose(ComposeArgs),
    /// Check the cost theorem on a grid and time both mixing paths.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Output data directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Existing data directory to validate and copy instead of generating.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Skill list for `--input` (defaults to its skills.txt).
    #[arg(long, requires = "input")]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Sizes of the generated train, valid and test splits.
    #[arg(long, value_delimiter = ',', default_values_t = [2000, 200, 200])]
    pub synthetic_sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// `desk` or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    /// TRS, TRS+U, MoE, AoR, AoP, AoP+U, AoP-noLV or AoP-O.
    #[arg(long)]
    pub variant: Option<String>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub filter: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warm-up steps, or `none` for a constant rate.
    #[arg(long)]
    pub warmup: Option<String>,
    #[arg(long)]
    pub normalize_oracle: Option<bool>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut add = |k: &'static str, x: Option<String>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        add("preset", self.preset.clone());
        add("variant", self.variant.clone());
        add("d_model", self.d_model.map(|x| x.to_string()));
        add("heads", self.heads.map(|x| x.to_string()));
        add("depth", self.depth.map(|x| x.to_string()));
        add("filter", self.filter.map(|x| x.to_string()));
        add("layers", self.layers.map(|x| x.to_string()));
        add("hops", self.hops.map(|x| x.to_string()));
        add("experts", self.experts.map(|x| x.to_string()));
        add("seed", self.seed.map(|x| x.to_string()));
        add("batch_size", self.batch_size.map(|x| x.to_string()));
        add("max_epochs", self.max_epochs.map(|x| x.to_string()));
        add("patience", self.patience.map(|x| x.to_string()));
        add("lr", self.lr.map(|x| x.to_string()));
        add("warmup", self.warmup.clone());
        add("normalize_oracle", self.normalize_oracle.map(|x| x.to_string()));
        add("max_len", self.max_len.map(|x| x.to_string()));
        v
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.pairs())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Data directory written by `prepare-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-epoch CSV log (defaults to the checkpoint path with `.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the skill weights used per example as TSV.
    #[arg(long)]
    pub alpha_tsv: Option<PathBuf>,
    /// Write one decoded response per line.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// NLI oracle command, e.g. `python3 nli.py`; enables consistency.
    #[arg(long)]
    pub nli: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON object with history, memory, types and segments.
    #[arg(long)]
    pub context: PathBuf,
    /// Comma-separated skill set; repeat for several rows. Defaults to every
    /// single skill plus each API skill paired with each domain.
    #[arg(long)]
    pub skills: Vec<String>,
    /// Also print the rows as JSON.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `default` or `r=2-13;t=2-64;d=8,64;n=8,64`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Timing repetitions; the median is reported.
    #[arg(long, default_value_t = 21)]
    pub reps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 13)]
    pub experts: usize,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    /// Inputs per timing repetition.
    #[arg(long, default_value_t = 4)]
    pub inputs: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Only evaluate the closed-form cost table.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model width.
    #[arg(long, default_value_t = 8)]
    pub dims: usize,
    #[arg(long, default_value_t = 3)]
    pub experts: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "AoP")]
    pub variant: String,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn echo(err: &mut dyn Write, lines: &[(&str, String)]) {
    for (k, v) in lines {
        let _ = writeln!(err, "# {k} = {v}");
    }
}

fn w(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(io_err("<stdout>"))
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::PrepareData(a) => prepare_data(a, out, err),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Eval(a) => eval_cmd(a, out, err),
        Command::Compose(a) => compose_cmd(a, out, err),
        Command::Bench(a) => bench_cmd(a, out, err),
        Command::Gradcheck(a) => gradcheck_cmd(a, out, err),
    }
}

fn prepare_data(a: PrepareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let data = match &a.input {
        Some(input) => {
            echo(err, &[("input", input.display().to_string()), ("output", a.output.display().to_string())]);
            let data = DataDir::load(input)?;
            if let Some(schema) = &a.schema {
                if load_skills(schema)? != data.skills {
                    return Err(Error::Format(format!(
                        "skills in {} differ from the schema {}",
                        input.display(),
                        schema.display()
                    )));
                }
            }
            data
        }
        None => {
            let sizes: [usize; 3] = a
                .synthetic_sizes
                .clone()
                .try_into()
                .map_err(|_| Error::Usage("--synthetic-sizes takes three values: train,valid,test".into()))?;
            echo(err, &[("seed", a.seed.to_string()), ("synthetic_sizes", format!("{sizes:?}"))]);
            generate_synthetic_corpus(a.seed, sizes)?.into()
        }
    };
    data.save(&a.output)?;
    w(
        out,
        &format!(
            "wrote {} ({} skills; {}/{}/{} examples)\n",
            a.output.display(),
            data.skills.len(),
            data.train.len(),
            data.valid.len(),
            data.test.len()
        ),
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let run = a.model.resolve()?;
    let _ = write!(err, "{}", run.echo().lines().map(|l| format!("# {l}\n")).collect::<String>());
    let data = DataDir::load(&a.data)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.checkpoint.with_extension("csv"));
    let mut log = format!("{}\n", EpochRecord::CSV_HEADER);
    let (ckpt, report) = crate::pipeline::train_model(&run, &data, |r| {
        log.push_str(&r.csv_row());
        log.push('\n');
        let _ = writeln!(
            err,
            "epoch {:>3}  train {:.4}  skill {:.4}  valid {:.4}  attn-err {:.3}",
            r.epoch, r.train_token_loss, r.train_skill_loss, r.valid_token_loss, r.attention_error_rate
        );
    })?;
    ckpt.save(&a.checkpoint)?;
    write_file(&log_path, &log)?;
    w(
        out,
        &format!(
            "best epoch {} (valid token loss {:.6}) after {} epochs, {} steps; wrote {} and {}\n",
            report.best_epoch,
            report.best_valid_loss,
            report.epochs.len(),
            report.steps,
            a.checkpoint.display(),
            log_path.display()
        ),
    )
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = DataDir::load(&a.data)?;
    if data.skills != ckpt.vocab.skills {
        return Err(Error::Format("data skills differ from the checkpoint's".into()));
    }
    let max_len = a.max_len.unwrap_or(ckpt.max_len);
    echo(
        err,
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("variant", ckpt.model.variant().name().to_string()),
            ("split", a.split.clone()),
            ("max_len", max_len.to_string()),
        ],
    );
    let examples = data.split(&a.split)?;
    let mut oracle = match &a.nli {
        Some(cmd) => {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts.next().ok_or_else(|| Error::Usage("--nli needs a command".into()))?;
            Some(ProcessOracle::spawn(&program, &parts.collect::<Vec<_>>())?)
        }
        None => None,
    };
    let (report, predictions) = evaluate_checkpoint(
        &ckpt,
        examples,
        max_len,
        oracle.as_mut().map(|o| o as &mut dyn aop_core::metrics::NliOracle),
    )?;
    w(out, &format_report(&report))?;
    if let Some(path) = &a.json {
        let json = serde_json::to_string_pretty(&EvalJson::from(&report)).expect("report serializes");
        write_file(path, &(json + "\n"))?;
    }
    if let Some(path) = &a.alpha_tsv {
        let rows: Vec<(String, Vec<f64>)> =
            predictions.iter().enumerate().map(|(i, p)| (i.to_string(), p.alpha.clone())).collect();
        write_file(path, &alpha_tsv(&ckpt.vocab.skills, &rows))?;
    }
    if let Some(path) = &a.predictions {
        let text: String = predictions.iter().map(|p| p.tokens.join(" ") + "\n").collect();
        write_file(path, &text)?;
    }
    Ok(())
}

fn compose_cmd(a: ComposeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let skills = &ckpt.vocab.skills;
    let context = load_context(&a.context, skills)?;
    let sets: Vec<Vec<String>> = if a.skills.is_empty() {
        default_skill_sets(skills)
    } else {
        a.skills.iter().map(|s| s.split(',').map(|x| x.trim().to_string()).collect()).collect()
    };
    for set in &sets {
        if let Some(bad) = set.iter().find(|s| !skills.contains(s)) {
            return Err(Error::Usage(format!("unknown skill `{bad}` (declared: {})", skills.join(", "))));
        }
    }
    let max_len = a.max_len.unwrap_or(ckpt.max_len);
    echo(
        err,
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("context", a.context.display().to_string()),
            ("normalize_oracle", ckpt.model.config.normalize_oracle.to_string()),
            ("max_len", max_len.to_string()),
        ],
    );
    let rows = compose(&ckpt, &context, &sets, max_len)?;
    w(out, &format_compose(&rows, skills))?;
    for r in &rows {
        let alpha: Vec<String> = r.alpha.iter().map(|a| format!("{a:.3}")).collect();
        w(out, &format!("alpha[{}] = [{}]\n", r.skills.join(","), alpha.join(", ")))?;
    }
    if a.json {
        w(out, &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"))?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct BenchJson {
    theorem: crate::bench::TheoremJson,
    timing: Option<crate::bench::EmpiricalReport>,
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    echo(
        err,
        &[
            ("grid", a.grid.clone()),
            ("reps", a.reps.to_string()),
            ("experts", a.experts.to_string()),
            ("seq_len", a.seq_len.to_string()),
            ("inputs", a.inputs.to_string()),
            ("d_model", a.d_model.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let grid = parse_grid(&a.grid)?;
    let (report, json) = theorem_table(&grid);
    w(
        out,
        &format!(
            "cost theorem: {} grid points, {} inside the hypothesis (r>=2, t>=2), {} violations\n",
            json.checked,
            json.asserted,
            json.violations
        ),
    )?;
    for v in report.violations.iter().take(10) {
        let m = v.model;
        w(out, &format!("  violation r={} t={} d={} n={}: aop {} > moe {}\n", m.experts, m.seq_len, m.input_dim, m.output_dim, v.aop, v.moe))?;
    }
    let timing = if a.no_timing {
        None
    } else {
        if !a.d_model.is_multiple_of(2) || a.d_model == 0 {
            return Err(Error::Usage("--d-model must be even".into()));
        }
        let dims = aop_core::transformer::Dims { d_model: a.d_model, heads: 2, depth: a.d_model / 4, filter: 2 * a.d_model };
        let vocab = 200;
        let model = bench_model(a.experts, dims, vocab, a.seed)?;
        let inputs = random_inputs(a.inputs, a.seq_len, vocab, a.experts, a.seed)?;
        let t = empirical_compare(&model, &inputs, a.reps)?;
        w(
            out,
            &format!(
                "decoder passes per forward: AoP {}, AoR {}\nparameter-sum elements (AoP): {} = {} x {}\nmedian wall time over {} reps: AoP {:.6} s, AoR {:.6} s, AoR/AoP {:.2}\n",
                t.aop_decoder_passes,
                t.aor_decoder_passes,
                t.aop_param_sum_elements,
                t.experts,
                t.expert_flat_len,
                t.reps,
                t.aop_median_s,
                t.aor_median_s,
                t.speedup
            ),
        )?;
        Some(t)
    };
    if let Some(path) = &a.out {
        let body = serde_json::to_string_pretty(&BenchJson { theorem: json, timing }).expect("report serializes");
        write_file(path, &(body + "\n"))?;
    }
    if !report.holds() {
        return Err(Error::Format(format!("{} grid points violate the cost theorem", report.violations.len())));
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let variant = Variant::parse(&a.variant)?;
    echo(
        err,
        &[
            ("variant", variant.name().to_string()),
            ("dims", a.dims.to_string()),
            ("experts", a.experts.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let report = gradcheck_run(variant, a.dims, a.experts, a.seed)?;
    let worst = report.params.iter().max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error));
    w(
        out,
        &format!(
            "checked {} scalars in {} tensors; max relative error {:.3e}{}\n",
            report.checked(),
            report.params.len(),
            report.max_rel_error(),
            worst.map_or(String::new(), |p| format!(" ({})", p.name))
        ),
    )?;
    if report.passes() {
        w(out, "PASS\n")
    } else {
        Err(Error::Format(format!("gradient check failed: max relative error {:.3e}", report.max_rel_error())))
    }
}
