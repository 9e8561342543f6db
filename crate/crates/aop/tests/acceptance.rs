//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runtime budgets count as part of each
//! criterion.

use std::time::{Duration, Instant};

use aop::bench::{bench_model, empirical_compare, random_inputs};
use aop::checkpoint::Checkpoint;
use aop::config::{Preset, RunConfig};
use aop::corpus::DataDir;
use aop::pipeline::{compose, domain_of, encode_all, gradcheck_run, has_query_prefix, predict, query_exact_match, train_model};
use aop_core::cost::{default_grid, verify_theorem};
use aop_core::data::PersonaProfile;
use aop_core::graph::Graph;
use aop_core::metrics::{bleu, consistency, entity_f1, perplexity, EntityLexicon, KeywordOracle, Nli};
use aop_core::model::{AlphaMode, Mixing, Model, ModelConfig, Variant};
use aop_core::query::{query_kind, synthesize_book_query, synthesize_sql_query, Clause, Query, Relation, DOMAINS, slot_order};
use aop_core::synthetic::generate_synthetic_corpus;
use aop_core::training::{attention_error_rate, token_nll};
use aop_core::transformer::{decode, universal_decode, Dims, GateMode};
use aop_core::tensor::Tensor;
use aop_core::vocab::Vocabularies;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const DESK: Dims = Dims { d_model: 64, heads: 2, depth: 16, filter: 128 };

/// One-hot agreement between AoP, AoR and a single expert.
const ONE_HOT_TOL: f64 = 1e-12;
/// Finite-difference relative error bound.
const GRAD_TOL: f64 = 1e-4;
/// Reference corpus BLEU from sacrebleu 2.x (`tokenize="none"`,
/// `smooth_method="none"`) on `BLEU_HYPS`/`BLEU_REFS`.
const BLEU_REFERENCE: f64 = 60.701397085193186;
const BLEU_TOL: f64 = 0.01;
const PPL_TOL: f64 = 1e-9;
const MIN_QUERY_EM: f64 = 0.95;
const MAX_ATTENTION_ERROR: f64 = 0.05;

const BLEU_HYPS: [&str; 5] = [
    "there are 3 hotels in the north , do you have a price range ?",
    "i have booked a table for 2 at pizza hut , reference number is 8kl2",
    "the train leaves at 09:15 and arrives at 10:07",
    "SELECT * FROM hotel WHERE area=north stars=4",
    "you are welcome , have a nice day",
];
const BLEU_REFS: [&str; 5] = [
    "there are 3 hotels in the north area , do you have any price range in mind ?",
    "i booked a table for 2 people at pizza hut , the reference number is 8kl2",
    "the train leaves at 09:15 and arrives by 10:07",
    "SELECT * FROM hotel WHERE area=north stars=4",
    "you are welcome , enjoy your stay",
];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn theorem() -> Outcome {
    let report = verify_theorem(&default_grid());
    let strict = report.rows.iter().all(|r| r.aop < r.moe);
    check(
        report.holds() && strict && report.checked() == 12 * 63 * 9,
        format!("{} grid points, {} violations, strict everywhere: {strict}", report.checked(), report.violations.len()),
    )
}

fn invocation_counts() -> Outcome {
    let r = 13;
    let vocab = 200;
    let model = bench_model(r, DESK, vocab, 2).map_err(|e| e.to_string())?;
    let inputs = random_inputs(4, 32, vocab, r, 2).map_err(|e| e.to_string())?;
    let t = empirical_compare(&model, &inputs, 21).map_err(|e| e.to_string())?;
    check(
        t.aop_decoder_passes == 1
            && t.aor_decoder_passes == r as u64
            && t.aop_param_sum_elements == r as u64 * t.expert_flat_len
            && t.aop_median_s < t.aor_median_s,
        format!(
            "passes AoP {} / AoR {}, param-sum {} = {r} x {}, t = {}, median AoP {:.4} s vs AoR {:.4} s (ratio {:.2})",
            t.aop_decoder_passes,
            t.aor_decoder_passes,
            t.aop_param_sum_elements,
            t.expert_flat_len,
            t.seq_len,
            t.aop_median_s,
            t.aor_median_s,
            t.speedup
        ),
    )
}

fn probs(m: &Model, ex: &aop_core::vocab::Encoded, alpha: &AlphaMode, mixing: Mixing) -> Result<Vec<f64>, String> {
    let mut g = Graph::new();
    let f = m.forward_with(&mut g, ex, alpha, mixing, GateMode::Learned).map_err(|e| e.to_string())?;
    Ok(g.value(f.probs).data().to_vec())
}

fn one_hot_equivalence() -> Outcome {
    let r = 4;
    let vocab = 120;
    let model = bench_model(r, DESK, vocab, 3).map_err(|e| e.to_string())?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let t = rng.gen_range(1..10);
        let ex = &random_inputs(1, t, vocab, r, 1000 + k).map_err(|e| e.to_string())?[0];
        for i in 0..r {
            let mut e = vec![0.0; r];
            e[i] = 1.0;
            let alpha = AlphaMode::Fixed(e);
            let aop = probs(&model, ex, &alpha, Mixing::Parameters)?;
            let aor = probs(&model, ex, &alpha, Mixing::Representations)?;
            let mut g = Graph::new();
            let direct = model.expert_forward(&mut g, ex, i).map_err(|e| e.to_string())?;
            let direct = g.value(direct).data().to_vec();
            worst = worst.max(max_abs_diff(&aop, &direct)).max(max_abs_diff(&aor, &direct));
        }
    }
    check(worst <= ONE_HOT_TOL, format!("100 inputs x {r} experts at d_model 64, max |diff| {worst:.2e} (tol {ONE_HOT_TOL:e})"))
}

fn gradient_checks() -> Outcome {
    let report = gradcheck_run(Variant::Aop, 8, 3, 7).map_err(|e| e.to_string())?;
    let names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
    let covers = |prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    let covered = ["router.keys", "router.query.", "copy.", "expert0.", "expert1.", "expert2.", "emb.", "enc.", "out.w"]
        .iter()
        .all(|p| covers(p));
    let max = report.max_rel_error();
    check(
        max < GRAD_TOL && covered,
        format!("{} scalars in {} tensors, max relative error {max:.2e} (tol {GRAD_TOL:e}), all groups covered: {covered}", report.checked(), report.params.len()),
    )
}

fn query_synthesis() -> Outcome {
    let hotel = synthesize_sql_query(
        "hotel",
        &[Clause::eq("pricerange", "cheap"), Clause::eq("stars", "2"), Clause::eq("type", "hotel")],
    )
    .map_err(|e| e.to_string())?;
    let hotel = Query::from_tokens(&hotel).map_err(|e| e.to_string())?.render();
    let train = synthesize_sql_query(
        "train",
        &[
            Clause::eq("departure", "london"),
            Clause::with("arriveBy", Relation::Less, "1530"),
            Clause::eq("day", "monday"),
            Clause::eq("destination", "cambridge"),
        ],
    )
    .map_err(|e| e.to_string())?
    .join(" ");
    let hotel_ok = hotel == r#"SELECT * FROM hotel WHERE pricerange="cheap" AND stars="2" AND type="hotel""#;
    let train_ok = train == "SELECT * FROM train WHERE destination = cambridge AND day = monday AND arriveBy < 1530 AND departure = london";

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
    let mut parsed = 0;
    let total = 1000;
    for _ in 0..total {
        let domain = DOMAINS[rng.gen_range(0..DOMAINS.len())];
        let slots = slot_order(domain);
        let clauses: Vec<Clause> = (0..rng.gen_range(1..5))
            .map(|_| Clause::eq(slots[rng.gen_range(0..slots.len())], &format!("v{}", rng.gen_range(0..100))))
            .collect();
        let q = if rng.gen() { synthesize_sql_query(domain, &clauses) } else { synthesize_book_query(domain, &clauses) };
        if let Ok(tokens) = q {
            if query_kind(&tokens).is_some() && Query::from_tokens(&tokens).is_ok_and(|q| Query::parse(&q.render()).is_ok()) {
                parsed += 1;
            }
        }
    }
    let corpus = generate_synthetic_corpus(7, [2000, 200, 200]).map_err(|e| e.to_string())?;
    let targets: Vec<&Vec<String>> = corpus.train.iter().chain(&corpus.valid).chain(&corpus.test).map(|e| &e.target).collect();
    let queries = targets.iter().filter(|t| query_kind(t).is_some()).count();
    let corpus_ok = targets.iter().filter(|t| query_kind(t).is_some()).all(|t| Query::from_tokens(t).is_ok());
    check(
        hotel_ok && train_ok && parsed == total && corpus_ok,
        format!(
            "hotel string exact: {hotel_ok}, train string exact: {train_ok}, {parsed}/{total} random queries parse, {queries} corpus queries parse: {corpus_ok}"
        ),
    )
}

fn metric_oracles() -> Outcome {
    let hyps: Vec<Vec<String>> = BLEU_HYPS.iter().map(|s| toks(s)).collect();
    let refs: Vec<Vec<String>> = BLEU_REFS.iter().map(|s| toks(s)).collect();
    let b = bleu(&hyps, &refs, false).map_err(|e| e.to_string())?;
    let bleu_ok = (b - BLEU_REFERENCE).abs() <= BLEU_TOL;

    let mut lex = EntityLexicon::new();
    for e in ["acorn", "north", "cheap"] {
        lex.insert(e, e);
    }
    let gold = vec![toks("the acorn is in the north")];
    let f1s = [
        entity_f1(&[toks("acorn north")], &gold, &lex).f1(),
        entity_f1(&[toks("no entities here")], &gold, &lex).f1(),
        entity_f1(&[toks("acorn cheap")], &gold, &lex).f1(),
    ];
    let f1_ok = f1s == [1.0, 0.0, 0.5];

    let words = ["i", "have", "a", "dog", "cat", "tea", "coffee", "like"];
    let mut oracle = KeywordOracle::new()
        .rule("dog", "dog", Nli::Entail)
        .rule("cat", "dog", Nli::Contradict)
        .rule("tea", "coffee", Nli::Contradict)
        .rule("tea", "tea", Nli::Entail);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
    let sentence = |rng: &mut Xoshiro256PlusPlus| -> Vec<String> {
        (0..rng.gen_range(1..6)).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
    };
    let mut additive = 0;
    for _ in 0..1000 {
        let u = sentence(&mut rng);
        let p1: Vec<Vec<String>> = (0..rng.gen_range(0..5)).map(|_| sentence(&mut rng)).collect();
        let p2: Vec<Vec<String>> = (0..rng.gen_range(0..5)).map(|_| sentence(&mut rng)).collect();
        let c = |s: Vec<Vec<String>>, o: &mut KeywordOracle| consistency(&u, &PersonaProfile { sentences: s }, o);
        let a = c(p1.clone(), &mut oracle).map_err(|e| e.to_string())?;
        let b = c(p2.clone(), &mut oracle).map_err(|e| e.to_string())?;
        let joined = c([p1, p2].concat(), &mut oracle).map_err(|e| e.to_string())?;
        additive += usize::from(joined == a + b);
    }

    let corpus = generate_synthetic_corpus(31, [36, 6, 24]).map_err(|e| e.to_string())?;
    let vocab = Vocabularies::build(&corpus.train, &corpus.skills);
    let test = encode_all(&vocab, &corpus.test).map_err(|e| e.to_string())?;
    let model = Model::new(ModelConfig {
        variant: Variant::Aop,
        vocab_size: vocab.words.len(),
        tag_size: vocab.tags.len(),
        dims: Dims { d_model: 8, heads: 2, depth: 4, filter: 16 },
        layers: 1,
        hops: 1,
        skills: vocab.skills.clone(),
        normalize_oracle: true,
        seed: 31,
    })
    .map_err(|e| e.to_string())?;
    let (nll, count) = token_nll(&model, &test).map_err(|e| e.to_string())?;
    let ppl = perplexity(&model, &test).map_err(|e| e.to_string())?;
    let ppl_err = (ppl - (nll / count as f64).exp()).abs();
    check(
        bleu_ok && f1_ok && additive == 1000 && ppl_err <= PPL_TOL,
        format!(
            "BLEU {b:.4} vs reference {BLEU_REFERENCE:.4} (tol {BLEU_TOL}), entity F1 {f1s:?}, additivity {additive}/1000, |ppl - exp(mean nll)| {ppl_err:.1e}"
        ),
    )
}

fn universal_variant() -> Outcome {
    let corpus = generate_synthetic_corpus(9, [36, 6, 6]).map_err(|e| e.to_string())?;
    let vocab = Vocabularies::build(&corpus.train, &corpus.skills);
    let cfg = |variant, hops| ModelConfig {
        variant,
        vocab_size: vocab.words.len(),
        tag_size: vocab.tags.len(),
        dims: DESK,
        layers: 1,
        hops,
        skills: vocab.skills.clone(),
        normalize_oracle: true,
        seed: 9,
    };
    let new = |variant, hops| Model::new(cfg(variant, hops)).map_err(|e| e.to_string());
    let (one, six) = (new(Variant::AopUniversal, 1)?, new(Variant::AopUniversal, 6)?);
    let same_count = one.store.numel() == six.store.numel();

    // Decoder level: one hop of the shared layer is the plain decoder.
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
    let mut random = |rows: usize| {
        Tensor::matrix(rows, DESK.d_model, (0..rows * DESK.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let (y, h) = (random(5), random(7));
    let mut g = Graph::new();
    let theta = one.expert_params()[0].bind(&mut g, &one.store);
    let (y, h) = (g.constant(y), g.constant(h));
    let (plain, _) = decode(&mut g, &theta, y, h, &DESK).map_err(|e| e.to_string())?;
    let (hop, _) = universal_decode(&mut g, &theta, y, h, &DESK, 1).map_err(|e| e.to_string())?;
    let decoder_equal = g.value(plain) == g.value(hop);

    // Model level: AoP+U with one hop against AoP with one layer, same seed.
    let plain_model = new(Variant::Aop, 1)?;
    let mut model_equal = plain_model.store.snapshot() == one.store.snapshot();
    for ex in &corpus.test {
        let ex = vocab.encode(ex).map_err(|e| e.to_string())?;
        let a = probs(&one, &ex, &AlphaMode::Learned, Mixing::Parameters)?;
        let b = probs(&plain_model, &ex, &AlphaMode::Learned, Mixing::Parameters)?;
        model_equal &= a == b;
    }
    check(
        same_count && decoder_equal && model_equal,
        format!(
            "parameters hops=1 {} vs hops=6 {}, one hop == plain decode bitwise: decoder {decoder_equal}, full model {model_equal}",
            one.store.numel(),
            six.store.numel()
        ),
    )
}

fn train_desk(variant: Variant, data: &DataDir) -> Result<Checkpoint, String> {
    let mut run = RunConfig::preset(Preset::Desk, variant);
    run.seed = 7;
    run.patience = 6;
    run.max_epochs = 30;
    run.normalize_oracle = true;
    let start = Instant::now();
    let (ckpt, report) = train_model(&run, data, |r| {
        eprintln!(
            "  [{}] epoch {:>2} train {:.4} skill {:.4} valid {:.4} attn-err {:.3}",
            variant.name(),
            r.epoch,
            r.train_token_loss,
            r.train_skill_loss,
            r.valid_token_loss,
            r.attention_error_rate
        )
    })
    .map_err(|e| e.to_string())?;
    eprintln!(
        "  [{}] best epoch {} of {} ({:.0} s)",
        variant.name(),
        report.best_epoch,
        report.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(ckpt)
}

fn score(ckpt: &Checkpoint, data: &DataDir) -> Result<(usize, usize, f64), String> {
    let preds = predict(ckpt, &data.test, ckpt.max_len).map_err(|e| e.to_string())?;
    let (hits, total) = query_exact_match(&preds, &data.test);
    let test = encode_all(&ckpt.vocab, &data.test).map_err(|e| e.to_string())?;
    let err = attention_error_rate(&ckpt.model, &test).map_err(|e| e.to_string())?;
    Ok((hits, total, err))
}

/// Trains the three AoP variants; also hands back the learned-weight model.
fn synthetic_benchmark() -> (Option<Checkpoint>, Outcome) {
    let mut aop = None;
    let outcome = run_benchmark(&mut aop);
    (aop, outcome)
}

fn run_benchmark(aop: &mut Option<Checkpoint>) -> Outcome {
    let data: DataDir = generate_synthetic_corpus(7, [2000, 200, 200]).map_err(|e| e.to_string())?.into();
    let mut results = Vec::new();
    for variant in [Variant::Aop, Variant::AopNoSkillLoss, Variant::AopOracle] {
        let ckpt = train_desk(variant, &data)?;
        let (hits, total, err) = score(&ckpt, &data)?;
        results.push((variant, hits as f64 / total as f64, err, format!("{}: EM {hits}/{total}, attn-err {err:.3}", variant.name())));
        if variant == Variant::Aop {
            *aop = Some(ckpt);
        }
    }
    let (em, err) = (results[0].1, results[0].2);
    let ok = em >= MIN_QUERY_EM && err <= MAX_ATTENTION_ERROR && results[1].2 > err && results[2].1 >= em;
    let detail = results.iter().map(|r| r.3.clone()).collect::<Vec<_>>().join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(format!("{detail} (AoP needs EM >= {MIN_QUERY_EM}, attn-err <= {MAX_ATTENTION_ERROR}; ablation error must exceed AoP; oracle EM must be >= AoP)"))
    }
}

fn composition(aop: &Checkpoint) -> Outcome {
    let dir = std::env::temp_dir().join(format!("aop-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("aop.bin");
    aop.save(&path).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);

    let data: DataDir = generate_synthetic_corpus(7, [2000, 200, 200]).map_err(|e| e.to_string())?.into();
    let domains: Vec<String> = ckpt.vocab.skills.iter().filter(|s| *s != "SQL" && *s != "BOOK").cloned().collect();
    let mut rows = 0;
    let mut good = 0;
    let mut first_bad = None;
    for d in &domains {
        let contexts: Vec<_> = data.test.iter().filter(|ex| ex.domain() == Some(d.as_str())).collect();
        if contexts.is_empty() {
            return Err(format!("no test context for {d}"));
        }
        let sets = vec![vec!["SQL".to_string(), d.clone()], vec!["BOOK".to_string(), d.clone()]];
        for ctx in contexts {
            let out = compose(&ckpt, ctx, &sets, ckpt.max_len).map_err(|e| e.to_string())?;
            for (row, api) in out.iter().zip(["SQL", "BOOK"]) {
                rows += 1;
                if has_query_prefix(&row.response, api, &domain_of(d)) {
                    good += 1;
                } else if first_bad.is_none() {
                    first_bad = Some(format!("{{{api}, {d}}} -> {}", row.response.join(" ")));
                }
            }
        }
    }
    let mut detail = format!("{good}/{rows} composed rows carry the expected prefix over domains {domains:?}");
    if let Some(bad) = first_bad {
        detail.push_str(&format!("; first miss: {bad}"));
    }
    check(good == rows, detail)
}

struct Line {
    id: usize,
    title: &'static str,
    budget: Duration,
}

fn report(line: &Line, elapsed: Duration, outcome: &Outcome) -> bool {
    let in_budget = elapsed <= line.budget;
    let pass = outcome.is_ok() && in_budget;
    let detail = match outcome {
        Ok(d) | Err(d) => d,
    };
    println!(
        "criterion {} {}: {} | {} | {:.2} s (budget {} s{})",
        line.id,
        if pass { "PASS" } else { "FAIL" },
        line.title,
        detail,
        elapsed.as_secs_f64(),
        line.budget.as_secs(),
        if in_budget { "" } else { ", exceeded" }
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    // Ignore libtest flags such as `--nocapture` or `--quiet`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: usize| filter.is_empty() || filter.iter().any(|f| f == &id.to_string());
    let secs = Duration::from_secs;
    let simple: [(Line, fn() -> Outcome); 7] = [
        (Line { id: 1, title: "cost theorem over the default grid", budget: secs(1) }, theorem),
        (Line { id: 2, title: "decoder invocation counts and timing", budget: secs(60) }, invocation_counts),
        (Line { id: 3, title: "one-hot equivalence of AoP, AoR and a single expert", budget: secs(60) }, one_hot_equivalence),
        (Line { id: 4, title: "finite-difference gradients of the full AoP model", budget: secs(300) }, gradient_checks),
        (Line { id: 6, title: "query synthesis strings and grammar", budget: secs(1) }, query_synthesis),
        (Line { id: 7, title: "metric oracles", budget: secs(10) }, metric_oracles),
        (Line { id: 8, title: "universal variant", budget: secs(10) }, universal_variant),
    ];
    let mut all = true;
    for (line, f) in simple.iter().filter(|(l, _)| wanted(l.id)) {
        let (outcome, elapsed) = timed(f);
        all &= report(line, elapsed, &outcome);
    }
    if wanted(5) || wanted(9) {
        let bench_line = Line { id: 5, title: "synthetic multi-skill benchmark", budget: secs(30 * 60) };
        let ((aop, outcome), elapsed) = timed(synthetic_benchmark);
        all &= report(&bench_line, elapsed, &outcome);
        let compose_line = Line { id: 9, title: "skill composition with manual weights", budget: secs(60) };
        let (outcome, elapsed) = match &aop {
            Some(ckpt) => timed(|| composition(ckpt)),
            None => (Err("needs the trained AoP model from criterion 5".to_string()), Duration::ZERO),
        };
        all &= report(&compose_line, elapsed, &outcome);
    }
    if !all {
        std::process::exit(1);
    }
}
