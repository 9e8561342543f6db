use std::path::Path;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = aop::cli::run(std::iter::once("aop").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const SUBCOMMANDS: [&str; 6] = ["prepare-data", "train", "eval", "compose", "bench", "gradcheck"];

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let (code, out, _) = run(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub}");
        assert!(out.contains("Usage: aop"), "{sub}: {out}");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&[]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    for sub in SUBCOMMANDS {
        let (code, _, err) = run(&[sub, "--no-such-flag"]);
        assert_eq!(code, 2, "{sub}: {err}");
    }
    assert_eq!(run(&["bench", "--grid", "r=1;t=2", "--no-timing"]).0, 2);
    assert_eq!(run(&["gradcheck", "--variant", "Foo"]).0, 1);
}

#[test]
fn runtime_errors_exit_with_1() {
    let (code, _, err) = run(&["eval", "--checkpoint", "/nonexistent/m.bin", "--data", "/nonexistent"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn bench_reports_the_theorem_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let (code, out, err) = run(&["bench", "--grid", "default", "--no-timing", "--out", out_path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("0 violations"), "{out}");
    assert!(err.contains("# grid = default"), "config echo: {err}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(json["theorem"]["rows"].as_array().unwrap().len(), 12 * 63 * 9);
    assert_eq!(json["theorem"]["violations"], 0);
}

#[test]
fn gradcheck_command_passes() {
    let (code, out, err) = run(&["gradcheck", "--dims", "8", "--experts", "3", "--seed", "7"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("PASS"));
}

fn prepare(dir: &Path) -> String {
    let data = dir.join("data");
    let (code, _, err) = run(&["prepare-data", "--output", data.to_str().unwrap(), "--synthetic-sizes", "48,12,12", "--seed", "2"]);
    assert_eq!(code, 0, "{err}");
    data.display().to_string()
}

#[test]
fn prepare_data_is_deterministic_and_revalidates() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (prepare(a.path()), prepare(b.path()));
    for f in ["skills.txt", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(Path::new(&da).join(f)).unwrap(), std::fs::read(Path::new(&db).join(f)).unwrap());
    }
    let copy = a.path().join("copy");
    let schema = Path::new(&da).join("skills.txt");
    let (code, _, err) =
        run(&["prepare-data", "--input", &da, "--schema", schema.to_str().unwrap(), "--output", copy.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(Path::new(&da).join("train.jsonl")).unwrap(), std::fs::read(copy.join("train.jsonl")).unwrap());
    let other = a.path().join("other.txt");
    std::fs::write(&other, "SQL\nBOOK\n").unwrap();
    let (code, _, _) =
        run(&["prepare-data", "--input", &da, "--schema", other.to_str().unwrap(), "--output", copy.to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn train_eval_compose_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path());
    let ckpt = dir.path().join("m.bin");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "d_model = 8\ndepth = 4\nfilter = 16\nmax_epochs = 5\n").unwrap();
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--data", &data, "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        run(&args)
    };
    let (code, out, err) = train(&["--max-epochs", "2", "--seed", "4"]);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("# max_epochs = 2") && err.contains("# d_model = 8"), "{err}");
    assert!(out.contains("best epoch"));
    let first = std::fs::read(&ckpt).unwrap();
    let log = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,"));
    train(&["--max-epochs", "2", "--seed", "4"]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), first, "same argv and seed give the same checkpoint");

    let json = dir.path().join("r.json");
    let tsv = dir.path().join("a.tsv");
    let (code, out, err) = run(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--json", json.to_str().unwrap(),
        "--alpha-tsv", tsv.to_str().unwrap(), "--max-len", "8",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("PPL"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report["ppl"].as_f64().unwrap() > 1.0);
    let tsv = std::fs::read_to_string(&tsv).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "id\tSQL\tBOOK\tHotel\tTrain");
    assert_eq!(tsv.lines().count(), 13);

    let test = std::fs::read_to_string(Path::new(&data).join("test.jsonl")).unwrap();
    let mut ctx: serde_json::Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    ctx.as_object_mut().unwrap().remove("target");
    ctx.as_object_mut().unwrap().remove("skills");
    let ctx_path = dir.path().join("ctx.json");
    std::fs::write(&ctx_path, ctx.to_string()).unwrap();
    let compose = |extra: &[&str]| {
        let mut args = vec!["compose", "--checkpoint", ckpt.to_str().unwrap(), "--context", ctx_path.to_str().unwrap(), "--max-len", "5"];
        args.extend_from_slice(extra);
        run(&args)
    };
    let (code, out, err) = compose(&["--skills", "SQL,Train"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("1001") && out.contains("alpha[SQL,Train] = [0.500, 0.000, 0.000, 0.500]"), "{out}");
    let (code, out, _) = compose(&[]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().filter(|l| l.starts_with("alpha[")).count(), 8);
    assert_ne!(compose(&["--skills", "Weather"]).0, 0);
}
