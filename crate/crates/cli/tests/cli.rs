//! End-to-end runs of the `cherryq` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cherryq::lm::{Checkpoint, ModelConfig, Payload, Storage, ToyLm};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke_config() -> PathBuf {
    root().join("configs/smoke.toml")
}

fn corpus() -> PathBuf {
    root().join("data/sample.txt")
}

fn cherryq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cherryq"))
        .args(args)
        .env_remove("CHERRYQ_DATA_DIR")
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cherryq(args);
    assert!(
        out.status.success(),
        "cherryq {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn validate(value: &Value, schema: &str) {
    let schema: Value = read_json(&root().join("docs/schemas").join(format!("{schema}.schema.json")));
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(value) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{msgs:#?}");
}

/// Header and per-cell types of a CSV against `docs/schemas/<name>.csv.json`.
fn validate_csv(path: &Path, schema: &str) -> usize {
    let schema = read_json(&root().join("docs/schemas").join(format!("{schema}.csv.json")));
    let cols = schema["columns"].as_array().unwrap();
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let names: Vec<&str> = cols.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(header, names, "{}", path.display());
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        for (cell, c) in rec.iter().zip(cols) {
            let good = match c["type"].as_str().unwrap() {
                "string" => !cell.is_empty(),
                "integer" => cell.parse::<u64>().is_ok(),
                "real" => cell.parse::<f64>().is_ok(),
                "enum" => c["values"].as_array().unwrap().iter().any(|v| v == cell),
                t => panic!("unknown column type {t}"),
            };
            assert!(good, "{}: `{cell}` is not a valid {}", path.display(), c["name"]);
        }
        rows += 1;
    }
    if let Some(max) = schema["max_rows"].as_u64() {
        assert!(rows as u64 <= max);
    }
    rows
}

/// One shared base model for the tests that need a checkpoint.
fn base() -> &'static Path {
    static BASE: OnceLock<PathBuf> = OnceLock::new();
    BASE.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("cherryq-cli-test-{}", std::process::id()));
        let out = dir.join("base");
        ok(&["train-base", "-c", s(&smoke_config()), "-o", s(&out)]);
        out.join("base.chrq")
    })
}

#[test]
fn train_base_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train-base", "-c", s(&smoke_config()), "-o", s(out)]);
        assert!(out.join("base.chrq").exists());
    }
    assert_eq!(sha(&a.join("base.chrq")), sha(&b.join("base.chrq")));
    assert_eq!(sha(&a.join("train_log.json")), sha(&b.join("train_log.json")));

    let manifest = read_json(&a.join("manifest.json"));
    validate(&manifest, "manifest");
    assert_eq!(manifest["config"]["train"]["steps"], 10);
    assert!(manifest["wall_clock_seconds"].is_number());
    let log = read_json(&a.join("train_log.json"));
    validate(&log, "train_log");
    assert_eq!(log["steps"].as_array().unwrap().len(), 10);

    // the embedded manifest carries no wall clock
    let ck = Checkpoint::load(a.join("base.chrq")).unwrap();
    assert!(ck.manifest.get("wall_clock_seconds").is_none());
    assert_eq!(ck.manifest["inputs"][0]["sha256"], manifest["inputs"][0]["sha256"]);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["train-base", "-c", s(&smoke_config()), "--set", "train.steps=3", "-o", s(dir.path())]);
    let log = read_json(&dir.path().join("train_log.json"));
    assert_eq!(log["steps"].as_array().unwrap().len(), 3);
}

#[test]
fn missing_corpus_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-corpus.txt");
    let out = cherryq(&["train-base", "-c", s(&smoke_config()), "--corpus", s(&missing), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-corpus.txt"));
}

#[test]
fn data_dir_env_supplies_the_default_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    // the smoke config without its [data] section
    let text = std::fs::read_to_string(smoke_config()).unwrap().replace("corpus = \"data/sample.txt\"", "");
    std::fs::write(&cfg, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cherryq"))
        .args(["eval", s(base()), "-c", s(&cfg)])
        .env("CHERRYQ_DATA_DIR", root().join("data"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(env!("CARGO_BIN_EXE_cherryq"))
        .args(["eval", s(base()), "-c", s(&cfg)])
        .env("CHERRYQ_DATA_DIR", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    for bad in ["train.stepz=3", "quant.bits=7", "model.heads=7"] {
        let out = cherryq(&["avgbits", "-c", s(&smoke_config()), "--set", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
    let out = cherryq(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn avgbits_prints_the_table_values() {
    let cases: [(&[&str], &str); 6] = [
        (&[], "3.1758"),
        (&["quant.group_size=64"], "3.3008"),
        (&["quant.bits=4"], "4.1719"),
        (&["quant.bits=2", "quant.scale_trick=true"], "2.1836"),
        (&["quant.cherry_fraction=0"], "3.1250"),
        (&["quant.cherry_fraction=0", "quant.group_size=64"], "3.2500"),
    ];
    for (sets, want) in cases {
        let mut args = vec!["avgbits", "--set", "quant.group_size=128"];
        for x in sets {
            args.extend(["--set", x]);
        }
        assert_eq!(ok(&args).trim(), want, "{sets:?}");
    }
}

#[test]
fn eval_reports_finite_perplexity() {
    let out = ok(&["eval", s(base()), "-c", s(&smoke_config())]);
    let v: Value = serde_json::from_str(&out).unwrap();
    validate(&v, "eval");
    let ppl = v["perplexity"].as_f64().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    assert!(v["tokens"].as_u64().unwrap() > 0);
    assert_eq!(v["config"]["split"], "val");
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.chrq");
    let mut bytes = std::fs::read(base()).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&bad, &bytes).unwrap();
    let out = cherryq(&["eval", s(&bad), "-c", s(&smoke_config())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

fn analyze(dir: &Path, checkpoint: &Path, extra: &[&str]) -> Value {
    let cfg = smoke_config();
    let mut args = vec!["analyze", s(checkpoint), "-c", s(&cfg), "-o", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    read_json(&dir.join("overlap.json"))
}

#[test]
fn analyze_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let overlap = analyze(dir.path(), base(), &["--save-maps"]);
    validate(&overlap, "overlap");
    assert_eq!(overlap["within"].as_array().unwrap().len(), 1);
    assert!(overlap["across"].as_array().unwrap().is_empty());

    validate(&read_json(&dir.path().join("summary.json")), "summary");
    validate(&read_json(&dir.path().join("manifest.json")), "manifest");
    validate(&read_json(&dir.path().join("impact_maps.json")), "impact_maps");

    // three metrics for each of the six matrices of a 1-layer model
    assert_eq!(validate_csv(&dir.path().join("heterogeneity.csv"), "heterogeneity"), 18);
    let mut r = csv::Reader::from_path(dir.path().join("heterogeneity.csv")).unwrap();
    for rec in r.records() {
        let score: f64 = rec.unwrap()[2].parse().unwrap();
        assert!(score >= 1.0);
    }
    let scatter: Vec<_> = std::fs::read_dir(dir.path().join("scatter")).unwrap().collect();
    assert_eq!(scatter.len(), 6);
    for f in scatter {
        let n = validate_csv(&f.unwrap().path(), "scatter");
        assert!(n > 0 && n <= 4096);
    }
}

#[test]
fn analyze_pairs_all_splits() {
    let dir = tempfile::tempdir().unwrap();
    let overlap = analyze(dir.path(), base(), &["--set", "analyze.splits=5", "--set", "analyze.windows_per_split=4"]);
    assert_eq!(overlap["within"].as_array().unwrap().len(), 10);

    let dir = tempfile::tempdir().unwrap();
    let overlap = analyze(
        dir.path(),
        base(),
        &["--set", "analyze.windows_per_split=4", "--corpus-b", s(&corpus())],
    );
    validate(&overlap, "overlap");
    assert_eq!(overlap["across"].as_array().unwrap().len(), 4);
}

#[test]
fn analyze_rejects_a_corpus_too_small() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.txt");
    std::fs::write(&tiny, "x".repeat(200)).unwrap();
    let out = cherryq(&["analyze", s(base()), "-c", s(&smoke_config()), "--corpus", s(&tiny), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("too small"));
}

#[test]
fn analyze_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    analyze(a.path(), base(), &[]);
    analyze(b.path(), base(), &[]);
    for f in ["heterogeneity.csv", "overlap.json", "summary.json", "scatter/layers.0.mlp.up_proj.weight.csv"] {
        assert_eq!(sha(&a.path().join(f)), sha(&b.path().join(f)), "{f}");
    }
}

#[test]
fn constant_weights_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        layers: 1,
        width: 32,
        heads: 2,
        context: 32,
        mlp_hidden: 64,
        ..Default::default()
    };
    let mut model = ToyLm::<f32>::new(cfg).unwrap();
    for i in model.quantizable() {
        model.params_mut()[i].data_mut().fill(0.05);
    }
    let path = dir.path().join("const.chrq");
    Checkpoint::from_model(&model, Storage::F32, Value::Null).save(&path).unwrap();
    analyze(&dir.path().join("an"), &path, &[]);
    let mut r = csv::Reader::from_path(dir.path().join("an/heterogeneity.csv")).unwrap();
    let mut seen = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        if &rec[1] == "weight" {
            assert_eq!(rec[2].parse::<f64>().unwrap(), 1.0, "{}", &rec[0]);
            seen += 1;
        }
    }
    assert_eq!(seen, 6);
}

fn run_cherryq(dir: &Path, sets: &[&str], extra: &[&str]) -> Value {
    let cfg = smoke_config();
    let mut args = vec!["cherryq", s(base()), "-c", s(&cfg), "-o", s(dir)];
    for x in sets {
        args.extend(["--set", x]);
    }
    args.extend_from_slice(extra);
    ok(&args);
    let log = read_json(&dir.join("cherryq_log.json"));
    validate(&log, "cherryq_log");
    validate(&read_json(&dir.join("manifest.json")), "manifest");
    log
}

#[test]
fn cherryq_runs_every_metric() {
    for metric in ["impact", "weight", "activation"] {
        let dir = tempfile::tempdir().unwrap();
        let log = run_cherryq(dir.path(), &[&format!("cherryq.metric={metric}")], &[]);
        assert_eq!(log["metric"], metric);
        assert_eq!(log["steps"].as_array().unwrap().len(), 5);
        let bits = log["avg_bits"].as_f64().unwrap();
        assert!(bits > 3.0 && bits < 4.5, "{bits}");
        let ck = Checkpoint::load(dir.path().join("cherryq.chrq")).unwrap();
        assert!(ck.quant.is_some());
        let out = ok(&["eval", s(&dir.path().join("cherryq.chrq")), "-c", s(&smoke_config())]);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert!(v["perplexity"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn cherryq_uses_saved_maps() {
    let an = tempfile::tempdir().unwrap();
    analyze(an.path(), base(), &["--save-maps"]);
    let maps = an.path().join("impact_maps.json");
    let dir = tempfile::tempdir().unwrap();
    run_cherryq(dir.path(), &[], &["--impacts", s(&maps)]);
    // maps of the wrong metric are refused
    let out = cherryq(&[
        "cherryq",
        s(base()),
        "-c",
        s(&smoke_config()),
        "--set",
        "cherryq.metric=weight",
        "--impacts",
        s(&maps),
        "-o",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_fraction_is_plain_qat() {
    let dir = tempfile::tempdir().unwrap();
    run_cherryq(dir.path(), &["quant.cherry_fraction=0"], &[]);
    let ck = Checkpoint::load(dir.path().join("cherryq.chrq")).unwrap();
    let mut mixed = 0;
    for sec in &ck.sections {
        if let Payload::Mixed(m) = &sec.payload {
            assert!(m.cherry_indices.is_empty());
            mixed += 1;
        }
    }
    assert_eq!(mixed, 6);
}

#[test]
fn two_bit_trick_scales_stay_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let log = run_cherryq(dir.path(), &["quant.bits=2", "quant.scale_trick=true"], &["--step0"]);
    assert!(log["plan"][0]["trick_alpha"].is_number());
    let first = Checkpoint::load(dir.path().join("step0.chrq")).unwrap();
    let last = Checkpoint::load(dir.path().join("cherryq.chrq")).unwrap();
    let mut compared = 0;
    for sec in &first.sections {
        if let Some(m0) = first.mixed(&sec.name) {
            let m1 = last.mixed(&sec.name).unwrap();
            let (s0, s1) = (m0.trick_scales.as_ref().unwrap(), m1.trick_scales.as_ref().unwrap());
            let bits = |v: &Vec<half::f16>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(s0), bits(s1), "{}", sec.name);
            compared += 1;
        }
    }
    assert_eq!(compared, 6);
    // and the training did change the weights
    assert_ne!(sha(&dir.path().join("step0.chrq")), sha(&dir.path().join("cherryq.chrq")));
}

#[test]
fn overlap_of_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_cherryq(a.path(), &[], &[]);
    run_cherryq(b.path(), &["cherryq.metric=weight"], &[]);
    let out = ok(&["overlap", s(&a.path().join("cherryq.chrq")), s(&a.path().join("cherryq.chrq"))]);
    let v: Value = serde_json::from_str(&out).unwrap();
    validate(&v, "checkpoint_overlap");
    assert_eq!(v["overlap_percent"], 100.0);
    let out = ok(&["overlap", s(&a.path().join("cherryq.chrq")), s(&b.path().join("cherryq.chrq"))]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let p = v["overlap_percent"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&p));
    // a full-precision checkpoint has no cherry set
    let out = cherryq(&["overlap", s(base()), s(base())]);
    assert_eq!(out.status.code(), Some(3));
}
