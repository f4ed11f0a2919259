use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xite")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xite(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic benchmark config shared by the tests.
fn synth_config(dir: &Path) -> PathBuf {
    let path = dir.join("synth.json");
    let cfg = serde_json::json!({
        "d": 16, "classes": 3, "delta": 2.0, "rank": 2, "gamma": 3.0, "sigma": 0.5,
        "n_src": 300, "n_tgt": 120, "n_eval": 80, "seed": 4,
        "run": { "m": 3, "basis": { "k": 2 }, "train": { "epochs": 4 } }
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn pipeline_config(dir: &Path, system: &str, derive: bool, out: &str) -> PathBuf {
    let data = dir.join("data");
    let file = |n: &str| data.join(format!("{n}.xite"));
    let cfg = serde_json::json!({
        "data": {
            "source_train": file("source_train"), "source_dev": file("source_dev"), "source_test": file("source_test"),
            "target_train": file("target_train"), "target_dev": file("target_dev"), "target_test": file("target_test"),
        },
        "system": system,
        "derive_basis": derive,
        "settings": { "m": 3, "basis": { "k": 2 }, "train": { "epochs": 4 } },
        "out_dir": dir.join(out),
    });
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn with_splits(dir: &Path) {
    let cfg = synth_config(dir);
    ok(&["synth", "--config", p(&cfg), "--splits-dir", p(&dir.join("data"))]);
}

#[test]
fn eval_config_runs_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    with_splits(dir.path());
    let cfg = pipeline_config(dir.path(), "xite-reg-lda", true, "lda");
    let stdout = ok(&["eval", "--config", p(&cfg)]);
    let mut lines = stdout.lines();
    assert!(lines.next().unwrap().starts_with("system,m,seed,target_dev,target_test"));
    assert!(lines.next().unwrap().starts_with("xite-reg-lda,3,"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("lda/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    for f in ["mapping.jsonl", "basis.xb", "model.xm", "history.csv", "report.csv", "report.json"] {
        assert!(dir.path().join("lda").join(f).is_file(), "{f}");
    }
}

#[test]
fn missing_basis_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    with_splits(dir.path());
    let cfg = pipeline_config(dir.path(), "xite-reg-lda", false, "nobasis");
    let out = xite(&["eval", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("augment"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("nobasis/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], false);
    assert_eq!(manifest["failed_stage"], "augment");
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.xite");
    assert_eq!(xite(&["split", "--in", p(&missing), "--train", "1", "--dev", "1", "--test", "1"]).status.code(), Some(2));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"lang\":\"en\",\"vec\":[1,2]}\n{\"id\":\"a\",\"lang\":\"en\",\"vec\":[1,2]}\n").unwrap();
    let out = xite(&["ingest", "--in", p(&bad), "--out", p(&dir.path().join("x.xite"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(xite(&["eval"]).status.code(), Some(2));
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = synth_config(d);
    let (src, tgt) = (d.join("src.xite"), d.join("tgt.xite"));
    ok(&["synth", "--config", p(&cfg), "--out-src", p(&src), "--out-tgt", p(&tgt)]);

    // Round trip through JSONL ingestion for the target side.
    let mut jsonl = String::new();
    for r in &xite::store::load_store(&tgt).unwrap().records {
        jsonl.push_str(&serde_json::to_string(r).unwrap());
        jsonl.push('\n');
    }
    fs::write(d.join("tgt.jsonl"), jsonl).unwrap();
    let ingested = d.join("tgt_in.xite");
    ok(&["ingest", "--in", p(&d.join("tgt.jsonl")), "--out", p(&ingested), "--classes", "3", "--role", "target"]);
    ok(&["split", "--in", p(&ingested), "--train", "60", "--dev", "30", "--test", "30", "--hide-train-labels", "--out-prefix", p(&d.join("t"))]);
    let (t_train, t_dev, t_test) = (d.join("t.train.xite"), d.join("t.dev.xite"), d.join("t.test.xite"));

    let map = d.join("map.jsonl");
    ok(&["map", "--targets", p(&t_train), "--source", p(&src), "--m", "3", "--out", p(&map)]);
    let table = xite::similarity::read_mapping(&map).unwrap();
    assert_eq!(table.entries.len(), 60);
    assert!(table.entries.iter().all(|e| e.neighbors.len() == 3));

    let corpus = d.join("corpus.xite");
    let pooled = xite::store::Dataset::concat(
        "corpus",
        xite::store::Role::BasisCorpus,
        &[&xite::store::load_store(&src).unwrap().without_labels(), &xite::store::load_store(&tgt).unwrap().without_labels()],
    )
    .unwrap();
    xite::store::persist_store(&pooled, &corpus).unwrap();
    let basis = d.join("basis.xb");
    ok(&["basis", "--corpus", p(&corpus), "--k", "2", "--out", p(&basis)]);
    let stats = ok(&["basis-stats", "--basis", p(&basis), "--eval", p(&corpus)]);
    assert_eq!(stats.lines().count(), 3);
    assert_eq!(stats.lines().next(), Some("axis,fisher"));

    let aug = d.join("aug.xite");
    ok(&["augment", "--map", p(&map), "--source", p(&src), "--targets", p(&t_train), "--mode", "reg-lda", "--basis", p(&basis), "--out", p(&aug)]);
    assert_eq!(xite::store::load_store(&aug).unwrap().len(), 180);

    let model = d.join("model.xm");
    let history = d.join("history.csv");
    ok(&["train", "--trainset", p(&aug), "--dev", p(&t_dev), "--out", p(&model), "--history", p(&history)]);
    assert!(fs::read_to_string(&history).unwrap().lines().count() > 1);
    let scores = ok(&["eval", "--model", p(&model), "--data", p(&t_test), "--data", p(&t_dev)]);
    assert_eq!(scores.lines().count(), 3);
    let acc: f64 = scores.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let proj = ok(&["eval", "--mapping", p(&map), "--gold", p(&ingested)]);
    assert!(proj.starts_with("proj_top1,proj_allm,proj_anym"));
}

#[test]
fn viz_writes_views_and_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    with_splits(d);
    let data = d.join("data");
    let corpus = d.join("corpus.xite");
    let pooled = xite::store::Dataset::concat(
        "corpus",
        xite::store::Role::BasisCorpus,
        &[
            &xite::store::load_store(data.join("source_train.xite")).unwrap().without_labels(),
            &xite::store::load_store(data.join("target_train.xite")).unwrap().without_labels(),
        ],
    )
    .unwrap();
    xite::store::persist_store(&pooled, &corpus).unwrap();
    let basis = d.join("basis.xb");
    ok(&["basis", "--corpus", p(&corpus), "--k", "2", "--out", p(&basis)]);
    let out = d.join("viz.csv");
    let stdout = ok(&[
        "viz", "--data", p(&data.join("source_dev.xite")), "--data", p(&data.join("target_dev.xite")),
        "--basis", p(&basis), "--per-lang", "50", "--out", p(&out),
    ]);
    let rows = fs::read_to_string(&out).unwrap();
    assert_eq!(rows.lines().count(), 201);
    let ratios = fs::read_to_string(d.join("viz.csv.ratios.csv")).unwrap();
    assert_eq!(ratios.lines().next(), Some("view,fisher,var1,var2"));
    let fisher: Vec<f64> = stdout.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(fisher.len(), 2);
    assert!(fisher[1] >= fisher[0]);

    let single = xite(&["viz", "--data", p(&data.join("source_dev.xite")), "--out", p(&d.join("v.csv"))]);
    assert_eq!(single.status.code(), Some(2));
}

#[test]
fn bench_and_sweep_print_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = synth_config(d);
    let summary = d.join("summary.json");
    let stdout = ok(&["bench", "--config", p(&cfg), "--seeds", "2", "--out", p(&d.join("rows.csv")), "--summary", p(&summary)]);
    assert_eq!(stdout.lines().count(), 5);
    assert_eq!(fs::read_to_string(d.join("rows.csv")).unwrap().lines().count(), 9);
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&summary).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 4);
    // Same config, same numbers.
    assert_eq!(stdout, ok(&["bench", "--config", p(&cfg), "--seeds", "2"]));

    with_splits(d);
    let pcfg = pipeline_config(d, "baseline-ps", false, "sweep");
    let out = xite(&["sweep", "--config", p(&pcfg), "--m", "1,3", "--systems", "baseline-ps,xite-reg-reg", "--seeds", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 9);
    assert!(String::from_utf8_lossy(&out.stderr).contains("best m"));
}
