use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn confaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = confaug(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().expect("some output")).expect("JSON line")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_digests(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

const TINY: &str = r#"{
  "seed": 3,
  "data": { "classes": 3, "per_class": 20 },
  "schedule": { "timesteps": 20 },
  "backbone": {
    "base_channels": 8, "channel_multipliers": [1], "blocks_per_level": 1, "embedding_dim": 32,
    "se_reduction": 4, "attention_heads": 1, "class_count": 3, "norm_groups": 4,
    "linear_attention_levels": []
  },
  "training": { "max_epochs": 1, "batch_size": 16 },
  "sampler": { "per_class": 4, "steps": 5, "guidance_scale": 2.0 },
  "filter": { "threshold": 0.0 }
}"#;

#[test]
fn full_pipeline_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let run = |name: &str| root.join(name);

    let prep = last_json(&ok(&["prepare-data", "--config", c, "--run-dir", s(&run("prep"))]));
    let data = PathBuf::from(prep["manifest"].as_str().unwrap());
    assert!(data.exists());
    let d = s(&data);
    let data_digests = tree_digests(&run("prep/data"));

    let den = last_json(&ok(&["train-diffusion", "--config", c, "--run-dir", s(&run("den")), "--data", d]));
    assert_eq!(den["epochs"], 1);
    let gc = last_json(&ok(&["train-guidance", "--config", c, "--run-dir", s(&run("gc")), "--data", d]));
    let den_ckpt = den["checkpoint"].as_str().unwrap().to_string();
    let gc_ckpt = gc["checkpoint"].as_str().unwrap().to_string();

    let sample_args = |dir: &str| {
        vec![
            "sample".to_string(),
            "--config".into(),
            c.into(),
            "--run-dir".into(),
            s(&run(dir)).into(),
            "--denoiser".into(),
            den_ckpt.clone(),
            "--guidance".into(),
            gc_ckpt.clone(),
        ]
    };
    let a: Vec<String> = sample_args("sample");
    let pool_info = last_json(&ok(&a.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(pool_info["samples"], 12);
    let pool = run("sample/samples/pool.jsonl");
    assert_eq!(fs::read_dir(run("sample/samples/images")).unwrap().count(), 12);

    let base = last_json(&ok(&["train-classifier", "--config", c, "--run-dir", s(&run("base")), "--data", d]));
    let base_ckpt = base["checkpoint"].as_str().unwrap().to_string();
    assert!(base_ckpt.ends_with("residual-desk.ckpt"));

    let filt = last_json(&ok(&[
        "filter", "--config", c, "--run-dir", s(&run("filter")), "--pool", s(&pool), "--model", &base_ckpt,
        "--threshold", "0.4",
    ]));
    let kept = filt["total_retained"].as_u64().unwrap();
    assert_eq!(filt["total_in"], 12);
    assert!(kept <= 12);
    let config: Value = serde_json::from_str(&fs::read_to_string(run("filter/config.json")).unwrap()).unwrap();
    assert_eq!(config["filter"]["threshold"], 0.4);
    let retained = run("filter/samples/retained.jsonl");
    assert_eq!(fs::read_to_string(&retained).unwrap().lines().count() as u64, kept);

    let fused = last_json(&ok(&["fuse", "--config", c, "--run-dir", s(&run("fuse")), "--data", d, "--retained", s(&retained)]));
    assert_eq!(fused["train"].as_u64().unwrap(), fused["real_train"].as_u64().unwrap() + kept);
    let fused_manifest = fused["manifest"].as_str().unwrap().to_string();

    let re = last_json(&ok(&[
        "train-classifier", "--config", c, "--run-dir", s(&run("re")), "--data", &fused_manifest,
    ]));
    let re_ckpt = re["checkpoint"].as_str().unwrap().to_string();

    let table = ok(&[
        "evaluate", "--config", c, "--run-dir", s(&run("eval")), "--data", d, "--baseline", &base_ckpt, "--retrained",
        &re_ckpt,
    ]);
    assert!(table.contains("baseline") && table.contains("retrained"), "{table}");
    let csv = fs::read_to_string(run("eval/reports/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let fid_args = |dir: &str| {
        vec![
            "fid".to_string(),
            "--config".into(),
            c.into(),
            "--run-dir".into(),
            s(&run(dir)).into(),
            "--real".into(),
            d.into(),
            "--synthetic".into(),
            s(&pool).into(),
            "--extractor".into(),
            base_ckpt.clone(),
        ]
    };
    let f = fid_args("fid");
    let fid = last_json(&ok(&f.iter().map(String::as_str).collect::<Vec<_>>()));
    assert!(fid["fid"].as_f64().unwrap().is_finite());
    assert_eq!(fid["synthetic_count"], 12);
    assert!(fid["extractor_id"].as_str().unwrap().starts_with("residual-desk:penultimate:"));

    // Every run directory documents itself.
    for dir in ["prep", "den", "gc", "sample", "base", "filter", "fuse", "re", "eval", "fid"] {
        let m = fs::read_to_string(run(dir).join("MANIFEST.txt")).unwrap();
        assert!(m.contains("config.json\t") && m.contains("command.json\t") && m.contains("log.jsonl\t"), "{dir}");
        assert!(!run(dir).join(".lock").exists());
        assert!(!run(dir).join("error.json").exists());
    }

    // Replays from the recorded config reproduce the reports byte for byte.
    let a: Vec<String> = sample_args("sample2");
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(&pool).unwrap(), fs::read(run("sample2/samples/pool.jsonl")).unwrap());
    let f = fid_args("fid2");
    ok(&f.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(run("fid/reports/fid.json")).unwrap(), fs::read(run("fid2/reports/fid.json")).unwrap());
    let recorded = run("filter/config.json");
    ok(&[
        "filter", "--config", s(&recorded), "--run-dir", s(&run("filter2")), "--pool", s(&pool), "--model", &base_ckpt,
    ]);
    assert_eq!(
        fs::read(run("filter/reports/filter_report.json")).unwrap(),
        fs::read(run("filter2/reports/filter_report.json")).unwrap()
    );

    // Nothing downstream touched the dataset.
    assert_eq!(data_digests, tree_digests(&run("prep/data")));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let rd = tmp.path().join("r");
    let out = confaug(&["fid", "--run-dir", s(&rd), "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = confaug(&["prepare-data", "--run-dir", s(&rd), "--data.nonexistent", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.nonexistent"));
    let out = confaug(&["prepare-data", "--run-dir", s(&rd), "--sampler.steps", "many"]);
    assert_eq!(out.status.code(), Some(2));
    let out = confaug(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn domain_error_exits_1_with_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let rd = tmp.path().join("r");
    let missing = tmp.path().join("missing.ckpt");
    let pool = tmp.path().join("pool.jsonl");
    fs::write(&pool, "").unwrap();
    let out = confaug(&["filter", "--run-dir", s(&rd), "--pool", s(&pool), "--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(&fs::read_to_string(rd.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["exit_code"], 1);
    assert_eq!(err["error"], "domain");
    assert!(fs::read_to_string(rd.join("MANIFEST.txt")).unwrap().contains("error.json\t"));
    assert!(!rd.join(".lock").exists());
}

#[test]
fn locked_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let rd = tmp.path().join("r");
    fs::create_dir_all(&rd).unwrap();
    fs::write(rd.join(".lock"), "1").unwrap();
    let out = confaug(&["prepare-data", "--run-dir", s(&rd), "--data.classes", "2", "--data.per_class", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    assert!(rd.join(".lock").exists());
    assert!(!rd.join("data").exists());
}
