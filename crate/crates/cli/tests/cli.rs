use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fusionlab"));
    c.env("FUSIONLAB_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(kind: &str, epochs: usize) -> Value {
    json!({
        "seed": 5,
        "backbone": {"stage_channels": [4, 8, 8]},
        "fusion": {"kind": kind},
        "sumoco": {"embed_dim": 6, "queue_capacity": 64},
        "optimizer": {"batch": 4, "epochs": epochs},
        "data": {
            "input_size": 16,
            "synth": {"num_classes": 3, "train_samples": 10, "test_samples": 6, "spatial": 16, "normal_fraction": 0.5}
        }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, cfg: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = run(&["synth", "--config", s(cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

fn train(cfg: &Path, data: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--config",
        s(cfg),
        "--data",
        s(data),
        "--out",
        s(out),
    ])
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_manifests_and_clips_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("MHSA", 1));
    let data = synth(dir.path(), &cfg);
    for (split, n) in [("train", 10), ("test", 6)] {
        let manifest: Value =
            serde_json::from_slice(&fs::read(data.join(split).join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["samples"].as_array().unwrap().len(), n);
        let clips = fs::read_dir(data.join(split).join("clips"))
            .unwrap()
            .count();
        assert_eq!(clips, 4 * n);
    }
    let before = tree_bytes(&data);
    synth(dir.path(), &cfg);
    assert_eq!(before, tree_bytes(&data));
}

#[test]
fn synth_into_unwritable_location_exits_3_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("MHSA", 1));
    let blocker = dir.path().join("plain_file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("out");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&target)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(s(&blocker)), "{}", stderr(&o));
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny("Median", 1);
    let cfg = write_config(dir.path(), "kind.json", &v);
    let o = train(&cfg, dir.path(), &dir.path().join("o"));
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    for k in ["Sum", "Conv", "SE", "AFF", "MHSA"] {
        assert!(msg.contains(k), "{msg}");
    }

    v = tiny("MHSA", 1);
    v["optimizer"]["btach"] = json!(4);
    let cfg = write_config(dir.path(), "typo.json", &v);
    assert_eq!(code(&train(&cfg, dir.path(), &dir.path().join("o"))), 2);

    v = tiny("MHSA", 1);
    v["fusion"]["mask_ratio"] = json!(0.95);
    let cfg = write_config(dir.path(), "ratio.json", &v);
    assert_eq!(code(&train(&cfg, dir.path(), &dir.path().join("o"))), 2);

    assert_eq!(code(&run(&["train", "--config"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn zero_epochs_gives_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("Sum", 0));
    let data = synth(dir.path(), &cfg);
    let out = dir.path().join("run");
    let o = train(&cfg, &data, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    assert!(fs::read(out.join("metrics.jsonl")).unwrap().is_empty());
    assert_eq!(&fs::read(out.join("model.smc")).unwrap()[..4], b"SMC1");
}

#[test]
fn train_eval_robustness_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("MHSA", 2));
    let data = synth(dir.path(), &cfg);
    let run_a = dir.path().join("a");
    let o = train(&cfg, &data, &run_a);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run_a.join("metrics.jsonl")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), log);
    let lines: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], json!(i + 1));
        for key in ["infonce", "focal", "lr", "wall_ms"] {
            assert!(l.get(key).is_some(), "{key}");
        }
    }

    let ckpt = run_a.join("model.smc");
    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--data", s(&data), "--out", s(out)]);
        run(&args)
    };
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    assert_eq!(code(&eval(&e1, &[])), 0);
    assert_eq!(code(&eval(&e2, &[])), 0);
    let m1 = fs::read(e1.join("metrics.json")).unwrap();
    assert_eq!(m1, fs::read(e2.join("metrics.json")).unwrap());
    let m: Value = serde_json::from_slice(&m1).unwrap();
    let auc = m["binary"]["auc_roc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(m["binary"]["ap"].is_number());
    assert!(m["multi"]["accuracy"].is_number() && m["multi"]["map"].is_number());
    assert_eq!(m["multi"]["per_class_ap"].as_object().unwrap().len(), 3);
    assert_eq!(m["confusion"].as_array().unwrap().len(), 3);
    assert!(m["flags"].is_array());

    let fused = dir.path().join("fused");
    let o = eval(&fused, &[s(&ckpt), "--decision", "logit"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f: Value = serde_json::from_slice(&fs::read(fused.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(f["multi"]["accuracy"], m["multi"]["accuracy"]);

    let rob = dir.path().join("rob");
    let tagged_a = format!("0.0={}", s(&ckpt));
    let tagged_b = format!("0.5={}", s(&ckpt));
    let o = run(&[
        "robustness",
        "--checkpoints",
        &tagged_a,
        &tagged_b,
        "--data",
        s(&data),
        "--out",
        s(&rob),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(rob.join("robustness.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(
        rows.next().unwrap(),
        "train_mask_ratio,k,combo,binary_auc,binary_map,multi_acc,multi_map"
    );
    let body: Vec<&str> = rows.collect();
    assert_eq!(body.len(), 30);
    assert!(body[0].starts_with("0,0,none,"));
    assert!(body[15].starts_with("0.5,0,none,"));
    assert!(body.iter().any(|r| r.contains(",top.depth+front.ir,")));
    let summary: Value =
        serde_json::from_slice(&fs::read(rob.join("robustness_summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["averages"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_rejects_mismatched_sources_and_robustness_rejects_non_mhsa() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_v = tiny("Sum", 1);
    let cfg = write_config(dir.path(), "c.json", &cfg_v);
    let data = synth(dir.path(), &cfg);
    let run_dir = dir.path().join("sum");
    assert_eq!(code(&train(&cfg, &data, &run_dir)), 0);
    let ckpt = run_dir.join("model.smc");

    let rob = run(&[
        "robustness",
        "--checkpoints",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&rob), 2);
    assert!(stderr(&rob).contains("MHSA"));

    // A test set that lacks one of the checkpoint's sources.
    let test = data.join("test");
    let mut manifest: Value =
        serde_json::from_slice(&fs::read(test.join("manifest.json")).unwrap()).unwrap();
    manifest["sources"]
        .as_array_mut()
        .unwrap()
        .retain(|t| *t != json!({"view": "top", "modality": "ir"}));
    for sample in manifest["samples"].as_array_mut().unwrap() {
        sample["files"].as_object_mut().unwrap().remove("top.ir");
    }
    fs::write(test.join("manifest.json"), manifest.to_string()).unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let missing = run(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope.smc")),
        "--data",
        s(&data),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&missing), 3);
    fs::write(dir.path().join("junk.smc"), b"not a checkpoint").unwrap();
    let junk = run(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("junk.smc")),
        "--data",
        s(&data),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&junk), 3);
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny("Sum", 3);
    v["optimizer"]["lr0"] = json!(1e300);
    let cfg = write_config(dir.path(), "c.json", &v);
    let data = synth(dir.path(), &cfg);
    let o = train(&cfg, &data, &dir.path().join("run"));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_lists_each_op_once_and_catches_a_flipped_backward() {
    let o = run(&["gradcheck", "--scope", "ops"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| l.ends_with("pass") || l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for op in [
        "matmul",
        "conv3d",
        "softmax",
        "layer_norm",
        "mhsa_layer",
        "info_nce",
        "focal_loss",
    ] {
        assert!(names.contains(&op), "{op}");
    }

    let bad = run(&["gradcheck", "--scope", "ops", "--inject-fault"]);
    assert_ne!(code(&bad), 0);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("faulty_scale"));
}

#[test]
fn bench_reports_every_kind_with_positive_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("MHSA", 1));
    let o = run(&["bench", "--config", s(&cfg), "--repeats", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let kinds: Vec<&str> = rows.iter().map(|r| r["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["Sum", "Conv", "SE", "AFF", "MHSA"]);
    for r in &rows {
        for key in ["forward_ms", "backward_ms"] {
            let t = r[key].as_f64().unwrap();
            assert!(t > 0.0 && t.is_finite(), "{r}");
        }
    }
}
