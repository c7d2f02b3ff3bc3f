//! Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if any fail.
//!
//! `FUSIONLAB_ACCEPTANCE=reference` trains on the full synthetic reference set
//! (2000/500 clips, 32x32 inputs). The default is a reduced set (800/300 clips,
//! 16x16 inputs); every threshold is the same in both.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use fusionlab::config::RunConfig;
use fusionlab::data::{synth_generate, ClipSet, SourceTag, SynthConfig};
use fusionlab::eval::{
    anomaly_score, auc_roc, average_precision, collapse_sweep, predict_set, report, CollapseMode,
    EvalReport, Predictions,
};
use fusionlab::fusion::FusionKind;
use fusionlab::nn::ParamStore;
use fusionlab::sumoco::{
    momentum_update, prepare_sample, write_checkpoint, ContrastQueue, DenominatorMode,
    EpochMetrics, Model, Trainer,
};
use fusionlab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_fusionlab");
const SEEDS: [u64; 3] = [1, 2, 3];
const EPOCHS: usize = 10;

type Verdict = Result<(bool, String), String>;

struct Scale {
    name: &'static str,
    synth: SynthConfig,
    input_size: usize,
}

fn scale() -> Scale {
    match std::env::var("FUSIONLAB_ACCEPTANCE").as_deref() {
        Ok("reference") => Scale {
            name: "reference",
            synth: SynthConfig::default(),
            input_size: RunConfig::default().data.input_size,
        },
        _ => Scale {
            name: "reduced",
            synth: SynthConfig {
                train_samples: 800,
                test_samples: 300,
                spatial: 16,
                ..SynthConfig::default()
            },
            input_size: 16,
        },
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn fusionlab(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("FUSIONLAB_THREADS", "1")
        .output()
        .expect("spawn fusionlab")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Running totals over every evaluation the suite performs.
#[derive(Default)]
struct EvalAudit {
    runs: usize,
    samples: usize,
    max_simplex: f64,
    missing_auc: usize,
    max_row: f64,
    max_acc: f64,
}

impl EvalAudit {
    fn add(&mut self, pred: &Predictions, rep: &EvalReport) {
        self.runs += 1;
        for p in &pred.probs {
            self.samples += 1;
            self.max_simplex = self.max_simplex.max((anomaly_score(p) + p[0] - 1.0).abs());
        }
        let json: Value = serde_json::from_str(&rep.to_json()).expect("report json");
        if !json["binary"]["auc_roc"]
            .as_f64()
            .is_some_and(f64::is_finite)
        {
            self.missing_auc += 1;
        }
        let mut correct = 0;
        let mut total = 0;
        for (i, (row, counts)) in rep.confusion.iter().zip(&rep.counts).enumerate() {
            let n: usize = counts.iter().sum();
            total += n;
            correct += counts[i];
            if n > 0 {
                self.max_row = self.max_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        self.max_acc = self
            .max_acc
            .max((correct as f64 / total as f64 - rep.multi.accuracy).abs());
    }
}

struct Run {
    model: Model,
    epochs: Vec<EpochMetrics>,
    min_step_loss: Option<f64>,
    wall: Duration,
    report: EvalReport,
}

fn config(
    sc: &Scale,
    seed: u64,
    kind: FusionKind,
    sources: Vec<SourceTag>,
    mask: f64,
) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.sources = sources;
    cfg.fusion.kind = kind;
    cfg.fusion.mask_ratio = mask;
    cfg.optimizer.epochs = EPOCHS;
    cfg.data.input_size = sc.input_size;
    cfg.data.synth = sc.synth.clone();
    cfg
}

fn train(cfg: &RunConfig, data: &Data, audit: &mut EvalAudit) -> Result<Run, String> {
    let start = Instant::now();
    let mut trainer = Trainer::for_data(cfg, &data.train).map_err(err)?;
    let mut epochs = Vec::new();
    let mut min_step_loss: Option<f64> = None;
    for _ in 0..cfg.optimizer.epochs {
        let (m, steps) = trainer.run_epoch(&data.train).map_err(err)?;
        for l in steps.iter().filter_map(|s| s.min_anchor_loss) {
            min_step_loss = Some(min_step_loss.map_or(l, |x| x.min(l)));
        }
        epochs.push(m);
    }
    let wall = start.elapsed();
    let pred = predict_set(&trainer.model, &data.test).map_err(err)?;
    let rep = report(&pred, &trainer.model.classes).map_err(err)?;
    audit.add(&pred, &rep);
    let tags: Vec<String> = cfg.sources.iter().map(|t| t.to_string()).collect();
    eprintln!(
        "  seed {} {} [{}] mask {}: mAP {:.4} acc {:.4} AUC {:.4} in {:.0} s",
        cfg.seed,
        cfg.fusion.kind.name(),
        tags.join("+"),
        cfg.fusion.mask_ratio,
        rep.multi.map,
        rep.multi.accuracy,
        rep.binary.auc_roc,
        wall.as_secs_f64()
    );
    Ok(Run {
        model: trainer.model,
        epochs,
        min_step_loss,
        wall,
        report: rep,
    })
}

/// Multi-class accuracy lost between no collapse and the k=1 average.
fn single_collapse_drop(model: &Model, test: &ClipSet) -> Result<f64, String> {
    let sweep = collapse_sweep(model, test, &[0, 1], CollapseMode::DropPatches).map_err(err)?;
    let acc = |k: usize| {
        sweep
            .averages
            .iter()
            .find(|r| r.k == k)
            .map(|r| r.multi_acc)
    };
    match (acc(0), acc(1)) {
        (Some(a0), Some(a1)) => Ok(a0 - a1),
        _ => Err("collapse sweep lacks k=0 or k=1 averages".into()),
    }
}

struct SeedRuns {
    seed: u64,
    mhsa: Run,
    sum: Run,
    singles: Vec<(SourceTag, Run)>,
    drop_plain: f64,
    drop_masked: f64,
}

struct Data {
    root: PathBuf,
    train: ClipSet,
    test: ClipSet,
}

fn experiments(sc: &Scale, data: &Data, audit: &mut EvalAudit) -> Result<Vec<SeedRuns>, String> {
    let all = SourceTag::all();
    let mut out = Vec::new();
    for seed in SEEDS {
        let mhsa = train(
            &config(sc, seed, FusionKind::Mhsa, all.clone(), 0.0),
            data,
            audit,
        )?;
        let masked = train(
            &config(sc, seed, FusionKind::Mhsa, all.clone(), 0.5),
            data,
            audit,
        )?;
        let sum = train(
            &config(sc, seed, FusionKind::Sum, all.clone(), 0.0),
            data,
            audit,
        )?;
        let mut singles = Vec::new();
        for &tag in &all {
            singles.push((
                tag,
                train(
                    &config(sc, seed, FusionKind::Mhsa, vec![tag], 0.0),
                    data,
                    audit,
                )?,
            ));
        }
        let drop_plain = single_collapse_drop(&mhsa.model, &data.test)?;
        let drop_masked = single_collapse_drop(&masked.model, &data.test)?;
        eprintln!(
            "  seed {seed}: k=1 accuracy drop, mask 0.0 {drop_plain:.4}, mask 0.5 {drop_masked:.4}"
        );
        out.push(SeedRuns {
            seed,
            mhsa,
            sum,
            singles,
            drop_plain,
            drop_masked,
        });
    }
    Ok(out)
}

fn majority(hits: usize) -> bool {
    hits >= 2
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let out = fusionlab(&["gradcheck", "--scope", "full"]);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary = stdout.lines().last().unwrap_or("").trim().to_string();
    Ok((
        out.status.success() && secs < 300.0,
        format!("{summary}; {secs:.1} s"),
    ))
}

fn auc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Each positive's precision, counting negatives tied with it as ranked ahead and
/// tied positives in input order.
fn ap_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &s) in pos.iter().enumerate() {
        let pos_ahead = pos
            .iter()
            .enumerate()
            .filter(|&(j, &t)| t > s || (t == s && j <= i))
            .count();
        let neg_ahead = neg.iter().filter(|&&t| t >= s).count();
        total += pos_ahead as f64 / (pos_ahead + neg_ahead) as f64;
    }
    total / pos.len() as f64
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draw = |rng: &mut ChaCha8Rng, n: usize, coarse: bool| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..5) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect()
    };
    let (mut auc_err, mut ap_err) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let coarse = i % 2 == 0;
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        let pos = draw(&mut rng, np, coarse);
        let neg = draw(&mut rng, nn, coarse);
        auc_err = auc_err.max((auc_roc(&pos, &neg).map_err(err)? - auc_oracle(&pos, &neg)).abs());
    }
    for i in 0..1000 {
        let coarse = i % 2 == 0;
        let np = rng.random_range(1..40);
        let nn = rng.random_range(0..40);
        let pos = draw(&mut rng, np, coarse);
        let neg = draw(&mut rng, nn, coarse);
        ap_err =
            ap_err.max((average_precision(&pos, &neg).map_err(err)? - ap_oracle(&pos, &neg)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        auc_err < 1e-12 && ap_err < 1e-12 && secs < 30.0,
        format!("max |err| AUC {auc_err:e}, AP {ap_err:e}; {secs:.2} s"),
    ))
}

fn criterion_3(runs: &[SeedRuns]) -> Verdict {
    let limit = Duration::from_secs(30 * 60);
    let mut hits = 0;
    let mut slowest = Duration::ZERO;
    let mut parts = Vec::new();
    for r in runs {
        let (best_tag, best) = r
            .singles
            .iter()
            .map(|(t, run)| (t, run.report.multi.map))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or("no single-source runs")?;
        let gain = 100.0 * (r.mhsa.report.multi.map - best);
        if gain >= 5.0 {
            hits += 1;
        }
        for run in std::iter::once(&r.mhsa).chain(r.singles.iter().map(|s| &s.1)) {
            slowest = slowest.max(run.wall);
        }
        parts.push(format!("seed {}: {gain:+.1} pts over {best_tag}", r.seed));
    }
    Ok((
        majority(hits) && slowest < limit,
        format!(
            "{}; slowest run {:.0} s",
            parts.join(", "),
            slowest.as_secs_f64()
        ),
    ))
}

fn criterion_4(runs: &[SeedRuns]) -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    for r in runs {
        let diff = 100.0 * (r.mhsa.report.multi.map - r.sum.report.multi.map);
        if diff >= -1.0 {
            hits += 1;
        }
        parts.push(format!("seed {}: MHSA - Sum {diff:+.1} pts", r.seed));
    }
    Ok((majority(hits), parts.join(", ")))
}

fn criterion_5(runs: &[SeedRuns]) -> Verdict {
    let hits = runs.iter().filter(|r| r.drop_masked < r.drop_plain).count();
    let parts: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: drop {:.4} (0.5) vs {:.4} (0.0)",
                r.seed, r.drop_masked, r.drop_plain
            )
        })
        .collect();
    Ok((majority(hits), parts.join(", ")))
}

fn criterion_6(runs: &[SeedRuns], data: &Data, scratch: &Path) -> Verdict {
    let ckpt = scratch.join("robust.smc");
    write_checkpoint(&ckpt, &runs[0].mhsa.model).map_err(err)?;
    let out_dir = scratch.join("robustness");
    let out = fusionlab(&[
        "robustness",
        "--checkpoints",
        path_str(&ckpt),
        "--data",
        path_str(&data.root.join("test")),
        "--out",
        path_str(&out_dir),
    ]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = fs::read_to_string(out_dir.join("robustness.csv")).map_err(err)?;
    let mut per_k = [0usize; 4];
    for line in text.lines().skip(1) {
        let k: usize = line
            .split(',')
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or("bad row")?;
        *per_k.get_mut(k).ok_or("k out of range")? += 1;
    }
    Ok((per_k == [1, 4, 6, 4], format!("rows per k {per_k:?}")))
}

fn criterion_7(runs: &[SeedRuns]) -> Verdict {
    let mut hits = 0;
    let mut floor = f64::INFINITY;
    let mut parts = Vec::new();
    for r in runs {
        let e = &r.mhsa.epochs;
        if e.len() < 5 {
            return Err(format!("only {} epochs trained", e.len()));
        }
        let ratio = e[4].infonce / e[0].infonce;
        if ratio <= 0.8 {
            hits += 1;
        }
        parts.push(format!("seed {}: epoch5/epoch1 {ratio:.3}", r.seed));
    }
    let all_runs = runs.iter().flat_map(|r| {
        [&r.mhsa, &r.sum]
            .into_iter()
            .chain(r.singles.iter().map(|s| &s.1))
    });
    for run in all_runs {
        if run.model.config.sumoco.denominator_mode == DenominatorMode::PositivePlusNegatives {
            floor = floor.min(run.min_step_loss.unwrap_or(f64::INFINITY));
        }
    }
    Ok((
        majority(hits) && floor >= 0.0,
        format!("{}; min anchor loss {floor:.4}", parts.join(", ")),
    ))
}

fn criterion_8(sc: &Scale, data: &Data) -> Verdict {
    let cfg = config(sc, 1, FusionKind::Mhsa, SourceTag::all(), 0.0);
    let mut trainer = Trainer::for_data(&cfg, &data.train).map_err(err)?;
    let b = cfg.optimizer.batch;
    let (mut focal_leak, mut contrast_leak) = (0.0f64, 0.0f64);
    let mut contrastive_steps = 0;
    let mut aligned = true;
    for step in 0..10 {
        let batch = (0..b)
            .map(|j| {
                let i = (step * b + j) % data.train.len();
                prepare_sample(
                    &data.train,
                    i,
                    &cfg.sources,
                    cfg.data.input_size,
                    (step * b + j) as u64,
                )
            })
            .collect::<fusionlab::Result<Vec<_>>>()
            .map_err(err)?;
        let rep = trainer.train_step(&batch, cfg.optimizer.lr0).map_err(err)?;
        focal_leak = focal_leak.max(rep.encoder_grad_from_focal);
        contrast_leak = contrast_leak.max(rep.head_grad_from_contrastive);
        if rep.min_anchor_loss.is_some() {
            contrastive_steps += 1;
        }
        let queued: Vec<(&[f64], usize)> = trainer.queue.iter().collect();
        let newest = &queued[queued.len() - batch.len()..];
        aligned &= newest.iter().zip(&batch).all(|((z, l), s)| {
            *l == s.label && (z.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6
        });
    }
    Ok((
        focal_leak == 0.0 && contrast_leak == 0.0 && contrastive_steps >= 9 && aligned,
        format!(
            "max leak focal->encoder {focal_leak:e}, contrastive->head {contrast_leak:e}; \
             {contrastive_steps} contrastive steps; queue labels and norms aligned: {aligned}"
        ),
    ))
}

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new(0);
    s.add(
        "w",
        Tensor::new(vec![values.len()], values.to_vec()).expect("tensor"),
    );
    s
}

fn unit(theta: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin()]
}

fn criterion_9() -> Verdict {
    let mut failures = Vec::new();
    let q = store(&[0.25, -1.5, 3.0]);
    let k0 = store(&[1.0, 2.0, -0.5]);

    let mut k = k0.clone();
    momentum_update(&mut k, &q, 1.0).map_err(err)?;
    if k.tensors()[0].data() != k0.tensors()[0].data() {
        failures.push("m=1 changed the key");
    }
    let mut k = k0.clone();
    momentum_update(&mut k, &q, 0.0).map_err(err)?;
    if k.tensors()[0].data() != q.tensors()[0].data() {
        failures.push("m=0 did not copy the query");
    }
    let mut k = k0.clone();
    momentum_update(&mut k, &q, 0.9).map_err(err)?;
    let blended = k0.tensors()[0]
        .data()
        .iter()
        .zip(q.tensors()[0].data())
        .map(|(a, b)| 0.9 * a + 0.1 * b);
    if k.tensors()[0]
        .data()
        .iter()
        .zip(blended)
        .any(|(a, b)| (a - b).abs() > 1e-15)
    {
        failures.push("m=0.9 is not the convex blend");
    }
    if momentum_update(&mut k0.clone(), &q, 1.5).is_ok()
        || momentum_update(&mut store(&[1.0]), &q, 0.5).is_ok()
    {
        failures.push("invalid momentum or structure accepted");
    }

    let mut queue = ContrastQueue::new(5, 2);
    for chunk in [0..3usize, 3..8] {
        let z: Vec<Vec<f64>> = chunk.clone().map(|i| unit(i as f64)).collect();
        let labels: Vec<usize> = chunk.collect();
        queue.push(&z, &labels).map_err(err)?;
    }
    let labels: Vec<usize> = queue.iter().map(|(_, l)| l).collect();
    if labels != [3, 4, 5, 6, 7] {
        failures.push("FIFO eviction order");
    }
    if queue.iter().any(|(z, l)| z != unit(l as f64).as_slice()) {
        failures.push("labels drifted from their embeddings");
    }
    if queue.push(&[unit(0.0)], &[0, 1]).is_ok() {
        failures.push("label count mismatch accepted");
    }
    if queue.push(&[vec![1.0, 1.0]], &[0]).is_ok() || queue.len() != 5 {
        failures.push("non-unit embedding accepted");
    }
    let pass = failures.is_empty();
    Ok((
        pass,
        if pass {
            "boundaries, blend, FIFO, alignment and unit norm all hold".into()
        } else {
            failures.join("; ")
        },
    ))
}

fn criterion_10(audit: &EvalAudit) -> Verdict {
    Ok((
        audit.max_simplex <= 1e-9 && audit.missing_auc == 0 && audit.runs > 0,
        format!(
            "{} eval runs, {} samples, max |anomaly + p_normal - 1| {:e}, runs without binary AUC {}",
            audit.runs, audit.samples, audit.max_simplex, audit.missing_auc
        ),
    ))
}

fn criterion_12(audit: &EvalAudit) -> Verdict {
    Ok((
        audit.max_row <= 1e-9 && audit.max_acc <= 1e-9 && audit.runs > 0,
        format!(
            "{} eval runs, max |row sum - 1| {:e}, max accuracy mismatch {:e}",
            audit.runs, audit.max_row, audit.max_acc
        ),
    ))
}

fn tiny_config() -> Value {
    json!({
        "seed": 11,
        "backbone": {"stage_channels": [4, 8, 8]},
        "fusion": {"kind": "MHSA"},
        "sumoco": {"embed_dim": 8, "queue_capacity": 64},
        "optimizer": {"batch": 4, "epochs": 2},
        "data": {
            "input_size": 16,
            "synth": {"num_classes": 4, "train_samples": 16, "test_samples": 8, "spatial": 16, "normal_fraction": 0.5}
        }
    })
}

fn tree_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(err)?;
                out.push((p.strip_prefix(dir).map_err(err)?.to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Metric log lines with the wall-clock field removed.
fn without_wall(text: &str) -> Result<Vec<String>, String> {
    text.lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).map_err(err)?;
            v.as_object_mut()
                .ok_or("log line is not an object")?
                .remove("wall_ms");
            Ok(v.to_string())
        })
        .collect()
}

fn criterion_11(scratch: &Path) -> Verdict {
    let root = scratch.join("determinism");
    fs::create_dir_all(&root).map_err(err)?;
    let cfg = root.join("tiny.json");
    fs::write(&cfg, tiny_config().to_string()).map_err(err)?;
    let cfg = path_str(&cfg).to_string();
    let checked = |out: Output| -> Result<Output, String> {
        if out.status.success() {
            Ok(out)
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };

    let mut synth = Vec::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    // Same command line both times: outputs may legitimately echo their paths.
    let dir = root.join("work");
    for _ in 0..2 {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(err)?;
        }
        let data = dir.join("data");
        let synth_out = checked(fusionlab(&[
            "synth",
            "--config",
            &cfg,
            "--out",
            path_str(&data),
        ]))?;
        synth.push((synth_out.stdout, tree_bytes(&data)?));

        let model = dir.join("model");
        let train_out = checked(fusionlab(&[
            "train",
            "--config",
            &cfg,
            "--data",
            path_str(&data),
            "--out",
            path_str(&model),
        ]))?;
        let log = fs::read_to_string(model.join("metrics.jsonl")).map_err(err)?;
        train.push((
            without_wall(&String::from_utf8_lossy(&train_out.stdout))?,
            without_wall(&log)?,
            fs::read(model.join("model.smc")).map_err(err)?,
        ));

        let report = dir.join("eval");
        let eval_out = checked(fusionlab(&[
            "eval",
            "--checkpoint",
            path_str(&model.join("model.smc")),
            "--data",
            path_str(&data.join("test")),
            "--out",
            path_str(&report),
        ]))?;
        eval.push((eval_out.stdout, tree_bytes(&report)?));
    }
    let same = [
        synth[0] == synth[1],
        train[0] == train[1],
        eval[0] == eval[1],
    ];
    Ok((
        same.iter().all(|&s| s),
        format!(
            "identical across two runs: synth {}, train {} (log compared without wall_ms), eval {}",
            same[0], same[1], same[2]
        ),
    ))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let sc = scale();
    let scratch = tempfile::tempdir().expect("scratch dir");
    println!(
        "acceptance at {} scale: {} train / {} test clips, {}x{} inputs, {} epochs, seeds {:?}",
        sc.name,
        sc.synth.train_samples,
        sc.synth.test_samples,
        sc.input_size,
        sc.input_size,
        EPOCHS,
        SEEDS
    );

    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "full gradient suite", criterion_1()),
        (2, "metric oracles", criterion_2()),
    ];

    let mut audit = EvalAudit::default();
    let root = scratch.path().join("synthetic");
    let data = synth_generate(&sc.synth, &root).map_err(err).and_then(|_| {
        Ok(Data {
            train: ClipSet::open(&root.join("train")).map_err(err)?,
            test: ClipSet::open(&root.join("test")).map_err(err)?,
            root: root.clone(),
        })
    });
    match &data {
        Ok(data) => {
            let runs = experiments(&sc, data, &mut audit);
            let on_runs = |f: &dyn Fn(&[SeedRuns]) -> Verdict| match &runs {
                Ok(r) => f(r),
                Err(e) => Err(e.clone()),
            };
            results.push((
                3,
                "fusion benefit over best single source",
                on_runs(&criterion_3),
            ));
            results.push((4, "MHSA not worse than Sum", on_runs(&criterion_4)));
            results.push((5, "masking robustness trend", on_runs(&criterion_5)));
            results.push((
                6,
                "collapse enumeration",
                on_runs(&|r| criterion_6(r, data, scratch.path())),
            ));
            results.push((7, "contrastive learning signal", on_runs(&criterion_7)));
            results.push((8, "gradient isolation", criterion_8(&sc, data)));
        }
        Err(e) => {
            for (n, name) in [
                (3, "fusion benefit over best single source"),
                (4, "MHSA not worse than Sum"),
                (5, "masking robustness trend"),
                (6, "collapse enumeration"),
                (7, "contrastive learning signal"),
                (8, "gradient isolation"),
            ] {
                results.push((n, name, Err(format!("synthetic data: {e}"))));
            }
        }
    }
    results.push((9, "momentum and queue", criterion_9()));
    results.push((10, "binary from multi-class", criterion_10(&audit)));
    results.push((11, "determinism", criterion_11(scratch.path())));
    results.push((12, "confusion matrix", criterion_12(&audit)));

    let mut failed = 0;
    for (n, name, verdict) in &results {
        let (pass, detail) = match verdict {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
