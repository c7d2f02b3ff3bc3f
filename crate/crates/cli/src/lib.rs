//! The `fusionlab` command surface: synth, train, eval, robustness, gradcheck, bench.
//!
//! Every command returns a process exit code: 0 on success, 1 when a gradient
//! check fails, 2 for configuration or usage problems, 3 for I/O and file-format
//! problems, 4 for numeric failures during training.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fusionlab::config::RunConfig;
use fusionlab::data::{synth_generate, ClipSet, MANIFEST_FILE};
use fusionlab::eval::{
    collapse_sweep, decision_fusion, predict_set, report, CollapseMode, DecisionMode, Predictions,
};
use fusionlab::fusion::{FusionKind, Masking};
use fusionlab::gradsuite::{run_suite, Scope, SuiteOptions};
use fusionlab::nn::Session;
use fusionlab::sumoco::{
    focal_on_tape, load_checkpoint, train_loop, write_checkpoint, Model, ENCODER_GROUP,
};
use fusionlab::tensor::Tensor;
use fusionlab::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.smc";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "metrics.json";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const ROBUSTNESS_SUMMARY: &str = "robustness_summary.json";
pub const ROBUSTNESS_HEADER: [&str; 7] = [
    "train_mask_ratio",
    "k",
    "combo",
    "binary_auc",
    "binary_map",
    "multi_acc",
    "multi_map",
];

/// Exit code for a completed gradient check with at least one failing entry.
pub const EXIT_CHECK_FAILED: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "fusionlab",
    version,
    about = "Multiview multimodal fusion experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DecisionArg {
    Prob,
    Logit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CollapseArg {
    DropPatches,
    ZeroFrames,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Fusion,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test clip sets described by `data.synth`.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `model.smc` plus `metrics.jsonl`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// A clip set directory, or a synth output holding `train/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one checkpoint, or several by decision-level fusion, into `metrics.json`.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// A clip set directory, or a synth output holding `test/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "prob")]
        decision: DecisionArg,
    },
    /// Sweep source collapse over checkpoints tagged `RATIO=PATH` into `robustness.csv`.
    Robustness {
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "drop-patches")]
        collapse_mode: CollapseArg,
        /// Collapse counts; defaults to each checkpoint's `eval.collapse_counts`.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Finite-difference gradient checks; exits 1 if any check fails.
    Gradcheck {
        #[arg(long, value_enum, default_value = "ops")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Forward and backward wall time of one training sample for every fusion kind.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Dimension(_)
        | Error::Data(_)
        | Error::Metric(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
    }
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth { config, out: dir } => cmd_synth(&config, &dir, out).map(|_| 0),
        Command::Train {
            config,
            data,
            out: dir,
        } => cmd_train(&config, &data, &dir, out).map(|_| 0),
        Command::Eval {
            checkpoint,
            data,
            out: dir,
            decision,
        } => {
            let mode = match decision {
                DecisionArg::Prob => DecisionMode::Probabilities,
                DecisionArg::Logit => DecisionMode::Logits,
            };
            cmd_eval(&checkpoint, &data, &dir, mode, out).map(|_| 0)
        }
        Command::Robustness {
            checkpoints,
            data,
            out: dir,
            collapse_mode,
            counts,
        } => {
            let mode = match collapse_mode {
                CollapseArg::DropPatches => CollapseMode::DropPatches,
                CollapseArg::ZeroFrames => CollapseMode::ZeroFrames,
            };
            cmd_robustness(&checkpoints, &data, &dir, mode, counts.as_deref(), out).map(|_| 0)
        }
        Command::Gradcheck {
            scope,
            h,
            tol,
            inject_fault,
        } => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Fusion => Scope::Fusion,
                ScopeArg::Full => Scope::Full,
            };
            cmd_gradcheck(
                scope,
                &SuiteOptions {
                    h,
                    tol,
                    inject_fault,
                },
                out,
            )
        }
        Command::Bench { config, repeats } => cmd_bench(&config, repeats, out).map(|_| 0),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Opens `path` as a clip set, or its `split` subdirectory when `path` is a synth output.
pub fn open_split(path: &Path, split: &str) -> Result<ClipSet> {
    if path.join(MANIFEST_FILE).is_file() {
        ClipSet::open(path)
    } else {
        ClipSet::open(&path.join(split))
    }
}

pub fn cmd_synth(config: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    create_dir(dir)?;
    let sets = synth_generate(&cfg.data.synth, dir)?;
    emit(
        out,
        &serde_json::json!({
            "train": sets.train.len(),
            "test": sets.test.len(),
            "classes": sets.train.classes(),
            "out": dir.display().to_string(),
        })
        .to_string(),
    )
}

pub fn cmd_train(config: &Path, data: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let set = open_split(data, "train")?;
    create_dir(dir)?;
    let log_path = dir.join(METRICS_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let (model, _) = train_loop(&cfg, &set, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        emit(out, &line)
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &model)
}

fn log_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect()
}

pub fn cmd_eval(
    checkpoints: &[PathBuf],
    data: &Path,
    dir: &Path,
    mode: DecisionMode,
    out: &mut dyn Write,
) -> Result<()> {
    let set = open_split(data, "test")?;
    let models = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<Model>>>()?;
    let classes = models[0].classes.clone();
    if let Some(m) = models.iter().find(|m| m.classes != classes) {
        return Err(Error::Config(format!(
            "checkpoints disagree on classes: {:?} vs {:?}",
            classes, m.classes
        )));
    }
    let preds = models
        .iter()
        .map(|m| predict_set(m, &set))
        .collect::<Result<Vec<_>>>()?;
    let fused = if preds.len() == 1 {
        preds.into_iter().next().expect("one prediction set")
    } else {
        let probs = (0..preds[0].probs.len())
            .map(|i| {
                let per: Vec<Vec<f64>> = preds
                    .iter()
                    .map(|p| match mode {
                        DecisionMode::Probabilities => p.probs[i].clone(),
                        DecisionMode::Logits => log_probs(&p.probs[i]),
                    })
                    .collect();
                decision_fusion(&per, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Predictions {
            labels: preds[0].labels.clone(),
            probs,
        }
    };
    let r = report(&fused, &classes)?;
    create_dir(dir)?;
    r.write(&dir.join(EVAL_FILE))?;
    emit(out, &serde_json::to_string(&r).expect("report serializes"))
}

/// Splits `RATIO=PATH`; a bare path takes its ratio from the checkpoint's config.
fn parse_tagged(arg: &str) -> Result<(Option<f64>, PathBuf)> {
    match arg.split_once('=') {
        Some((r, p)) => {
            let ratio: f64 = r
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint tag {r:?} is not a mask ratio")))?;
            Ok((Some(ratio), PathBuf::from(p)))
        }
        None => Ok((None, PathBuf::from(arg))),
    }
}

#[derive(Serialize)]
struct SummaryEntry {
    train_mask_ratio: f64,
    averages: Vec<fusionlab::eval::SweepRow>,
}

pub fn cmd_robustness(
    checkpoints: &[String],
    data: &Path,
    dir: &Path,
    mode: CollapseMode,
    counts: Option<&[usize]>,
    out: &mut dyn Write,
) -> Result<()> {
    let set = open_split(data, "test")?;
    let mut table = Vec::new();
    let mut summary = Vec::new();
    for arg in checkpoints {
        let (tag, path) = parse_tagged(arg)?;
        let model = load_checkpoint(&path)?;
        let ratio = tag.unwrap_or(model.config.fusion.mask_ratio);
        let ks = counts
            .map(<[usize]>::to_vec)
            .unwrap_or_else(|| model.config.eval.collapse_counts.clone());
        let sweep = collapse_sweep(&model, &set, &ks, mode)?;
        for row in &sweep.rows {
            table.push((ratio, row.clone()));
        }
        summary.push(SummaryEntry {
            train_mask_ratio: ratio,
            averages: sweep.averages,
        });
    }
    create_dir(dir)?;
    let csv_path = dir.join(ROBUSTNESS_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(ROBUSTNESS_HEADER)
        .map_err(|e| csv_error(&csv_path, e))?;
    for (ratio, r) in &table {
        w.write_record([
            ratio.to_string(),
            r.k.to_string(),
            r.combo.clone(),
            r.binary_auc.to_string(),
            r.binary_map.to_string(),
            r.multi_acc.to_string(),
            r.multi_map.to_string(),
        ])
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_file(&dir.join(ROBUSTNESS_SUMMARY), text.as_bytes())?;
    emit(
        out,
        &serde_json::json!({ "rows": table.len(), "csv": csv_path.display().to_string() })
            .to_string(),
    )
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn cmd_gradcheck(scope: Scope, opts: &SuiteOptions, out: &mut dyn Write) -> Result<i32> {
    let start = Instant::now();
    let reports = run_suite(scope, opts)?;
    let width = reports
        .iter()
        .map(|r| r.op_name.len())
        .max()
        .unwrap_or(2)
        .max(2);
    emit(
        out,
        &format!(
            "{:<width$}  {:>12}  {:>12}  result",
            "op", "max_rel", "max_abs"
        ),
    )?;
    for r in &reports {
        emit(
            out,
            &format!(
                "{:<width$}  {:>12.3e}  {:>12.3e}  {}",
                r.op_name,
                r.max_rel_error,
                r.max_abs_error,
                if r.passed { "pass" } else { "FAIL" }
            ),
        )?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    emit(
        out,
        &format!(
            "{} checked, {failed} failed, h={:e}, tol={:e}, {:.1}s",
            reports.len(),
            opts.h,
            opts.tol,
            start.elapsed().as_secs_f64()
        ),
    )?;
    Ok(if failed == 0 { 0 } else { EXIT_CHECK_FAILED })
}

/// Forward and backward wall time for one fusion kind.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub kind: FusionKind,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

pub fn bench_kind(cfg: &RunConfig, kind: FusionKind, repeats: usize) -> Result<BenchRow> {
    let mut cfg = cfg.clone();
    cfg.fusion.kind = kind;
    let classes: Vec<String> = (0..cfg.data.synth.num_classes)
        .map(|i| format!("c{i}"))
        .collect();
    let model = Model::new(&cfg, classes)?;
    let s = cfg.data.input_size;
    let clips: Vec<Tensor> = (0..cfg.sources.len())
        .map(|m| {
            let n = fusionlab::data::CLIP_FRAMES * s * s;
            let data = (0..n)
                .map(|i| ((i * 7 + m * 13) % 17) as f64 / 17.0)
                .collect();
            Tensor::new(vec![1, fusionlab::data::CLIP_FRAMES, s, s], data)
        })
        .collect::<Result<_>>()?;
    let alpha = vec![1.0; model.classes.len()];
    let (mut fwd, mut bwd) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let mut sess = Session::new(&[&model.query, &model.head]);
        let vars: Vec<_> = clips.iter().map(|c| sess.tape.input(c)).collect();
        let g = model.encoder.fuse(&mut sess, &vars, Masking::Off)?;
        let logits = model.classifier.forward(&mut sess, g)?;
        let (loss, _) = focal_on_tape(
            &mut sess.tape,
            logits,
            0,
            alpha[0],
            cfg.sumoco.focal_gamma,
            1.0,
        )?;
        let t1 = Instant::now();
        let grads = sess.tape.backward(loss)?;
        let t2 = Instant::now();
        let _ = sess.grads(&grads, ENCODER_GROUP);
        fwd = fwd.min((t1 - t0).as_secs_f64() * 1e3);
        bwd = bwd.min((t2 - t1).as_secs_f64() * 1e3);
    }
    Ok(BenchRow {
        kind,
        forward_ms: fwd,
        backward_ms: bwd,
    })
}

pub fn cmd_bench(config: &Path, repeats: usize, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    for kind in FusionKind::ALL {
        let row = bench_kind(&cfg, kind, repeats)?;
        emit(out, &serde_json::to_string(&row).expect("row serializes"))?;
    }
    Ok(())
}
