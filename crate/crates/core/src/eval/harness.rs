use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{anomaly_score, argmax, auc_roc, average_precision, per_class_ap, Confusion};
use crate::data::{eval_inputs, ClipSet, SourceTag};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, Masking};
use crate::sumoco::{thread_pool, Model};
use crate::tensor::Tensor;

/// How a collapsed source is removed at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseMode {
    /// Drop every patch of the source before the attention blocks (MHSA only).
    DropPatches,
    /// Feed all-zero frames through the source's backbone.
    ZeroFrames,
}

/// Test labels remapped onto the model's class indices.
fn aligned_labels(model: &Model, data: &ClipSet) -> Result<Vec<usize>> {
    for t in model.encoder.sources() {
        if !data.has_source(*t) {
            return Err(Error::Config(format!(
                "checkpoint uses source {t}, data at {} provides {}",
                data.root().display(),
                join_tags(data.sources())
            )));
        }
    }
    let map: Vec<usize> = data
        .classes()
        .iter()
        .map(|name| {
            model.classes.iter().position(|c| c == name).ok_or_else(|| {
                Error::Data(format!(
                    "test class {name:?} is not among the checkpoint's classes"
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(data.labels().into_iter().map(|l| map[l]).collect())
}

pub fn join_tags(tags: &[SourceTag]) -> String {
    tags.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Per-sample class probabilities in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

/// Backbone maps of every test sample, computed once and reused across collapse subsets.
struct MapCache {
    maps: Vec<Vec<Tensor>>,
    zero: Vec<Tensor>,
}

fn build_cache(model: &Model, data: &ClipSet, pool: &rayon::ThreadPool) -> Result<MapCache> {
    let tags = model.encoder.sources().to_vec();
    let size = model.config.data.input_size;
    let maps = pool.install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| model.backbone_maps(&eval_inputs(data, i, &tags, size)?))
            .collect::<Result<Vec<_>>>()
    })?;
    let zero_clips = vec![Tensor::zeros(&[1, crate::data::CLIP_FRAMES, size, size]); tags.len()];
    let zero = model.backbone_maps(&zero_clips)?;
    Ok(MapCache { maps, zero })
}

fn predict_all(
    model: &Model,
    cache: &MapCache,
    collapsed: &[bool],
    mode: CollapseMode,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Vec<f64>>> {
    let any = collapsed.iter().any(|&c| c);
    pool.install(|| {
        cache
            .maps
            .par_iter()
            .map(|maps| {
                if !any {
                    return model.predict_from_maps(maps, Masking::Off);
                }
                match mode {
                    CollapseMode::DropPatches => {
                        model.predict_from_maps(maps, Masking::Collapse(collapsed))
                    }
                    CollapseMode::ZeroFrames => {
                        let swapped: Vec<Tensor> = maps
                            .iter()
                            .zip(&cache.zero)
                            .zip(collapsed)
                            .map(|((m, z), &c)| if c { z.clone() } else { m.clone() })
                            .collect();
                        model.predict_from_maps(&swapped, Masking::Off)
                    }
                }
            })
            .collect()
    })
}

/// Eval-mode predictions for the whole set.
pub fn predict_set(model: &Model, data: &ClipSet) -> Result<Predictions> {
    let labels = aligned_labels(model, data)?;
    let pool = thread_pool()?;
    let cache = build_cache(model, data, &pool)?;
    let m = model.encoder.sources().len();
    let probs = predict_all(
        model,
        &cache,
        &vec![false; m],
        CollapseMode::DropPatches,
        &pool,
    )?;
    Ok(Predictions { labels, probs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auc_roc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiMetrics {
    pub accuracy: f64,
    pub map: f64,
    pub per_class_ap: BTreeMap<String, Option<f64>>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub binary: BinaryMetrics,
    pub multi: MultiMetrics,
    pub confusion: Vec<Vec<f64>>,
    pub flags: Vec<String>,
    /// Largest `|anomaly_score + p_normal - 1|` over the evaluated samples.
    #[serde(skip)]
    pub max_simplex_error: f64,
    #[serde(skip)]
    pub counts: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Binary (normal vs any NDRA) and multi-class metrics from predictions.
pub fn report(pred: &Predictions, classes: &[String]) -> Result<EvalReport> {
    let k = classes.len();
    if pred.probs.iter().any(|p| p.len() != k) {
        return Err(Error::Metric(format!(
            "probability vectors do not all have {k} entries"
        )));
    }
    let mut flags = Vec::new();
    let scores: Vec<f64> = pred.probs.iter().map(|p| anomaly_score(p)).collect();
    let max_simplex_error = pred
        .probs
        .iter()
        .zip(&scores)
        .map(|(p, a)| (a + p[0] - 1.0).abs())
        .fold(0.0, f64::max);
    if max_simplex_error > 1e-9 {
        flags.push(format!(
            "anomaly score and normal probability miss 1 by {max_simplex_error:e}"
        ));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&y, &s) in pred.labels.iter().zip(&scores) {
        if y == 0 {
            neg.push(s);
        } else {
            pos.push(s);
        }
    }
    let binary = BinaryMetrics {
        auc_roc: auc_roc(&pos, &neg)?,
        ap: average_precision(&pos, &neg)?,
    };
    let (aps, map) = per_class_ap(&pred.labels, &pred.probs, k)?;
    let predicted: Vec<usize> = pred.probs.iter().map(|p| argmax(p)).collect();
    let correct = pred
        .labels
        .iter()
        .zip(&predicted)
        .filter(|(a, b)| a == b)
        .count();
    let confusion = Confusion::from_predictions(&pred.labels, &predicted, k)?;
    for &r in &confusion.empty_rows {
        flags.push(format!(
            "class {} has no test samples; its confusion row is zero",
            classes[r]
        ));
    }
    Ok(EvalReport {
        binary,
        multi: MultiMetrics {
            accuracy: correct as f64 / pred.labels.len() as f64,
            map,
            per_class_ap: classes.iter().cloned().zip(aps).collect(),
        },
        confusion: confusion.matrix,
        flags,
        max_simplex_error,
        counts: confusion.counts,
    })
}

/// Full evaluation of `model` on `data`.
pub fn evaluate(model: &Model, data: &ClipSet) -> Result<EvalReport> {
    report(&predict_set(model, data)?, &model.classes)
}

/// One subset of collapsed sources.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    /// Collapsed sources, `+`-joined; `none` when nothing is collapsed.
    pub combo: String,
    pub binary_auc: f64,
    pub binary_map: f64,
    pub multi_acc: f64,
    pub multi_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub rows: Vec<SweepRow>,
    /// Arithmetic mean over the rows of each `k`, in ascending `k`.
    pub averages: Vec<SweepRow>,
}

/// All `k`-subsets of `0..m` in lexicographic order.
pub fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= m {
        rec(0, m, k, &mut Vec::new(), &mut out);
    }
    out
}

fn average_row(k: usize, rows: &[&SweepRow]) -> SweepRow {
    let n = rows.len() as f64;
    let mean = |f: fn(&SweepRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    SweepRow {
        k,
        combo: "average".into(),
        binary_auc: mean(|r| r.binary_auc),
        binary_map: mean(|r| r.binary_map),
        multi_acc: mean(|r| r.multi_acc),
        multi_map: mean(|r| r.multi_map),
    }
}

/// Evaluates every subset of `k` collapsed sources for each requested `k`.
pub fn collapse_sweep(
    model: &Model,
    data: &ClipSet,
    counts: &[usize],
    mode: CollapseMode,
) -> Result<RobustnessReport> {
    let tags = model.encoder.sources().to_vec();
    let m = tags.len();
    if mode == CollapseMode::DropPatches && model.config.fusion.kind != FusionKind::Mhsa {
        return Err(Error::Config(format!(
            "collapse by patch dropping needs an MHSA checkpoint, this one uses {}",
            model.config.fusion.kind
        )));
    }
    if let Some(&bad) = counts.iter().find(|&&k| k >= m) {
        return Err(Error::Config(format!(
            "cannot collapse {bad} of {m} sources; at least one must remain"
        )));
    }
    let mut ks = counts.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let labels = aligned_labels(model, data)?;
    let pool = thread_pool()?;
    let cache = build_cache(model, data, &pool)?;
    let mut rows = Vec::new();
    let mut averages = Vec::new();
    for &k in &ks {
        let start = rows.len();
        for subset in combinations(m, k) {
            let mut collapsed = vec![false; m];
            subset.iter().for_each(|&i| collapsed[i] = true);
            let probs = predict_all(model, &cache, &collapsed, mode, &pool)?;
            let r = report(
                &Predictions {
                    labels: labels.clone(),
                    probs,
                },
                &model.classes,
            )?;
            let combo = if subset.is_empty() {
                "none".to_string()
            } else {
                subset
                    .iter()
                    .map(|&i| tags[i].to_string())
                    .collect::<Vec<_>>()
                    .join("+")
            };
            rows.push(SweepRow {
                k,
                combo,
                binary_auc: r.binary.auc_roc,
                binary_map: r.binary.ap,
                multi_acc: r.multi.accuracy,
                multi_map: r.multi.map,
            });
        }
        let slice: Vec<&SweepRow> = rows[start..].iter().collect();
        averages.push(average_row(k, &slice));
    }
    Ok(RobustnessReport { rows, averages })
}
