use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sumoco::softmax;

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric(format!("{name} contains NaN scores")));
    }
    Ok(())
}

/// Mann-Whitney AUC with half credit for ties, computed from mid-ranks.
pub fn auc_roc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    check_scores("AUC input", pos)?;
    check_scores("AUC input", neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = all[i..=j].iter().filter(|e| e.1).count();
        pos_rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// All-points average precision. Sorted by descending score; within a tie negatives
/// come first, then input order.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::Metric(
            "average precision needs at least one positive".into(),
        ));
    }
    check_scores("AP input", pos)?;
    check_scores("AP input", neg)?;
    let mut all: Vec<(f64, bool, usize)> = neg
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, false, i))
        .chain(pos.iter().enumerate().map(|(i, &s)| (s, true, i)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, e) in all.iter().enumerate() {
        if e.1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos.len() as f64)
}

/// One-vs-rest AP per class (`None` where a class has no positives) and their mean.
pub fn per_class_ap(
    labels: &[usize],
    probs: &[Vec<f64>],
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut aps = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&y, p) in labels.iter().zip(probs) {
            if y == c {
                pos.push(p[c]);
            } else {
                neg.push(p[c]);
            }
        }
        aps.push(if pos.is_empty() {
            None
        } else {
            Some(average_precision(&pos, &neg)?)
        });
    }
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Metric("no class has a positive sample".into()));
    }
    Ok((aps, mean_ap(&present)))
}

/// Unweighted mean of per-class APs.
pub fn mean_ap(aps: &[f64]) -> f64 {
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Probability mass on every class except `normal` (index 0).
pub fn anomaly_score(probs: &[f64]) -> f64 {
    probs.iter().skip(1).sum()
}

/// First index of the largest value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.partial_cmp(&v[best]) == Some(Ordering::Greater) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Row-normalized: entry (r, c) is the share of class r predicted as c.
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    /// Classes with no samples; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

impl Confusion {
    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Metric(format!(
                "{} labels with {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Metric(format!(
                    "class index outside {num_classes} classes"
                )));
            }
            counts[t][p] += 1;
        }
        let mut empty_rows = Vec::new();
        let matrix = counts
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    empty_rows.push(r);
                    vec![0.0; num_classes]
                } else {
                    row.iter().map(|&c| c as f64 / n as f64).collect()
                }
            })
            .collect();
        Ok(Confusion {
            matrix,
            counts,
            empty_rows,
        })
    }

    /// `sum_r count_r * diag_r / N`, the accuracy implied by the normalized matrix.
    pub fn accuracy_from_rows(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let weighted: f64 = self
            .counts
            .iter()
            .zip(&self.matrix)
            .enumerate()
            .map(|(r, (c, m))| c.iter().sum::<usize>() as f64 * m[r])
            .sum();
        weighted / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    /// Average the probability vectors.
    Probabilities,
    /// Average logits, then apply softmax.
    Logits,
}

/// Score-level fusion of per-source classifier outputs.
pub fn decision_fusion(per_source: &[Vec<f64>], mode: DecisionMode) -> Result<Vec<f64>> {
    let first = per_source
        .first()
        .ok_or_else(|| Error::Dimension("decision fusion needs at least one source".into()))?;
    let k = first.len();
    if let Some(bad) = per_source.iter().find(|v| v.len() != k) {
        return Err(Error::Dimension(format!(
            "decision fusion over vectors of length {k} and {}",
            bad.len()
        )));
    }
    let m = per_source.len() as f64;
    let mean: Vec<f64> = (0..k)
        .map(|c| per_source.iter().map(|v| v[c]).sum::<f64>() / m)
        .collect();
    Ok(match mode {
        DecisionMode::Probabilities => mean,
        DecisionMode::Logits => softmax(&mean),
    })
}
