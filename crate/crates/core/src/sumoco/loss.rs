use super::config::{DenominatorMode, PositiveNormalization, SuMoCoConfig};
use super::queue::ContrastQueue;
use crate::error::{Error, Result};
use crate::tensor::{CustomBackward, Tape, Var};

/// Loss of one anchor against the queue plus its gradient with respect to the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Size of the positive set; zero means the anchor contributed nothing.
    pub positives: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss of one anchor `z` with label `label`.
///
/// Each positive `p` contributes `log(D_p) - s_p` where `s = z.k / tau` and `D_p`
/// is the mode's denominator in exp space. Empty positive sets, and under
/// `NegativesOnly` empty negative sets, contribute zero.
pub fn anchor_loss(
    z: &[f64],
    label: usize,
    queue: &ContrastQueue,
    cfg: &SuMoCoConfig,
) -> Result<AnchorLoss> {
    if queue.is_empty() {
        return Err(Error::Contract("infoNCE needs a non-empty queue".into()));
    }
    if z.len() != queue.dim() {
        return Err(Error::Dimension(format!(
            "anchor of width {} against queue of width {}",
            z.len(),
            queue.dim()
        )));
    }
    let tau = cfg.temperature;
    let entries: Vec<(&[f64], usize)> = queue.iter().collect();
    let sims: Vec<f64> = entries.iter().map(|(k, _)| dot(z, k) / tau).collect();
    let pos: Vec<usize> = (0..entries.len())
        .filter(|&j| entries[j].1 == label)
        .collect();
    let neg: Vec<usize> = (0..entries.len())
        .filter(|&j| entries[j].1 != label)
        .collect();
    let d = z.len();
    let zero = AnchorLoss {
        loss: 0.0,
        grad: vec![0.0; d],
        positives: pos.len(),
    };
    if pos.is_empty() || (cfg.denominator_mode == DenominatorMode::NegativesOnly && neg.is_empty())
    {
        return Ok(zero);
    }

    // Weighted mean of keys under softmax weights over `set` (plus an optional extra index).
    let softmax_mean = |set: &[usize], extra: Option<usize>| -> (f64, Vec<f64>) {
        let it = set.iter().copied().chain(extra);
        let lse = log_sum_exp(it.clone().map(|j| sims[j]));
        let mut mean = vec![0.0; d];
        for j in it {
            let w = (sims[j] - lse).exp();
            for (m, k) in mean.iter_mut().zip(entries[j].0) {
                *m += w * k;
            }
        }
        (lse, mean)
    };

    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    match cfg.denominator_mode {
        DenominatorMode::PositivePlusNegatives => {
            // log(1 + sum_a exp(s_a - s_p)) = softplus(L_N - s_p), with L_N the
            // log-sum-exp over negatives, so each anchor costs one pass over the queue.
            if !neg.is_empty() {
                let (lse_n, mean_n) = softmax_mean(&neg, None);
                let mut weight = 0.0;
                for &p in &pos {
                    let x = lse_n - sims[p];
                    loss += if x > 0.0 {
                        x + (-x).exp().ln_1p()
                    } else {
                        x.exp().ln_1p()
                    };
                    let sig = if x > 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        x.exp() / (1.0 + x.exp())
                    };
                    weight += sig;
                    for (g, kp) in grad.iter_mut().zip(entries[p].0) {
                        *g -= sig * kp;
                    }
                }
                for (g, m) in grad.iter_mut().zip(&mean_n) {
                    *g += weight * m;
                }
            }
        }
        DenominatorMode::NegativesOnly | DenominatorMode::AllNonAnchor => {
            let all: Vec<usize> = (0..entries.len()).collect();
            let set = if cfg.denominator_mode == DenominatorMode::NegativesOnly {
                &neg
            } else {
                &all
            };
            let (lse, mean) = softmax_mean(set, None);
            let np = pos.len() as f64;
            for &p in &pos {
                loss += lse - sims[p];
                for (g, k) in grad.iter_mut().zip(entries[p].0) {
                    *g -= k;
                }
            }
            for (g, m) in grad.iter_mut().zip(&mean) {
                *g += np * m;
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= tau);
    if cfg.positive_normalization == PositiveNormalization::MeanOverPositives {
        let np = pos.len() as f64;
        loss /= np;
        grad.iter_mut().for_each(|g| *g /= np);
    }
    Ok(AnchorLoss {
        loss,
        grad,
        positives: pos.len(),
    })
}

/// Batch contrastive loss: the sum of per-anchor losses.
pub fn info_nce(
    z: &[Vec<f64>],
    labels: &[usize],
    queue: &ContrastQueue,
    cfg: &SuMoCoConfig,
) -> Result<f64> {
    if z.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} anchors with {} labels",
            z.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (zi, &y) in z.iter().zip(labels) {
        total += anchor_loss(zi, y, queue, cfg)?.loss;
    }
    Ok(total)
}

struct FixedGrad {
    name: &'static str,
    grad: Vec<f64>,
}

impl CustomBackward for FixedGrad {
    fn name(&self) -> &str {
        self.name
    }

    fn backward(&self, out_grad: &[f64], _inputs: &[&[f64]], _output: &[f64]) -> Vec<Vec<f64>> {
        vec![self.grad.iter().map(|g| g * out_grad[0]).collect()]
    }
}

/// Records the anchor loss of `z` on the tape as a scalar node.
pub fn info_nce_on_tape(
    tape: &mut Tape,
    z: Var,
    label: usize,
    queue: &ContrastQueue,
    cfg: &SuMoCoConfig,
) -> Result<(Var, AnchorLoss)> {
    let a = anchor_loss(tape.value(z), label, queue, cfg)?;
    let v = tape.custom(
        &[z],
        &[1],
        vec![a.loss],
        Box::new(FixedGrad {
            name: "info_nce",
            grad: a.grad.clone(),
        }),
    )?;
    Ok((v, a))
}

/// Focal loss of one logit vector and its gradient with respect to the logits.
pub fn focal_single(
    logits: &[f64],
    label: usize,
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits.iter().copied());
    let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let log_p = logits[label] - lse;
    let p = probs[label];
    let q = 1.0 - p;
    let loss = -alpha * q.powf(gamma) * log_p;
    // d loss / d p
    let first = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * log_p
    };
    let dl_dp = alpha * (first - q.powf(gamma) / p);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let dp = if k == label { p * (1.0 - pk) } else { -p * pk };
            dl_dp * dp
        })
        .collect();
    Ok((loss, grad))
}

/// Mean focal loss over a batch of logit rows.
pub fn focal_loss(logits: &[Vec<f64>], labels: &[usize], alpha: &[f64], gamma: f64) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "{} logit rows with {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        let a = *alpha
            .get(y)
            .ok_or_else(|| Error::Data(format!("label {y} has no focal weight")))?;
        total += focal_single(l, y, a, gamma)?.0;
    }
    Ok(total / logits.len() as f64)
}

/// Records `scale * focal(logits)` for one sample on the tape.
pub fn focal_on_tape(
    tape: &mut Tape,
    logits: Var,
    label: usize,
    alpha: f64,
    gamma: f64,
    scale: f64,
) -> Result<(Var, f64)> {
    let (loss, grad) = focal_single(tape.value(logits), label, alpha, gamma)?;
    let v = tape.custom(
        &[logits],
        &[1],
        vec![loss * scale],
        Box::new(FixedGrad {
            name: "focal_loss",
            grad: grad.into_iter().map(|g| g * scale).collect(),
        }),
    )?;
    Ok((v, loss))
}
