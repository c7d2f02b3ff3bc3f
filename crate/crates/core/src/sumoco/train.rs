use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{focal_on_tape, info_nce_on_tape};
use super::model::{Model, ENCODER_GROUP, HEAD_GROUP};
use super::optim::{momentum_update, Adam};
use super::queue::ContrastQueue;
use crate::config::RunConfig;
use crate::data::{augment_views, load_sample, select_windows, ClipSet, SourceTag};
use crate::error::{Error, Result};
use crate::fusion::Masking;
use crate::nn::{Session, StoreGrads};
use crate::tensor::{Tensor, Var};

/// Worker count from `FUSIONLAB_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("FUSIONLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One training sample: query and key views of the same window, plus mask seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub label: usize,
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub query_mask_seed: u64,
    pub key_mask_seed: u64,
}

/// Loads sample `i`, draws one temporal window and two independent sets of spatial
/// augmentations from `seed`.
pub fn prepare_sample(
    set: &ClipSet,
    i: usize,
    tags: &[SourceTag],
    out: usize,
    seed: u64,
) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = load_sample(set, i, tags)?;
    let windows = select_windows(&clips, Some(&mut rng), &set.sample(i).id)?;
    let query = augment_views(&windows, tags, Some(&mut rng), out);
    let key = augment_views(&windows, tags, Some(&mut rng), out);
    Ok(TrainSample {
        label: set.sample(i).label,
        query,
        key,
        query_mask_seed: rng.random(),
        key_mask_seed: rng.random(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Sum of anchor losses, the value that was differentiated.
    pub contrastive_loss: f64,
    /// Batch mean focal loss.
    pub focal_loss: f64,
    pub lr: f64,
    /// Number of (anchor, positive) terms in the contrastive loss.
    pub pairs: usize,
    /// Sum over those terms, for per-term averaging.
    pub pair_loss_sum: f64,
    /// Smallest per-anchor contrastive loss; `None` when the queue was empty.
    pub min_anchor_loss: Option<f64>,
    /// Largest |gradient| the focal branch left on encoder parameters.
    pub encoder_grad_from_focal: f64,
    /// Largest |gradient| the contrastive branch left on classifier parameters.
    pub head_grad_from_contrastive: f64,
    pub queue_len: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean contrastive term per (anchor, positive) pair.
    pub infonce: f64,
    /// Mean focal loss per sample.
    pub focal: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

struct SampleOut {
    encoder: StoreGrads,
    head: StoreGrads,
    z_key: Vec<f64>,
    anchor_loss: Option<f64>,
    positives: usize,
    focal: f64,
    encoder_leak: f64,
    head_leak: f64,
}

fn masking<'a>(ratio: f64, rng: &'a mut ChaCha8Rng) -> Masking<'a> {
    if ratio > 0.0 {
        Masking::Random { ratio, rng }
    } else {
        Masking::Off
    }
}

fn inputs(s: &mut Session, clips: &[Tensor]) -> Vec<Var> {
    clips.iter().map(|c| s.tape.input(c)).collect()
}

pub struct Trainer {
    pub model: Model,
    pub queue: ContrastQueue,
    opt_query: Adam,
    opt_head: Adam,
    alpha: Vec<f64>,
    rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    epoch: usize,
}

impl Trainer {
    /// Fresh model and empty queue for `cfg`, with focal weights resolved from `train_labels`.
    pub fn new(cfg: &RunConfig, classes: Vec<String>, train_labels: &[usize]) -> Result<Self> {
        let model = Model::new(cfg, classes)?;
        let alpha = cfg
            .sumoco
            .focal_alpha
            .weights(model.classes.len(), train_labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            queue: ContrastQueue::new(cfg.sumoco.queue_capacity, cfg.sumoco.embed_dim),
            opt_query: Adam::new(&model.query),
            opt_head: Adam::new(&model.head),
            alpha,
            rng,
            pool: thread_pool()?,
            epoch: 0,
            model,
        })
    }

    pub fn for_data(cfg: &RunConfig, data: &ClipSet) -> Result<Self> {
        for t in &cfg.sources {
            if !data.has_source(*t) {
                return Err(Error::Config(format!(
                    "run uses source {t}, data at {} provides {}",
                    data.root().display(),
                    data.sources()
                        .iter()
                        .map(|s| s.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        }
        if data.is_empty() {
            return Err(Error::Data(format!(
                "no samples in {}",
                data.root().display()
            )));
        }
        Self::new(cfg, data.classes().to_vec(), &data.labels())
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn sample_pass(&self, x: &TrainSample, batch: usize) -> Result<SampleOut> {
        let m = &self.model;
        let cfg = &m.config;
        if x.label >= m.classes.len() {
            return Err(Error::Data(format!(
                "label {} outside {} classes",
                x.label,
                m.classes.len()
            )));
        }

        let mut s = Session::new(&[&m.query, &m.head]);
        let clips = inputs(&mut s, &x.query);
        let mut qrng = ChaCha8Rng::seed_from_u64(x.query_mask_seed);
        let (g, z) = m
            .encoder
            .encode(&mut s, &clips, masking(cfg.fusion.mask_ratio, &mut qrng))?;
        let nce = if self.queue.is_empty() {
            None
        } else {
            Some(info_nce_on_tape(
                &mut s.tape,
                z,
                x.label,
                &self.queue,
                &cfg.sumoco,
            )?)
        };
        let g_detached = s.tape.detach(g);
        let logits = m.classifier.forward(&mut s, g_detached)?;
        let (focal_var, focal) = focal_on_tape(
            &mut s.tape,
            logits,
            x.label,
            self.alpha[x.label],
            cfg.sumoco.focal_gamma,
            1.0 / batch as f64,
        )?;

        let fg = s.tape.backward(focal_var)?;
        let head = s.grads(&fg, HEAD_GROUP);
        let encoder_leak = s.grads(&fg, ENCODER_GROUP).max_abs();
        let (encoder, head_leak, anchor_loss, positives) = match nce {
            Some((v, a)) => {
                let cg = s.tape.backward(v)?;
                (
                    s.grads(&cg, ENCODER_GROUP),
                    s.grads(&cg, HEAD_GROUP).max_abs(),
                    Some(a.loss),
                    a.positives,
                )
            }
            None => (StoreGrads::empty(m.query.len()), 0.0, None, 0),
        };
        drop(s);

        let mut ks = Session::inference(&[&m.key]);
        let kclips = inputs(&mut ks, &x.key);
        let mut krng = ChaCha8Rng::seed_from_u64(x.key_mask_seed);
        let (_, zk) =
            m.encoder
                .encode(&mut ks, &kclips, masking(cfg.fusion.mask_ratio, &mut krng))?;
        Ok(SampleOut {
            encoder,
            head,
            z_key: ks.tape.value(zk).to_vec(),
            anchor_loss,
            positives,
            focal,
            encoder_leak,
            head_leak,
        })
    }

    /// One optimization step over a prepared batch.
    pub fn train_step(&mut self, batch: &[TrainSample], lr: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step needs a non-empty batch".into()));
        }
        let n = batch.len();
        let outs: Vec<SampleOut> = {
            let this = &*self;
            this.pool.install(|| {
                batch
                    .par_iter()
                    .map(|x| this.sample_pass(x, n))
                    .collect::<Result<Vec<_>>>()
            })?
        };

        let mut enc = StoreGrads::empty(self.model.query.len());
        let mut head = StoreGrads::empty(self.model.head.len());
        let mut report = StepReport {
            contrastive_loss: 0.0,
            focal_loss: 0.0,
            lr,
            pairs: 0,
            pair_loss_sum: 0.0,
            min_anchor_loss: None,
            encoder_grad_from_focal: 0.0,
            head_grad_from_contrastive: 0.0,
            queue_len: 0,
        };
        let per_term = self.model.config.sumoco.positive_normalization
            == super::config::PositiveNormalization::MeanOverPositives;
        for o in &outs {
            enc.add(&o.encoder);
            head.add(&o.head);
            report.focal_loss += o.focal / n as f64;
            if let Some(l) = o.anchor_loss {
                report.contrastive_loss += l;
                report.pairs += o.positives;
                report.pair_loss_sum += if per_term { l * o.positives as f64 } else { l };
                report.min_anchor_loss = Some(report.min_anchor_loss.map_or(l, |m: f64| m.min(l)));
            }
            report.encoder_grad_from_focal = report.encoder_grad_from_focal.max(o.encoder_leak);
            report.head_grad_from_contrastive = report.head_grad_from_contrastive.max(o.head_leak);
        }
        if !(report.contrastive_loss.is_finite() && report.focal_loss.is_finite())
            || !enc.all_finite()
            || !head.all_finite()
        {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at epoch {} (contrastive {}, focal {})",
                self.epoch + 1,
                report.contrastive_loss,
                report.focal_loss
            )));
        }

        momentum_update(
            &mut self.model.key,
            &self.model.query,
            self.model.config.sumoco.momentum,
        )?;
        let keys: Vec<Vec<f64>> = outs.iter().map(|o| o.z_key.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|x| x.label).collect();
        self.queue.push(&keys, &labels)?;
        self.opt_query.step(&mut self.model.query, &enc, lr)?;
        self.opt_head.step(&mut self.model.head, &head, lr)?;
        report.queue_len = self.queue.len();
        Ok(report)
    }

    /// Shuffles, batches and trains one epoch over `data`.
    pub fn run_epoch(&mut self, data: &ClipSet) -> Result<(EpochMetrics, Vec<StepReport>)> {
        let start = Instant::now();
        let cfg = self.model.config.clone();
        let lr = cfg.optimizer.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let seeds: Vec<u64> = order.iter().map(|_| self.rng.random()).collect();

        let mut steps = Vec::new();
        for (idx, sd) in order
            .chunks(cfg.optimizer.batch)
            .zip(seeds.chunks(cfg.optimizer.batch))
        {
            let batch: Vec<TrainSample> = self.pool.install(|| {
                idx.par_iter()
                    .zip(sd)
                    .map(|(&i, &seed)| {
                        prepare_sample(data, i, &cfg.sources, cfg.data.input_size, seed)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            steps.push(self.train_step(&batch, lr)?);
        }
        self.epoch += 1;

        let pairs: usize = steps.iter().map(|s| s.pairs).sum();
        let pair_sum: f64 = steps.iter().map(|s| s.pair_loss_sum).sum();
        let focal_sum: f64 = steps
            .iter()
            .zip(order.chunks(cfg.optimizer.batch))
            .map(|(s, b)| s.focal_loss * b.len() as f64)
            .sum();
        let metrics = EpochMetrics {
            epoch: self.epoch,
            infonce: if pairs > 0 {
                pair_sum / pairs as f64
            } else {
                0.0
            },
            focal: focal_sum / data.len() as f64,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        Ok((metrics, steps))
    }
}

/// Trains for the configured number of epochs, reporting each epoch as it finishes.
pub fn train_loop(
    cfg: &RunConfig,
    data: &ClipSet,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::for_data(cfg, data)?;
    let mut log = Vec::with_capacity(cfg.optimizer.epochs);
    for _ in 0..cfg.optimizer.epochs {
        let (m, _) = trainer.run_epoch(data)?;
        on_epoch(&m)?;
        log.push(m);
    }
    Ok((trainer.model, log))
}
