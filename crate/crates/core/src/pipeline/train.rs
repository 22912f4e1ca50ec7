//! The two training stages.
//!
//! Stage one fits the backbone, MS-STA and the auxiliary head with
//! frame-wise cross-entropy. Stage two freezes the backbone, reads cached
//! features, and fits the transformer and both heads with CE plus DSR.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Tape;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, select_rows, sequence_ranges, total_loss, LossOptions, RangeBounds};
use crate::model::{aux_logits, backbone_forward, heads_forward, init_params, trained_in, ModelConfig};
use crate::params::{ModelParams, Stage};
use crate::synthdata::PhaseSequence;
use crate::Tensor;

use super::online::frame_accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub backbone_epochs: usize,
    pub transformer_epochs: usize,
    /// Windows sampled per epoch; an epoch is this many windows, not a pass
    /// over every frame.
    pub windows_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub optimizer: OptimizerKind,
    /// Heavy-ball momentum for SGD; 0 is plain SGD. Ignored by Adam.
    pub momentum: f64,
    pub lambda: f64,
    /// Supervised frames per stage-one window. Each window also carries the
    /// MS-STA history those frames need.
    pub backbone_window: usize,
    pub ranges: RangeBounds,
    pub loss: LossOptions,
    /// Check the DSR stop-gradient routing on the first stage-two batch.
    pub verify_routing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone_epochs: 20,
            transformer_epochs: 20,
            windows_per_epoch: 640,
            batch_size: 32,
            lr: 1e-3,
            lr_halving_period: 5,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            lambda: 1.0,
            backbone_window: 8,
            ranges: RangeBounds::default(),
            loss: LossOptions::default(),
            verify_routing: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.windows_per_epoch == 0 || self.backbone_window == 0 {
            return bad("batch_size, windows_per_epoch and backbone_window must be positive");
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }

    /// `lr₀ · 2^(−floor(epoch / period))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.lr_halving_period, epoch)
    }

    fn batches_per_epoch(&self) -> usize {
        self.windows_per_epoch.div_ceil(self.batch_size)
    }
}

pub fn lr_at(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / period) as i32)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce_task: Option<f64>,
    pub ce_aux: f64,
    pub dsr: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochLog>,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

/// SGD with optional heavy-ball momentum, or Adam, over the trainable entries.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    steps: i32,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Self {
            kind,
            momentum,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        if self.kind == OptimizerKind::Sgd && self.momentum == 0.0 {
            return params.sgd_step(lr);
        }
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.steps += 1;
        let (c1, c2) = (1.0 - B1.powi(self.steps), 1.0 - B2.powi(self.steps));
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let p = params.param_mut(&name).expect("listed name");
            if !p.grad_enabled {
                continue;
            }
            let g = p.grad.take().ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, mi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *mi = self.momentum * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
                    for (((w, mi), vi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mi = B1 * *mi + (1.0 - B1) * gi;
                        *vi = B2 * *vi + (1.0 - B2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

fn diverged(stage: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence(format!("{stage} epoch {epoch}: {op} produced a non-finite value")),
        other => other,
    }
}

fn check_finite(stage: &str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{stage} epoch {epoch}: loss is {loss}")))
    }
}

/// Picks a video with probability proportional to its frame count, then a
/// frame uniformly, so `(video, frame)` pairs are uniform.
fn sample_frame(lengths: &[usize], total: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let mut r = rng.gen_range(0..total);
    for (v, &n) in lengths.iter().enumerate() {
        if r < n {
            return (v, r);
        }
        r -= n;
    }
    unreachable!("r < total")
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let tag = match stage {
        Stage::Backbone => 0x5354_4147_4531_u64,
        Stage::Transformer => 0x5354_4147_4532_u64,
    };
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

struct BackboneBatch {
    frames: Tensor,
    segments: Vec<usize>,
    supervised: Vec<usize>,
    labels: Vec<usize>,
}

/// Stage-one windows end at a uniformly drawn `(video, frame)` pair. Each
/// window holds `receptive + backbone_window` frames, truncated at the video
/// start; the last `backbone_window` (or every frame when the window starts
/// the video) are supervised.
fn backbone_batch(videos: &[PhaseSequence], cfg: &ModelConfig, tc: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<BackboneBatch> {
    let lengths: Vec<usize> = videos.iter().map(PhaseSequence::len).collect();
    let total: usize = lengths.iter().sum();
    let receptive = cfg.temporal_receptive_field();
    let span = receptive + tc.backbone_window;
    let frame_len = videos[0].frames.numel() / videos[0].len();
    let mut data = Vec::with_capacity(tc.batch_size * span * frame_len);
    let mut segments = Vec::with_capacity(tc.batch_size);
    let mut supervised = Vec::new();
    let mut labels = Vec::new();
    let mut row = 0;
    for _ in 0..tc.batch_size {
        let (v, end) = sample_frame(&lengths, total, rng);
        let start = (end + 1).saturating_sub(span);
        let len = end + 1 - start;
        let seq = &videos[v];
        data.extend_from_slice(&seq.frames.data()[start * frame_len..(end + 1) * frame_len]);
        let first = if start == 0 { 0 } else { len - tc.backbone_window };
        for i in first..len {
            supervised.push(row + i);
            labels.push(seq.labels[start + i]);
        }
        segments.push(len);
        row += len;
    }
    let mut shape = videos[0].frames.shape().to_vec();
    shape[0] = row;
    Ok(BackboneBatch {
        frames: Tensor::new(shape, data)?,
        segments,
        supervised,
        labels,
    })
}

fn check_videos(videos: &[PhaseSequence], cfg: &ModelConfig) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("no training videos".into()));
    }
    let expected = [cfg.image_channels, cfg.image_height, cfg.image_width];
    for v in videos {
        if v.is_empty() || v.frames.shape()[1..] != expected || v.labels.iter().any(|&l| l >= cfg.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "video {} does not match the model config",
                v.video_id
            )));
        }
    }
    Ok(())
}

/// Stage one. Starts from a fresh initialization of `cfg`.
pub fn train_backbone(
    videos: &[PhaseSequence],
    val: Option<&[PhaseSequence]>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    check_videos(videos, cfg)?;
    let mut params = init_params::<f64>(cfg)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in &names {
        if let Some(p) = params.param_mut(n) {
            p.grad_enabled = trained_in(n, Stage::Backbone);
        }
    }
    let mut rng = stage_rng(tc.seed, Stage::Backbone);
    let mut opt = Optimizer::new(tc.optimizer, tc.momentum);
    let mut history = Vec::with_capacity(tc.backbone_epochs);
    let mut initial_loss = f64::NAN;
    for epoch in 0..tc.backbone_epochs {
        let lr = tc.lr_at(epoch);
        let mut sum = 0.0;
        let batches = tc.batches_per_epoch();
        for _ in 0..batches {
            let batch = backbone_batch(videos, cfg, tc, &mut rng)?;
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let step = || -> Result<f64> {
                let x = tape.constant(batch.frames.clone());
                let feat = backbone_forward(x, &bound, cfg, Some(&batch.segments))?.features;
                let p = select_rows(aux_logits(feat, &bound)?.softmax(1)?, &batch.supervised)?;
                let loss = cross_entropy(p, &batch.labels)?;
                tape.backward(loss)?;
                Ok(loss.value().item())
            };
            let loss = step().map_err(|e| diverged("backbone", epoch, e))?;
            check_finite("backbone", epoch, loss)?;
            if initial_loss.is_nan() {
                initial_loss = loss;
            }
            sum += loss;
            params.accumulate_grads(&tape, &bound);
            opt.step(&mut params, lr)?;
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(frame_accuracy(v, &params, cfg)?),
            _ => None,
        };
        let log = EpochLog {
            stage: "backbone".into(),
            epoch,
            lr,
            loss: sum / batches as f64,
            ce_task: None,
            ce_aux: sum / batches as f64,
            dsr: None,
            val_accuracy,
        };
        log::info!(
            "backbone epoch {epoch}: lr {lr:.2e} loss {:.4} val {:?}",
            log.loss,
            log.val_accuracy
        );
        history.push(log);
    }
    params.meta.stage = Stage::Backbone;
    Ok(TrainOutcome {
        params,
        history,
        initial_loss,
    })
}

/// Backbone features of one video with its labels, `[N, H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedVideo {
    pub video_id: usize,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

struct HeadBatch {
    features: Tensor,
    labels: Vec<usize>,
}

/// Full-length windows ending at uniformly drawn `(video, frame)` pairs
/// among the frames that close a complete window.
fn head_batch(videos: &[CachedVideo], t: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<HeadBatch> {
    let lengths: Vec<usize> = videos.iter().map(|v| v.labels.len() + 1 - t).collect();
    let total: usize = lengths.iter().sum();
    let row = videos[0].features.numel() / videos[0].labels.len();
    let mut data = Vec::with_capacity(batch * t * row);
    let mut labels = Vec::with_capacity(batch * t);
    for _ in 0..batch {
        let (v, start) = sample_frame(&lengths, total, rng);
        let cv = &videos[v];
        data.extend_from_slice(&cv.features.data()[start * row..(start + t) * row]);
        labels.extend_from_slice(&cv.labels[start..start + t]);
    }
    let mut shape = videos[0].features.shape().to_vec();
    shape[0] = batch * t;
    Ok(HeadBatch {
        features: Tensor::new(shape, data)?,
        labels,
    })
}

/// Outcome of the stop-gradient check on one batch: the largest gradient
/// magnitude that should be exactly zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingCheck {
    /// Aux-head gradient from the early (task-learns) term.
    pub aux_from_early: f64,
    /// Task-head gradient from the late (aux-learns) term.
    pub task_from_late: f64,
    /// Task-head gradient from the early term, which should be non-zero.
    pub task_from_early: f64,
    /// Aux-head gradient from the late term, which should be non-zero.
    pub aux_from_late: f64,
}

impl RoutingCheck {
    pub fn holds(&self) -> bool {
        self.aux_from_early == 0.0 && self.task_from_late == 0.0
    }
}

/// Back-propagates each DSR term alone and records the head gradients.
pub fn dsr_routing_check(
    features: &Tensor,
    batch: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<RoutingCheck> {
    let t = features.shape()[0] / batch;
    let ranges = sequence_ranges(t, &tc.ranges)?.tiled(batch, t);
    let max_abs = |tape: &Tape, v: crate::autograd::Var<'_, f64>| {
        tape.grad(v).map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
    };
    let grads = |early: bool| -> Result<(f64, f64)> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let out = heads_forward(tape.constant(features.clone()), &bound, cfg, batch)?;
        let terms = crate::losses::dsr_terms(out.task.softmax(1)?, out.aux.softmax(1)?, &ranges, tc.loss.dsr_average)?;
        let term = if early { terms.early } else { terms.late };
        if let Some(term) = term {
            tape.backward(term)?;
        }
        Ok((max_abs(&tape, bound.get("task.w")?), max_abs(&tape, bound.get("aux.w")?)))
    };
    let (task_e, aux_e) = grads(true)?;
    let (task_l, aux_l) = grads(false)?;
    Ok(RoutingCheck {
        aux_from_early: aux_e,
        task_from_late: task_l,
        task_from_early: task_e,
        aux_from_late: aux_l,
    })
}

/// Stage two on cached features. `params` carries the trained backbone,
/// which stays frozen.
pub fn train_transformer(
    train: &[CachedVideo],
    val: Option<&[PhaseSequence]>,
    mut params: ModelParams,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    let t = cfg.seq_len;
    let usable: Vec<CachedVideo> = train.iter().filter(|v| v.labels.len() >= t).cloned().collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!("no cached video has {t} frames")));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in &names {
        if let Some(p) = params.param_mut(n) {
            p.grad_enabled = trained_in(n, Stage::Transformer);
            p.grad = None;
        }
    }
    let ranges = sequence_ranges(t, &tc.ranges)?.tiled(tc.batch_size, t);
    let mut rng = stage_rng(tc.seed, Stage::Transformer);
    let mut opt = Optimizer::new(tc.optimizer, tc.momentum);
    let mut history = Vec::with_capacity(tc.transformer_epochs);
    let mut initial_loss = f64::NAN;
    for epoch in 0..tc.transformer_epochs {
        let lr = tc.lr_at(epoch);
        let batches = tc.batches_per_epoch();
        let (mut sum, mut ce_t, mut ce_a, mut dsr) = (0.0, 0.0, 0.0, 0.0);
        for b in 0..batches {
            let batch = head_batch(&usable, t, tc.batch_size, &mut rng)?;
            if epoch == 0 && b == 0 && tc.verify_routing {
                let check = dsr_routing_check(&batch.features, tc.batch_size, &params, cfg, tc)?;
                if !check.holds() {
                    return Err(Error::Divergence(format!("DSR stop-gradient routing violated: {check:?}")));
                }
            }
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let step = || -> Result<[f64; 4]> {
                let out = heads_forward(tape.constant(batch.features.clone()), &bound, cfg, tc.batch_size)?;
                let l = total_loss(
                    out.task.softmax(1)?,
                    out.aux.softmax(1)?,
                    &batch.labels,
                    &ranges,
                    tc.lambda,
                    &tc.loss,
                )?;
                tape.backward(l.total)?;
                Ok([
                    l.total.value().item(),
                    l.ce_task.value().item(),
                    l.ce_aux.map_or(0.0, |v| v.value().item()),
                    l.dsr.value().item(),
                ])
            };
            let [loss, a, c, d] = step().map_err(|e| diverged("transformer", epoch, e))?;
            check_finite("transformer", epoch, loss)?;
            if initial_loss.is_nan() {
                initial_loss = loss;
            }
            sum += loss;
            ce_t += a;
            ce_a += c;
            dsr += d;
            params.accumulate_grads(&tape, &bound);
            opt.step(&mut params, lr)?;
        }
        let n = batches as f64;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(super::online::task_accuracy(v, &params, cfg)?),
            _ => None,
        };
        let log = EpochLog {
            stage: "transformer".into(),
            epoch,
            lr,
            loss: sum / n,
            ce_task: Some(ce_t / n),
            ce_aux: ce_a / n,
            dsr: Some(dsr / n),
            val_accuracy,
        };
        log::info!(
            "transformer epoch {epoch}: lr {lr:.2e} loss {:.4} ce {:.4}/{:.4} dsr {:.4} val {:?}",
            log.loss,
            ce_t / n,
            ce_a / n,
            dsr / n,
            log.val_accuracy
        );
        history.push(log);
    }
    params.meta.stage = Stage::Transformer;
    Ok(TrainOutcome {
        params,
        history,
        initial_loss,
    })
}
