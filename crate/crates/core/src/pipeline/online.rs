//! Causal online inference.
//!
//! The prediction for frame `t` uses frames `0..=t` only. Backbone features
//! are computed with the full causal history (MS-STA at frame `t` looks back
//! up to `τ` frames), so they match the cached features of stage two. The
//! transformer then runs over the last `min(t + 1, T)` frames and the last
//! position is emitted.
//!
//! [`online_infer`] processes a whole video at once; [`OnlineRecognizer`]
//! consumes one frame at a time with bounded state. Both give bit-identical
//! probabilities.

use std::collections::VecDeque;

use crate::autograd::concat;
use crate::error::{Error, Result};
use crate::model::{aux_logits, backbone_stage, msta_block, normalize_input, spatial_encode, task_logits, temporal_encode, ModelConfig};
use crate::params::ModelParams;
use crate::synthdata::PhaseSequence;
use crate::{Tape, Tensor};

/// Frames per backbone chunk in [`video_features`].
const CHUNK: usize = 64;
/// Full-length windows per temporal batch in [`online_infer`].
const WINDOW_BATCH: usize = 64;

/// Per-frame outputs for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub video_id: usize,
    /// `[N, C]` task-head probabilities.
    pub p_task: Tensor,
    /// `[N, C]` auxiliary-head probabilities.
    pub p_aux: Tensor,
    pub labels: Vec<usize>,
}

impl VideoPrediction {
    pub fn task_predictions(&self) -> Vec<usize> {
        self.p_task.argmax_rows()
    }

    pub fn aux_predictions(&self) -> Vec<usize> {
        self.p_aux.argmax_rows()
    }
}

fn check_frames(frames: &Tensor, cfg: &ModelConfig) -> Result<usize> {
    let s = frames.shape();
    if s.len() != 4 || s[1..] != [cfg.image_channels, cfg.image_height, cfg.image_width] {
        return Err(Error::InvalidShape {
            op: "online",
            detail: format!("frames of shape {s:?} do not match the model input"),
        });
    }
    Ok(s[0])
}

/// Causal backbone features `[N, H, W, D]` of a whole video.
///
/// Works in chunks; each chunk is preceded by the `τ` frames MS-STA needs
/// and those rows are dropped afterwards, so the result equals one pass
/// over the full video.
pub fn video_features(frames: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let n = check_frames(frames, cfg)?;
    let history = cfg.temporal_receptive_field();
    let frame_len = frames.numel() / n.max(1);
    let mut out = Vec::new();
    let mut shape = None;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let from = start.saturating_sub(history);
        let chunk = Tensor::new(
            [&[end - from][..], &frames.shape()[1..]].concat(),
            frames.data()[from * frame_len..end * frame_len].to_vec(),
        )?;
        let tape = Tape::new();
        let p = params.bind(&tape);
        let feat = crate::model::backbone_forward(tape.constant(chunk), &p, cfg, None)?.features;
        let v = feat.value();
        let row = v.numel() / (end - from);
        out.extend_from_slice(&v.data()[(start - from) * row..]);
        shape.get_or_insert_with(|| v.shape()[1..].to_vec());
        start = end;
    }
    let (h, w, d) = cfg.feature_dims()?;
    let dims = shape.unwrap_or_else(|| vec![h, w, d]);
    Tensor::new([&[n][..], &dims[..]].concat(), out)
}

/// Spatially encoded tokens `[N, token_dim]` and auxiliary probabilities
/// `[N, C]` from backbone features.
fn frame_outputs(features: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<(Tensor, Tensor)> {
    let n = features.shape()[0];
    let row = features.numel() / n.max(1);
    let mut pooled = Vec::with_capacity(n * cfg.token_dim);
    let mut aux = Vec::with_capacity(n * cfg.num_classes);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk = Tensor::new(
            [&[end - start][..], &features.shape()[1..]].concat(),
            features.data()[start * row..end * row].to_vec(),
        )?;
        let tape = Tape::new();
        let p = params.bind(&tape);
        let f = tape.constant(chunk);
        pooled.extend_from_slice(spatial_encode(f, &p, cfg)?.value().data());
        aux.extend_from_slice(aux_logits(f, &p)?.softmax(1)?.value().data());
        start = end;
    }
    Ok((
        Tensor::new(vec![n, cfg.token_dim], pooled)?,
        Tensor::new(vec![n, cfg.num_classes], aux)?,
    ))
}

/// Task probabilities of the last row of each window `[B, L, token_dim]`.
fn last_task_probs(windows: Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let s = windows.shape().to_vec();
    let (b, l) = (s[0], s[1]);
    let tape = Tape::new();
    let p = params.bind(&tape);
    let seq = temporal_encode(tape.constant(windows), &p, cfg)?;
    let last = seq.slice(1, l - 1, 1)?.reshape(vec![b, cfg.token_dim])?;
    Ok(task_logits(last, &p)?.softmax(1)?.value().data().to_vec())
}

/// Online predictions for precomputed backbone features `[N, H, W, D]`.
pub fn infer_from_features(features: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<(Tensor, Tensor)> {
    let n = features.shape()[0];
    let t = cfg.seq_len;
    let dm = cfg.token_dim;
    let (pooled, p_aux) = frame_outputs(features, params, cfg)?;
    let tokens = pooled.data();
    let mut p_task = Vec::with_capacity(n * cfg.num_classes);
    // Frames before a full window: one truncated window each.
    for i in 0..n.min(t - 1) {
        let w = Tensor::new(vec![1, i + 1, dm], tokens[..(i + 1) * dm].to_vec())?;
        p_task.extend(last_task_probs(w, params, cfg)?);
    }
    let mut end = t - 1;
    while end < n {
        let stop = (end + WINDOW_BATCH).min(n);
        let mut data = Vec::with_capacity((stop - end) * t * dm);
        for e in end..stop {
            data.extend_from_slice(&tokens[(e + 1 - t) * dm..(e + 1) * dm]);
        }
        let w = Tensor::new(vec![stop - end, t, dm], data)?;
        p_task.extend(last_task_probs(w, params, cfg)?);
        end = stop;
    }
    Ok((Tensor::new(vec![n, cfg.num_classes], p_task)?, p_aux))
}

/// Online predictions for every frame of a video.
pub fn online_infer(video: &PhaseSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<VideoPrediction> {
    let features = video_features(&video.frames, params, cfg)?;
    let (p_task, p_aux) = infer_from_features(&features, params, cfg)?;
    Ok(VideoPrediction {
        video_id: video.video_id,
        p_task,
        p_aux,
        labels: video.labels.clone(),
    })
}

/// Auxiliary-head (frame-wise) accuracy pooled over `videos`. Skips the
/// transformer.
pub fn frame_accuracy(videos: &[PhaseSequence], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for v in videos {
        let features = video_features(&v.frames, params, cfg)?;
        let (_, p_aux) = frame_outputs(&features, params, cfg)?;
        hit += p_aux.argmax_rows().iter().zip(&v.labels).filter(|(a, b)| a == b).count();
        total += v.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Online task-head accuracy pooled over `videos`.
pub fn task_accuracy(videos: &[PhaseSequence], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for v in videos {
        let pred = online_infer(v, params, cfg)?;
        hit += pred.task_predictions().iter().zip(&v.labels).filter(|(a, b)| a == b).count();
        total += v.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Per-frame result of [`OnlineRecognizer::push`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    pub p_task: Vec<f64>,
    pub p_aux: Vec<f64>,
}

/// Streaming recognizer. Keeps the last `τ + 1` MS-STA inputs and the last
/// `T` pooled tokens, so memory does not grow with the video.
pub struct OnlineRecognizer<'a> {
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    stage_inputs: VecDeque<Tensor>,
    tokens: VecDeque<Vec<f64>>,
    frame: usize,
}

impl<'a> OnlineRecognizer<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params,
            cfg,
            stage_inputs: VecDeque::new(),
            tokens: VecDeque::new(),
            frame: 0,
        })
    }

    /// Frames seen so far.
    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    pub fn reset(&mut self) {
        self.stage_inputs.clear();
        self.tokens.clear();
        self.frame = 0;
    }

    /// Consumes one frame `[C_img, H0, W0]` and returns its predictions.
    pub fn push(&mut self, frame: &Tensor) -> Result<FrameOutput> {
        let cfg = self.cfg;
        let expected = [cfg.image_channels, cfg.image_height, cfg.image_width];
        if frame.shape() != expected {
            return Err(Error::InvalidShape {
                op: "online",
                detail: format!("frame of shape {:?}, expected {expected:?}", frame.shape()),
            });
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(Tensor::new([&[1][..], &expected[..]].concat(), frame.data().to_vec())?);
        let mut x = normalize_input(x, cfg)?;
        for stage in 0..cfg.backbone.len() {
            x = backbone_stage(x, &p, cfg, stage)?;
            if cfg.msta_stage == Some(stage) {
                self.stage_inputs.push_back((*x.value()).clone());
                if self.stage_inputs.len() > cfg.msta.tau + 1 {
                    self.stage_inputs.pop_front();
                }
                let hist: Vec<_> = self.stage_inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let (out, _) = msta_block(concat(&hist, 0)?, &p, cfg)?;
                x = out.slice(0, hist.len() - 1, 1)?;
            }
        }
        let feat = x.permute(&[0, 2, 3, 1])?;
        let p_aux = aux_logits(feat, &p)?.softmax(1)?.value().data().to_vec();
        let token = spatial_encode(feat, &p, cfg)?.value().data().to_vec();
        self.tokens.push_back(token);
        if self.tokens.len() > cfg.seq_len {
            self.tokens.pop_front();
        }
        let l = self.tokens.len();
        let window = Tensor::new(vec![1, l, cfg.token_dim], self.tokens.iter().flatten().copied().collect())?;
        let p_task = last_task_probs(window, self.params, cfg)?;
        let out = FrameOutput {
            frame: self.frame,
            p_task,
            p_aux,
        };
        self.frame += 1;
        Ok(out)
    }
}
