//! The assembled network: a small per-frame convolutional backbone with one
//! MS-STA insertion, a GAP auxiliary classifier on the backbone features, and
//! a spatial-then-temporal attention transformer feeding the task classifier.
//!
//! Every piece is causal in time. Convolutions and the spatial block act on
//! frames independently, MS-STA only looks back, and temporal attention is
//! masked to `j <= i`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{conv_out_extent, ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::msta::{msta_forward, MstaConfig};
use crate::params::{BoundParams, ModelParams, ParamMeta, Stage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Temporal window `T` of the transformer.
    pub seq_len: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Pixels enter the backbone as `(x - input_mean) · input_scale`.
    pub input_mean: f64,
    pub input_scale: f64,
    pub backbone: Vec<StageSpec>,
    /// Square kernel extent of every backbone convolution (odd, same padding).
    pub conv_kernel: usize,
    pub msta: MstaConfig,
    /// Backbone stage after which MS-STA runs; `None` removes the module.
    pub msta_stage: Option<usize>,
    pub token_dim: usize,
    pub num_heads: usize,
    /// Hidden width of every feed-forward layer as a multiple of `token_dim`.
    pub ffn_mult: usize,
    pub num_spatial_blocks: usize,
    pub num_temporal_blocks: usize,
    pub positional_encoding: bool,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            seq_len: 20,
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            input_mean: 0.2,
            input_scale: 10.0,
            backbone: vec![
                StageSpec { channels: 4, stride: 2 },
                StageSpec { channels: 32, stride: 2 },
                StageSpec { channels: 64, stride: 2 },
            ],
            conv_kernel: 3,
            msta: MstaConfig::default(),
            msta_stage: Some(0),
            token_dim: 64,
            num_heads: 4,
            ffn_mult: 2,
            num_spatial_blocks: 1,
            num_temporal_blocks: 2,
            positional_encoding: true,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

/// Spatial extents and channels after one backbone stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive".into());
        }
        if self.image_channels == 0 || self.image_height == 0 || self.image_width == 0 {
            return bad("image extents must be positive".into());
        }
        if !self.input_mean.is_finite() || !self.input_scale.is_finite() || self.input_scale == 0.0 {
            return bad("input_mean must be finite and input_scale finite and non-zero".into());
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.backbone.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return bad("backbone stages need positive channels and stride".into());
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.token_dim == 0 || self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return bad(format!(
                "token_dim {} must be a positive multiple of num_heads {}",
                self.token_dim, self.num_heads
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if let Some(s) = self.msta_stage {
            if s >= self.backbone.len() {
                return bad(format!("msta_stage {s} out of range for {} stages", self.backbone.len()));
            }
            self.msta.validate()?;
        }
        let (h, w, _) = self.feature_dims()?;
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape {
                op: "backbone",
                detail: format!(
                    "input {}x{} collapses to {h}x{w}; at least 2x2 is required",
                    self.image_height, self.image_width
                ),
            });
        }
        Ok(())
    }

    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        let pad = self.conv_kernel / 2;
        let (mut c, mut h, mut w) = (self.image_channels, self.image_height, self.image_width);
        let mut out = Vec::with_capacity(self.backbone.len());
        for (i, s) in self.backbone.iter().enumerate() {
            let too_small = || Error::InvalidShape {
                op: "backbone",
                detail: format!("stage {i} kernel does not fit a {h}x{w} input"),
            };
            let nh = conv_out_extent(h, self.conv_kernel, s.stride, pad).ok_or_else(too_small)?;
            let nw = conv_out_extent(w, self.conv_kernel, s.stride, pad).ok_or_else(too_small)?;
            out.push(StageShape {
                in_channels: c,
                in_h: h,
                in_w: w,
                channels: s.channels,
                h: nh,
                w: nw,
            });
            (c, h, w) = (s.channels, nh, nw);
        }
        Ok(out)
    }

    /// `(H, W, D)` of the backbone output.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let last = *self.stage_shapes()?.last().ok_or_else(|| Error::Config("empty backbone".into()))?;
        Ok((last.h, last.w, last.channels))
    }

    pub fn num_tokens(&self) -> Result<usize> {
        let (h, w, _) = self.feature_dims()?;
        Ok(h * w)
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.token_dim * self.ffn_mult
    }

    /// Frames of history a backbone feature depends on, besides its own.
    pub fn temporal_receptive_field(&self) -> usize {
        if self.msta_stage.is_some() {
            self.msta.tau
        } else {
            0
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Per-frame probabilities of both heads for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord<S: Scalar = f64> {
    /// `[T, C]`
    pub p_task: Tensor<S>,
    /// `[T, C]`
    pub p_aux: Tensor<S>,
    pub task_labels: Vec<usize>,
    pub aux_labels: Vec<usize>,
    /// Video frame index of the window's first row.
    pub window_start: usize,
}

impl<S: Scalar> PredictionRecord<S> {
    pub fn from_probs(p_task: Tensor<S>, p_aux: Tensor<S>, window_start: usize) -> Self {
        Self {
            task_labels: p_task.argmax_rows(),
            aux_labels: p_aux.argmax_rows(),
            p_task,
            p_aux,
            window_start,
        }
    }

    pub fn len(&self) -> usize {
        self.p_task.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `true` for parameters trained in the given stage. The auxiliary head
/// belongs to both.
pub fn trained_in(name: &str, stage: Stage) -> bool {
    match stage {
        Stage::Backbone => name.starts_with("backbone.") || name.starts_with("aux."),
        Stage::Transformer => !name.starts_with("backbone."),
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<S: Scalar>(&mut self, shape: Vec<usize>, limit: f64) -> Tensor<S> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64_lossy(self.rng.gen_range(-limit..limit)))
            .collect();
        Tensor::from_parts(shape, data)
    }
}

/// Deterministic initialization from `cfg.seed`.
///
/// Convolutions use He-uniform bounds, linear layers `1/sqrt(fan_in)`,
/// positional encodings a small uniform range, layer norms `(1, 0)` and all
/// biases zero.
pub fn init_params<S: Scalar>(cfg: &ModelConfig) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let mut p = ModelParams::new(ParamMeta {
        config_hash: cfg.hash(),
        stage: Stage::Backbone,
        seed: cfg.seed,
    });
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let k = cfg.conv_kernel;
    for (i, s) in cfg.stage_shapes()?.iter().enumerate() {
        let fan_in = s.in_channels * k * k;
        p.insert(
            format!("backbone.stage{i}.w"),
            init.uniform(vec![s.channels, s.in_channels, k, k], (6.0 / fan_in as f64).sqrt()),
        )?;
        p.insert(format!("backbone.stage{i}.b"), Tensor::zeros(vec![s.channels]))?;
    }
    if let Some(stage) = cfg.msta_stage {
        let d = cfg.backbone[stage].channels;
        let shape = cfg.msta.fusion_shape(d);
        let fan_in: usize = shape[1..].iter().product();
        p.insert("backbone.msta.w", init.uniform(shape, (1.0 / fan_in as f64).sqrt()))?;
        if !cfg.msta.bias_free_fusion {
            p.insert("backbone.msta.b", Tensor::zeros(vec![d]))?;
        }
    }
    let (_, _, d) = cfg.feature_dims()?;
    let c = cfg.num_classes;
    let dm = cfg.token_dim;
    linear_init(&mut p, &mut init, "aux", d, c)?;
    linear_init(&mut p, &mut init, "tr.embed", d, dm)?;
    if cfg.positional_encoding {
        let n = cfg.num_tokens()?;
        p.insert("tr.pos_spatial", init.uniform(vec![n, dm], 0.1))?;
        p.insert("tr.pos_temporal", init.uniform(vec![cfg.seq_len, dm], 0.1))?;
    }
    let blocks = (0..cfg.num_spatial_blocks)
        .map(|i| format!("tr.spatial{i}"))
        .chain((0..cfg.num_temporal_blocks).map(|i| format!("tr.temporal{i}")));
    for b in blocks {
        layer_norm_init(&mut p, &format!("{b}.ln1"), dm)?;
        for proj in ["q", "k", "v", "o"] {
            linear_init(&mut p, &mut init, &format!("{b}.attn.{proj}"), dm, dm)?;
        }
        layer_norm_init(&mut p, &format!("{b}.ln2"), dm)?;
        linear_init(&mut p, &mut init, &format!("{b}.ffn1"), dm, cfg.ffn_hidden())?;
        linear_init(&mut p, &mut init, &format!("{b}.ffn2"), cfg.ffn_hidden(), dm)?;
    }
    layer_norm_init(&mut p, "tr.ln_f", dm)?;
    linear_init(&mut p, &mut init, "task", dm, c)?;
    Ok(p)
}

fn linear_init<S: Scalar>(p: &mut ModelParams<S>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    p.insert(
        format!("{name}.w"),
        init.uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
    )?;
    p.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))
}

fn layer_norm_init<S: Scalar>(p: &mut ModelParams<S>, name: &str, d: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Tensor::full(vec![d], S::one()))?;
    p.insert(format!("{name}.b"), Tensor::zeros(vec![d]))
}

/// `x · W + b` on the last axis of a tensor of any rank.
pub fn linear<'t, S: Scalar>(x: Var<'t, S>, p: &BoundParams<'t, S>, name: &str) -> Result<Var<'t, S>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let shape = x.shape();
    let d_in = *shape.last().unwrap();
    let rows = x.numel() / d_in;
    let flat = if shape.len() == 2 { x } else { x.reshape(vec![rows, d_in])? };
    let y = flat.matmul(w)?.add_tiled(b)?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = w.shape()[1];
    y.reshape(out_shape)
}

fn layer_norm<'t, S: Scalar>(x: Var<'t, S>, p: &BoundParams<'t, S>, name: &str, cfg: &ModelConfig) -> Result<Var<'t, S>> {
    x.layer_norm(
        p.get(&format!("{name}.g"))?,
        p.get(&format!("{name}.b"))?,
        S::from_f64_lossy(cfg.layer_norm_eps),
    )
}

/// One backbone stage on `[B, C, H, W]`: convolution then ReLU.
pub fn backbone_stage<'t, S: Scalar>(
    x: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    stage: usize,
) -> Result<Var<'t, S>> {
    let stride = cfg.backbone[stage].stride;
    let pad = cfg.conv_kernel / 2;
    x.conv2d(
        p.get(&format!("backbone.stage{stage}.w"))?,
        Some(p.get(&format!("backbone.stage{stage}.b"))?),
        ConvSpec {
            stride: &[stride, stride],
            padding: &[pad, pad],
        },
    )?
    .relu()
}

/// MS-STA on a `[T, D, H, W]` stage output, returning `(out, a_ms)` in the
/// same layout.
pub fn msta_block<'t, S: Scalar>(
    x: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let f = x.permute(&[0, 2, 3, 1])?;
    let bias = if p.has("backbone.msta.b") {
        Some(p.get("backbone.msta.b")?)
    } else {
        None
    };
    let m = msta_forward(f, &cfg.msta, p.get("backbone.msta.w")?, bias)?;
    Ok((m.out.permute(&[0, 3, 1, 2])?, m.a_ms.permute(&[0, 3, 1, 2])?))
}

pub struct BackboneOutput<'t, S: Scalar> {
    /// `[T, H, W, D]`
    pub features: Var<'t, S>,
    /// MS-STA action features `[T, H', W', D']` at the insertion stage.
    pub a_ms: Option<Var<'t, S>>,
}

/// `(x - input_mean) · input_scale`; a no-op at `(0, 1)`.
pub fn normalize_input<'t, S: Scalar>(frames: Var<'t, S>, cfg: &ModelConfig) -> Result<Var<'t, S>> {
    let mut x = frames;
    if cfg.input_mean != 0.0 {
        let shift = Tensor::full(x.shape(), S::from_f64_lossy(-cfg.input_mean));
        x = x.add(x.tape().constant(shift))?;
    }
    if cfg.input_scale != 1.0 {
        x = x.scale(S::from_f64_lossy(cfg.input_scale))?;
    }
    Ok(x)
}

/// Backbone over `frames` `[T, C_img, H0, W0]`.
///
/// `segments` splits the frame axis into independent clips of the given
/// lengths (MS-STA never looks across a boundary); `None` means one clip.
pub fn backbone_forward<'t, S: Scalar>(
    frames: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    segments: Option<&[usize]>,
) -> Result<BackboneOutput<'t, S>> {
    let shape = frames.shape();
    let expected = [cfg.image_channels, cfg.image_height, cfg.image_width];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::InvalidShape {
            op: "backbone",
            detail: format!("expected [T, {}, {}, {}] frames, got {shape:?}", expected[0], expected[1], expected[2]),
        });
    }
    let t = shape[0];
    let whole = [t];
    let segments = segments.unwrap_or(&whole);
    if segments.iter().sum::<usize>() != t || segments.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "segments {segments:?} do not partition {t} frames"
        )));
    }
    let mut x = normalize_input(frames, cfg)?;
    let mut a_ms = None;
    for stage in 0..cfg.backbone.len() {
        x = backbone_stage(x, p, cfg, stage)?;
        if cfg.msta_stage == Some(stage) {
            let (out, a) = if segments.len() == 1 {
                msta_block(x, p, cfg)?
            } else {
                let mut outs = Vec::with_capacity(segments.len());
                let mut acts = Vec::with_capacity(segments.len());
                let mut start = 0;
                for &len in segments {
                    let (o, a) = msta_block(x.slice(0, start, len)?, p, cfg)?;
                    outs.push(o);
                    acts.push(a);
                    start += len;
                }
                (crate::autograd::concat(&outs, 0)?, crate::autograd::concat(&acts, 0)?)
            };
            x = out;
            a_ms = Some(a);
        }
    }
    Ok(BackboneOutput {
        features: x.permute(&[0, 2, 3, 1])?,
        a_ms: a_ms.map(|a| a.permute(&[0, 2, 3, 1])).transpose()?,
    })
}

/// Auxiliary classifier: spatial GAP then one linear layer, `[T, C]` logits.
pub fn aux_logits<'t, S: Scalar>(feat: Var<'t, S>, p: &BoundParams<'t, S>) -> Result<Var<'t, S>> {
    linear(feat.mean(&[1, 2])?, p, "aux")
}

/// Projects each of the `H·W` positions to a token and adds the spatial
/// positional encoding: `[T, H, W, D] → [T, N, token_dim]`.
pub fn tokenize<'t, S: Scalar>(feat: Var<'t, S>, p: &BoundParams<'t, S>, cfg: &ModelConfig) -> Result<Var<'t, S>> {
    let s = feat.shape();
    let tokens = linear(feat.reshape(vec![s[0], s[1] * s[2], s[3]])?, p, "tr.embed")?;
    if cfg.positional_encoding {
        tokens.add_tiled(p.get("tr.pos_spatial")?)
    } else {
        Ok(tokens)
    }
}

/// `[L, L]` mask allowing position `i` to see `j <= i`.
pub fn causal_mask(len: usize) -> Rc<Vec<bool>> {
    Rc::new((0..len * len).map(|ij| ij % len <= ij / len).collect())
}

/// Multi-head self-attention over the middle axis of `[B, L, token_dim]`.
fn self_attention<'t, S: Scalar>(
    x: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    name: &str,
    causal: bool,
) -> Result<Var<'t, S>> {
    let s = x.shape();
    let (b, l, dm) = (s[0], s[1], s[2]);
    let (h, dh) = (cfg.num_heads, cfg.head_dim());
    let heads = |v: Var<'t, S>| -> Result<Var<'t, S>> {
        v.reshape(vec![b, l, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(vec![b * h, l, dh])
    };
    let q = heads(linear(x, p, &format!("{name}.q"))?)?;
    let k = heads(linear(x, p, &format!("{name}.k"))?)?;
    let v = heads(linear(x, p, &format!("{name}.v"))?)?;
    let scores = q.bmm(k, true)?.scale(S::one() / S::from_count(dh).sqrt())?;
    let attn = if causal {
        scores.masked_softmax(causal_mask(l))?
    } else {
        scores.softmax(2)?
    };
    let ctx = attn
        .bmm(v, false)?
        .reshape(vec![b, h, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, l, dm])?;
    linear(ctx, p, &format!("{name}.o"))
}

/// Pre-norm transformer block on `[B, L, token_dim]`.
fn transformer_block<'t, S: Scalar>(
    x: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    name: &str,
    causal: bool,
) -> Result<Var<'t, S>> {
    let h = layer_norm(x, p, &format!("{name}.ln1"), cfg)?;
    let x = x.add(self_attention(h, p, cfg, &format!("{name}.attn"), causal)?)?;
    let h = layer_norm(x, p, &format!("{name}.ln2"), cfg)?;
    let h = linear(h, p, &format!("{name}.ffn1"))?.relu()?;
    x.add(linear(h, p, &format!("{name}.ffn2"))?)
}

/// Attention among the spatial tokens of each frame independently;
/// `tokens` is `[T, N, token_dim]`.
pub fn spatial_attention_block<'t, S: Scalar>(
    tokens: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    index: usize,
) -> Result<Var<'t, S>> {
    transformer_block(tokens, p, cfg, &format!("tr.spatial{index}"), false)
}

/// Causal attention across frames. Accepts `[T, token_dim]` or a batch
/// `[B, T, token_dim]`.
pub fn temporal_attention_block<'t, S: Scalar>(
    seq: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    index: usize,
) -> Result<Var<'t, S>> {
    let s = seq.shape();
    let x = if s.len() == 2 { seq.reshape(vec![1, s[0], s[1]])? } else { seq };
    let y = transformer_block(x, p, cfg, &format!("tr.temporal{index}"), true)?;
    if s.len() == 2 {
        y.reshape(s)
    } else {
        Ok(y)
    }
}

/// Per-frame half of the transformer: tokenize, spatial blocks, mean pool.
/// `[T, H, W, D] → [T, token_dim]`. Each output row depends on its own
/// frame only, so rows can be computed once and reused across windows.
pub fn spatial_encode<'t, S: Scalar>(feat: Var<'t, S>, p: &BoundParams<'t, S>, cfg: &ModelConfig) -> Result<Var<'t, S>> {
    let mut x = tokenize(feat, p, cfg)?;
    for i in 0..cfg.num_spatial_blocks {
        x = spatial_attention_block(x, p, cfg, i)?;
    }
    x.mean(&[1])
}

/// Temporal half: positional encoding, causal blocks, final norm. Input is
/// `[L, token_dim]` or `[B, L, token_dim]` with `L <= seq_len`; row `i` of a
/// window takes temporal position `i`.
pub fn temporal_encode<'t, S: Scalar>(pooled: Var<'t, S>, p: &BoundParams<'t, S>, cfg: &ModelConfig) -> Result<Var<'t, S>> {
    let s = pooled.shape();
    let l = s[s.len() - 2];
    if l > cfg.seq_len {
        return Err(Error::InvalidShape {
            op: "temporal_encode",
            detail: format!("window of {l} frames exceeds seq_len {}", cfg.seq_len),
        });
    }
    let mut x = pooled;
    if cfg.positional_encoding {
        x = x.add_tiled(p.get("tr.pos_temporal")?.slice(0, 0, l)?)?;
    }
    for i in 0..cfg.num_temporal_blocks {
        x = temporal_attention_block(x, p, cfg, i)?;
    }
    layer_norm(x, p, "tr.ln_f", cfg)
}

/// Task classifier logits `[.., C]`.
pub fn task_logits<'t, S: Scalar>(seq: Var<'t, S>, p: &BoundParams<'t, S>) -> Result<Var<'t, S>> {
    linear(seq, p, "task")
}

pub struct HeadOutput<'t, S: Scalar> {
    /// `[B·L, C]`
    pub task: Var<'t, S>,
    /// `[B·L, C]`
    pub aux: Var<'t, S>,
}

/// Both heads from backbone features `[B·L, H, W, D]` arranged as `batch`
/// consecutive windows of equal length.
pub fn heads_forward<'t, S: Scalar>(
    feat: Var<'t, S>,
    p: &BoundParams<'t, S>,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<HeadOutput<'t, S>> {
    let rows = feat.shape()[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::InvalidArgument(format!("{rows} frames do not split into {batch} windows")));
    }
    let l = rows / batch;
    let aux = aux_logits(feat, p)?;
    let pooled = spatial_encode(feat, p, cfg)?;
    let seq = temporal_encode(pooled.reshape(vec![batch, l, cfg.token_dim])?, p, cfg)?;
    let task = task_logits(seq.reshape(vec![rows, cfg.token_dim])?, p)?;
    Ok(HeadOutput { task, aux })
}

/// End-to-end forward over one window of frames `[L, C_img, H0, W0]` with
/// `L <= seq_len`; MS-STA sees only the frames of the window.
pub fn starnet_forward<S: Scalar>(
    frames: &Tensor<S>,
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    window_start: usize,
) -> Result<PredictionRecord<S>> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = tape.constant(frames.clone());
    let feat = backbone_forward(x, &p, cfg, None)?.features;
    let out = heads_forward(feat, &p, cfg, 1)?;
    Ok(PredictionRecord::from_probs(
        (*out.task.softmax(1)?.value()).clone(),
        (*out.aux.softmax(1)?.value()).clone(),
        window_start,
    ))
}
