//! Multi-scale temporal action features.
//!
//! Temporal differences of a feature sequence are taken at `tau`
//! progressively delayed scales, stacked along a scale axis, collapsed by
//! one 3-D convolution over (scale, height, width), and added back to the
//! input. Every step only looks backwards in time, so output frame `t`
//! depends on input frames `<= t`.

use serde::{Deserialize, Serialize};

use crate::autograd::{concat, ConvSpec, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the action feature at scale `k >= 2` is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MstaVariant {
    /// `a_k = M_k(D(f, k-1) - D(f, k))`: adjacent difference of the delayed stream.
    #[default]
    Chained,
    /// `a_k = M_k(f - D(f, k))`: difference against the current frame.
    Anchored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstaConfig {
    /// Number of temporal scales.
    pub tau: usize,
    /// Spatial extent of the fusion kernel (odd).
    pub fusion_kernel: usize,
    pub variant: MstaVariant,
    pub bias_free_fusion: bool,
}

impl Default for MstaConfig {
    fn default() -> Self {
        Self {
            tau: 5,
            fusion_kernel: 1,
            variant: MstaVariant::Chained,
            bias_free_fusion: false,
        }
    }
}

impl MstaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("msta.tau must be positive".into()));
        }
        if self.fusion_kernel == 0 || self.fusion_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "msta.fusion_kernel must be odd, got {}",
                self.fusion_kernel
            )));
        }
        Ok(())
    }

    /// Fusion weight shape for `channels` feature channels:
    /// `[D, D, tau, k, k]`.
    pub fn fusion_shape(&self, channels: usize) -> Vec<usize> {
        vec![channels, channels, self.tau, self.fusion_kernel, self.fusion_kernel]
    }
}

/// A `[T, H, W, D]` feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S: Scalar = f64>(Tensor<S>);

impl<S: Scalar> FeatureMap<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "feature_map",
                detail: format!("expected [T,H,W,D], got {:?}", t.shape()),
            });
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    /// `(H, W, D)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[1], s[2], s[3])
    }
}

/// `D(f, k)`: frames shifted `k` later, zero-filled at the front, truncated at the back.
pub fn temporal_delay<'t, S: Scalar>(f: Var<'t, S>, k: usize) -> Result<Var<'t, S>> {
    f.delay(k)
}

/// `M_k(a)`: zeroes frames `t < k`, where the difference straddles the padding.
pub fn action_mask<'t, S: Scalar>(a: Var<'t, S>, k: usize) -> Result<Var<'t, S>> {
    a.zero_prefix(k)
}

/// One temporal-difference step at scale `k` on `g = D(f, k-1)`: a single
/// shift and a single subtraction. Returns `(action, delayed)`.
pub fn tdiff<'t, S: Scalar>(g: Var<'t, S>, k: usize) -> Result<(Var<'t, S>, Var<'t, S>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("tdiff scale must be at least 1".into()));
    }
    let delayed = temporal_delay(g, 1)?;
    let action = action_mask(g.sub(delayed)?, k)?;
    Ok((action, delayed))
}

/// Per-scale action features `{a_k}` for `k = 1..=tau`.
pub fn action_features<'t, S: Scalar>(f: Var<'t, S>, cfg: &MstaConfig) -> Result<Vec<Var<'t, S>>> {
    cfg.validate()?;
    let mut actions = Vec::with_capacity(cfg.tau);
    let mut stream = f;
    for k in 1..=cfg.tau {
        match cfg.variant {
            MstaVariant::Chained => {
                let (a, delayed) = tdiff(stream, k)?;
                actions.push(a);
                stream = delayed;
            }
            MstaVariant::Anchored => {
                let delayed = temporal_delay(stream, 1)?;
                actions.push(action_mask(f.sub(delayed)?, k)?);
                stream = delayed;
            }
        }
    }
    Ok(actions)
}

pub struct MstaOutput<'t, S: Scalar> {
    /// `f + a_ms`
    pub out: Var<'t, S>,
    /// fused multi-scale action features `a_ms`
    pub a_ms: Var<'t, S>,
}

/// Full module on a `[T, H, W, D]` sequence. `w_fusion` is `[D, D, tau, k, k]`.
pub fn msta_forward<'t, S: Scalar>(
    f: Var<'t, S>,
    cfg: &MstaConfig,
    w_fusion: Var<'t, S>,
    b_fusion: Option<Var<'t, S>>,
) -> Result<MstaOutput<'t, S>> {
    cfg.validate()?;
    let shape = f.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            op: "msta",
            detail: format!("expected [T,H,W,D], got {shape:?}"),
        });
    }
    let (t, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let expected = cfg.fusion_shape(d);
    if w_fusion.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "msta fusion kernel",
            lhs: expected,
            rhs: w_fusion.shape(),
        });
    }
    if cfg.tau >= t {
        // Short clips at video starts hit this on every window; say it once.
        static WARNED: std::sync::Once = std::sync::Once::new();
        WARNED.call_once(|| {
            log::warn!("msta: tau {} >= sequence length {t}; deepest scales are fully masked", cfg.tau);
        });
    }
    let actions = action_features(f, cfg)?;
    let stacked: Vec<_> = actions
        .into_iter()
        .map(|a| a.reshape(vec![t, 1, h, w, d]))
        .collect::<Result<_>>()?;
    // [T, tau, H, W, D] -> [T, D, tau, H, W]
    let stack = concat(&stacked, 1)?.permute(&[0, 4, 1, 2, 3])?;
    let pad = cfg.fusion_kernel / 2;
    let bias = if cfg.bias_free_fusion { None } else { b_fusion };
    let fused = stack.conv3d(
        w_fusion,
        bias,
        ConvSpec {
            stride: &[1, 1, 1],
            padding: &[0, pad, pad],
        },
    )?;
    let a_ms = fused.reshape(vec![t, d, h, w])?.permute(&[0, 2, 3, 1])?;
    let out = f.add(a_ms)?;
    Ok(MstaOutput { out, a_ms })
}
