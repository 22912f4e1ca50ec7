//! Parameter and multiply-accumulate accounting.
//!
//! Counts follow the runtime conventions of the tape: matrix products and
//! convolutions contribute `M·K·N` MACs, attention is counted over the full
//! score matrix (masked entries included), and normalization, softmax and
//! bias additions contribute none.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub macs: u64,
}

/// MS-STA: one 3D convolution plus `τ` masked subtractions per feature
/// entry and the residual addition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MstaCost {
    pub params: usize,
    pub conv3d_macs: u64,
    pub subtractions: u64,
    pub residual_adds: u64,
    /// `conv3d_macs` over the backbone convolution MACs.
    pub mac_ratio_to_backbone: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub frames: usize,
    pub image: [usize; 3],
    pub layers: Vec<LayerCost>,
    pub msta: Option<MstaCost>,
    pub backbone_macs: u64,
    pub total_params: usize,
    pub total_macs: u64,
}

/// `(params, macs)` of a biased `k×k` convolution producing `out_h×out_w`
/// positions for one frame.
pub fn conv2d_cost(in_channels: usize, out_channels: usize, k: usize, out_h: usize, out_w: usize) -> (usize, u64) {
    let weights = out_channels * in_channels * k * k;
    (weights + out_channels, (out_h * out_w * weights) as u64)
}

/// `(params, macs)` of a biased linear layer applied to `rows` rows.
pub fn linear_cost(inputs: usize, outputs: usize, rows: usize) -> (usize, u64) {
    (inputs * outputs + outputs, (rows * inputs * outputs) as u64)
}

/// Cost of one forward pass over a full window of `seq_len` frames.
pub fn cost_report(cfg: &ModelConfig) -> Result<CostReport> {
    cost_report_for(cfg, cfg.seq_len)
}

/// Cost of one forward pass over `frames` frames (`<= seq_len`).
pub fn cost_report_for(cfg: &ModelConfig, frames: usize) -> Result<CostReport> {
    cfg.validate()?;
    let l = frames as u64;
    let mut layers = Vec::new();
    let mut push = |name: String, kind: &str, params: usize, macs: u64| {
        layers.push(LayerCost {
            name,
            kind: kind.into(),
            params,
            macs,
        })
    };
    let mut backbone_macs = 0;
    let mut msta = None;
    for (i, s) in cfg.stage_shapes()?.iter().enumerate() {
        let (params, per_frame) = conv2d_cost(s.in_channels, s.channels, cfg.conv_kernel, s.h, s.w);
        let macs = l * per_frame;
        backbone_macs += macs;
        push(format!("backbone.stage{i}"), "conv2d", params, macs);
        if cfg.msta_stage == Some(i) {
            let shape = cfg.msta.fusion_shape(s.channels);
            let weights: usize = shape.iter().product();
            let params = weights + if cfg.msta.bias_free_fusion { 0 } else { s.channels };
            let entries = l * (s.h * s.w * s.channels) as u64;
            let conv3d_macs = entries * (weights / s.channels) as u64;
            push("backbone.msta".into(), "conv3d", params, conv3d_macs);
            msta = Some(MstaCost {
                params,
                conv3d_macs,
                subtractions: cfg.msta.tau as u64 * entries,
                residual_adds: entries,
                mac_ratio_to_backbone: 0.0,
            });
        }
    }
    if let Some(m) = &mut msta {
        m.mac_ratio_to_backbone = m.conv3d_macs as f64 / backbone_macs as f64;
    }
    let (_, _, d) = cfg.feature_dims()?;
    let n = cfg.num_tokens()? as u64;
    let (d, dm, c, hid) = (d as u64, cfg.token_dim as u64, cfg.num_classes as u64, cfg.ffn_hidden() as u64);
    let linear = |i: u64, o: u64| (i * o + o) as usize;
    push("aux".into(), "linear", linear(d, c), l * d * c);
    push("tr.embed".into(), "linear", linear(d, dm), l * n * d * dm);
    if cfg.positional_encoding {
        push("tr.pos_spatial".into(), "embedding", (n * dm) as usize, 0);
        push("tr.pos_temporal".into(), "embedding", (cfg.seq_len as u64 * dm) as usize, 0);
    }
    // `rows` sequences of `len` tokens each.
    let mut block = |name: String, rows: u64, len: u64| {
        let tokens = rows * len;
        push(format!("{name}.ln1"), "layer_norm", (2 * dm) as usize, 0);
        push(format!("{name}.attn.qkvo"), "linear", 4 * linear(dm, dm), 4 * tokens * dm * dm);
        push(format!("{name}.attn.scores"), "attention", 0, 2 * rows * len * len * dm);
        push(format!("{name}.ln2"), "layer_norm", (2 * dm) as usize, 0);
        push(format!("{name}.ffn"), "linear", linear(dm, hid) + linear(hid, dm), 2 * tokens * dm * hid);
    };
    for i in 0..cfg.num_spatial_blocks {
        block(format!("tr.spatial{i}"), l, n);
    }
    for i in 0..cfg.num_temporal_blocks {
        block(format!("tr.temporal{i}"), 1, l);
    }
    push("tr.ln_f".into(), "layer_norm", (2 * dm) as usize, 0);
    push("task".into(), "linear", linear(dm, c), l * dm * c);
    let total_params = layers.iter().map(|x| x.params).sum();
    let total_macs = layers.iter().map(|x| x.macs).sum();
    Ok(CostReport {
        frames,
        image: [cfg.image_channels, cfg.image_height, cfg.image_width],
        layers,
        msta,
        backbone_macs,
        total_params,
        total_macs,
    })
}
