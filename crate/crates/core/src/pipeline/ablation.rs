//! The three-way ablation: full model, without DSR, and without both MS-STA
//! and DSR, plus the frame-wise baseline read off the plain backbone's
//! auxiliary head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelConfig, StageSpec};
use crate::params::ModelParams;
use crate::synthdata::PhaseSequence;

use super::online::{frame_accuracy, infer_from_features, video_features};
use super::train::{train_backbone, train_transformer, CachedVideo, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    /// Online task-head accuracy of the full model.
    pub full: f64,
    pub no_dsr: f64,
    pub no_msta_no_dsr: f64,
    /// Auxiliary-head accuracy of the backbone trained without MS-STA.
    pub frame_baseline: f64,
    /// Accuracy of always predicting the most frequent test label.
    pub prior_ceiling: f64,
    pub seconds: f64,
}

impl AblationResult {
    pub fn ordering_holds(&self) -> bool {
        self.full > self.no_dsr && self.no_dsr > self.no_msta_no_dsr
    }
}

/// Desk-scale model and schedule used for the ablation: a narrow backbone
/// with MS-STA after the first stage, and sampled-window epochs with
/// momentum so a run fits in a few minutes on one core.
pub fn ablation_setup(seed: u64) -> (ModelConfig, TrainConfig) {
    let cfg = ModelConfig {
        backbone: vec![
            StageSpec { channels: 4, stride: 2 },
            StageSpec { channels: 16, stride: 2 },
            StageSpec { channels: 32, stride: 2 },
        ],
        token_dim: 32,
        seed,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        backbone_epochs: 8,
        transformer_epochs: 8,
        windows_per_epoch: 1600,
        lr: 1e-2,
        momentum: 0.9,
        seed,
        ..TrainConfig::default()
    };
    (cfg, tc)
}

/// Most frequent label's share of all frames.
pub fn prior_ceiling(videos: &[PhaseSequence], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0;
    for v in videos {
        for &l in &v.labels {
            counts[l] += 1;
        }
        total += v.len();
    }
    counts.into_iter().max().unwrap_or(0) as f64 / total.max(1) as f64
}

pub fn features_of(videos: &[PhaseSequence], params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<CachedVideo>> {
    videos
        .iter()
        .map(|v| {
            Ok(CachedVideo {
                video_id: v.video_id,
                features: video_features(&v.frames, params, cfg)?,
                labels: v.labels.clone(),
            })
        })
        .collect()
}

pub fn online_accuracy(test: &[CachedVideo], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for v in test {
        let (p_task, _) = infer_from_features(&v.features, params, cfg)?;
        hit += p_task.argmax_rows().iter().zip(&v.labels).filter(|(a, b)| a == b).count();
        total += v.labels.len();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Trains both backbones and the three transformer variants for one seed.
/// `cfg` describes the full model; the MS-STA-free variants drop
/// `msta_stage`.
pub fn run_ablation(
    train: &[PhaseSequence],
    test: &[PhaseSequence],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<AblationResult> {
    let clock = Instant::now();
    let mut cfg = cfg.clone();
    cfg.seed = tc.seed;
    let plain_cfg = ModelConfig {
        msta_stage: None,
        ..cfg.clone()
    };
    let no_dsr = TrainConfig {
        lambda: 0.0,
        verify_routing: false,
        ..tc.clone()
    };

    let msta_backbone = train_backbone(train, None, &cfg, tc)?.params;
    let train_feat = features_of(train, &msta_backbone, &cfg)?;
    let test_feat = features_of(test, &msta_backbone, &cfg)?;
    let full = train_transformer(&train_feat, None, msta_backbone.clone(), &cfg, tc)?.params;
    let full_acc = online_accuracy(&test_feat, &full, &cfg)?;
    log::info!("seed {}: full {full_acc:.4}", tc.seed);
    let nd = train_transformer(&train_feat, None, msta_backbone, &cfg, &no_dsr)?.params;
    let nd_acc = online_accuracy(&test_feat, &nd, &cfg)?;
    log::info!("seed {}: w/o DSR {nd_acc:.4}", tc.seed);

    let plain_backbone = train_backbone(train, None, &plain_cfg, tc)?.params;
    let frame_baseline = frame_accuracy(test, &plain_backbone, &plain_cfg)?;
    let train_feat = features_of(train, &plain_backbone, &plain_cfg)?;
    let test_feat = features_of(test, &plain_backbone, &plain_cfg)?;
    let plain = train_transformer(&train_feat, None, plain_backbone, &plain_cfg, &no_dsr)?.params;
    let plain_acc = online_accuracy(&test_feat, &plain, &plain_cfg)?;
    log::info!("seed {}: w/o MS-STA, DSR {plain_acc:.4}, frame-wise {frame_baseline:.4}", tc.seed);

    Ok(AblationResult {
        seed: tc.seed,
        full: full_acc,
        no_dsr: nd_acc,
        no_msta_no_dsr: plain_acc,
        frame_baseline,
        prior_ceiling: prior_ceiling(test, cfg.num_classes),
        seconds: clock.elapsed().as_secs_f64(),
    })
}
