//! Evaluation: accuracy, phase-wise precision/recall/Jaccard, the paired
//! t-test, image exports and the parameter/MAC accounting.

mod cost;
mod export;

pub use cost::{conv2d_cost, cost_report, cost_report_for, linear_cost, CostReport, LayerCost, MstaCost};
pub use export::{
    action_heatmap_export, action_heatmaps, default_palette, ribbon_export, ribbon_image, run_lengths, Ribbon, Segment,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Version of the metrics JSON layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

fn check_pair(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty label sequence".into()));
    }
    Ok(())
}

/// Percentage of frames whose prediction matches the ground truth.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Per-phase counts for one video (or several, when merged).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub phases: Vec<PhaseCounts>,
    pub frames: usize,
    pub correct: usize,
}

impl ConfusionSummary {
    pub fn from_labels(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Self> {
        check_pair(pred, gt)?;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} phases"
            )));
        }
        let mut phases = vec![PhaseCounts::default(); num_classes];
        let mut correct = 0;
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                phases[p].tp += 1;
                correct += 1;
            } else {
                phases[p].fp += 1;
                phases[g].fn_ += 1;
            }
        }
        Ok(Self {
            phases,
            frames: gt.len(),
            correct,
        })
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.phases.iter_mut().zip(&other.phases) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.frames += other.frames;
        self.correct += other.correct;
    }

    /// Scores of each phase in percent; `None` for phases absent from both
    /// prediction and ground truth.
    pub fn scores(&self) -> Vec<Option<PhaseScore>> {
        self.phases
            .iter()
            .enumerate()
            .map(|(c, k)| {
                if k.tp + k.fp + k.fn_ == 0 {
                    return None;
                }
                let ratio = |num: usize, den: usize, what: &str| {
                    if den == 0 {
                        log::warn!("phase {c}: {what} is 0/0, counted as 0");
                        0.0
                    } else {
                        100.0 * num as f64 / den as f64
                    }
                };
                Some(PhaseScore {
                    precision: ratio(k.tp, k.tp + k.fp, "precision"),
                    recall: ratio(k.tp, k.tp + k.fn_, "recall"),
                    jaccard: 100.0 * k.tp as f64 / (k.tp + k.fp + k.fn_) as f64,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseScore {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub per_phase: Vec<Option<PhaseScore>>,
}

impl VideoMetrics {
    pub fn from_summary(s: &ConfusionSummary) -> Self {
        let per_phase = s.scores();
        let present: Vec<&PhaseScore> = per_phase.iter().flatten().collect();
        let mean = |f: fn(&PhaseScore) -> f64| present.iter().map(|p| f(p)).sum::<f64>() / present.len().max(1) as f64;
        Self {
            accuracy: 100.0 * s.correct as f64 / s.frames.max(1) as f64,
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            jaccard: mean(|p| p.jaccard),
            per_phase,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Phase means per video, then mean ± std across videos.
    #[default]
    PerVideo,
    /// Counts pooled over all videos, then mean ± std across phases.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub aggregation: Aggregation,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
    pub per_video: Vec<VideoMetrics>,
}

/// AC, PR, RE and JA in percent over `(prediction, ground truth)` pairs, one
/// per video.
pub fn phase_metrics(videos: &[(Vec<usize>, Vec<usize>)], num_classes: usize, aggregation: Aggregation) -> Result<PhaseMetrics> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("no videos to evaluate".into()));
    }
    let summaries = videos
        .iter()
        .map(|(p, g)| ConfusionSummary::from_labels(p, g, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let per_video: Vec<VideoMetrics> = summaries.iter().map(VideoMetrics::from_summary).collect();
    let accuracy = MeanStd::of(&per_video.iter().map(|v| v.accuracy).collect::<Vec<_>>());
    let (precision, recall, jaccard) = match aggregation {
        Aggregation::PerVideo => {
            let col = |f: fn(&VideoMetrics) -> f64| MeanStd::of(&per_video.iter().map(f).collect::<Vec<_>>());
            (col(|v| v.precision), col(|v| v.recall), col(|v| v.jaccard))
        }
        Aggregation::Pooled => {
            let mut pooled = summaries[0].clone();
            for s in &summaries[1..] {
                pooled.merge(s);
            }
            let scores: Vec<PhaseScore> = pooled.scores().into_iter().flatten().collect();
            let col = |f: fn(&PhaseScore) -> f64| MeanStd::of(&scores.iter().map(f).collect::<Vec<_>>());
            (col(|p| p.precision), col(|p| p.recall), col(|p| p.jaccard))
        }
    };
    Ok(PhaseMetrics {
        aggregation,
        accuracy,
        precision,
        recall,
        jaccard,
        per_video,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// `mean(d) / (sd(d) / sqrt(V))`; infinite when every difference is
    /// the same non-zero value.
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub dof: usize,
    /// All differences were exactly zero; `t = 0`, `p = 1`.
    pub degenerate: bool,
}

/// Two-sided paired t-test on per-video scores `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs two equal samples of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let v = a.len();
    let dof = v - 1;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            dof,
            degenerate: true,
        });
    }
    let mean = d.iter().sum::<f64>() / v as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dof as f64;
    let se = (var / v as f64).sqrt();
    let (t, p) = if se == 0.0 {
        (mean.signum() * f64::INFINITY, 0.0)
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(TTest {
        t,
        p,
        dof,
        degenerate: false,
    })
}
