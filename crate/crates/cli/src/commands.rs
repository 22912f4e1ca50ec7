use std::path::Path;

use serde::Serialize;
use starnet::metrics::{
    action_heatmap_export, cost_report, default_palette, phase_metrics, ribbon_export, Aggregation, PhaseMetrics,
    METRICS_SCHEMA_VERSION,
};
use starnet::model::{backbone_forward, init_params, trained_in, ModelConfig};
use starnet::msta::FeatureMap;
use starnet::params::{ModelParams, Stage};
use starnet::pipeline::ablation::{features_of, prior_ceiling};
use starnet::pipeline::checkpoint::hex;
use starnet::pipeline::{
    cache_features as build_cache, cache_key, load_cached, load_checkpoint, online_infer, save_checkpoint,
    train_backbone as stage_one, train_transformer as stage_two, EpochLog, TrainConfig,
};
use starnet::synthdata::{generate_dataset, Dataset, PhaseSequence, Split};
use starnet::Tape;

use crate::config::RunConfig;
use crate::run::RunDir;
use crate::CliError;

const RIBBON_ROW_HEIGHT: usize = 12;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Variant {
    pub msta: bool,
    pub dsr: bool,
}

fn load(cfg: &RunConfig, split: Split) -> Result<Vec<PhaseSequence>, CliError> {
    let label = format!("{split:?}").to_lowercase();
    let videos = Dataset::open(&cfg.dataset)?.load_split(split)?;
    if videos.is_empty() {
        return Err(CliError::Config(format!("{} has no {label} videos", cfg.dataset.display())));
    }
    Ok(videos)
}

fn checkpoint(cfg: &ModelConfig, path: &Path) -> Result<ModelParams, CliError> {
    Ok(load_checkpoint(path, Some(&cfg.hash()))?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let grammar = cfg.grammar()?;
    let run = RunDir::create(cfg, "gen-data")?;
    let manifest = generate_dataset(&grammar, cfg.data.num_videos, cfg.data.seed, cfg.data.train_fraction, &cfg.dataset)?;
    run.write_json("manifest.json", &manifest)?;
    println!("{} videos written to {}", manifest.videos.len(), cfg.dataset.display());
    Ok(())
}

fn write_history(run: &RunDir, history: &[EpochLog]) -> Result<(), CliError> {
    run.write_json("history.json", &history)?;
    Ok(())
}

pub fn train_backbone(cfg: &RunConfig) -> Result<(), CliError> {
    let train = load(cfg, Split::Train)?;
    let run = RunDir::create(cfg, "train-backbone")?;
    let outcome = stage_one(&train, None, &cfg.model, &cfg.train)?;
    write_history(&run, &outcome.history)?;
    let path = run.join("backbone.ckpt");
    save_checkpoint(&outcome.params, &path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn cache_features(cfg: &RunConfig, ckpt: &Path) -> Result<(), CliError> {
    let params = checkpoint(&cfg.model, ckpt)?;
    let mut videos = load(cfg, Split::Train)?;
    videos.extend(Dataset::open(&cfg.dataset)?.load_split(Split::Test)?);
    let run = RunDir::create(cfg, "cache-features")?;
    let dir = run.join("cache");
    let report = build_cache(&videos, &params, &cfg.model, &dir)?;
    run.write_json(
        "cache.json",
        &serde_json::json!({ "key": hex(&report.key), "written": report.written, "reused": report.reused }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn stage_two_from(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    backbone: ModelParams,
    train: &[starnet::pipeline::CachedVideo],
    run: &RunDir,
) -> Result<ModelParams, CliError> {
    let outcome = stage_two(train, None, backbone, cfg, tc)?;
    write_history(run, &outcome.history)?;
    save_checkpoint(&outcome.params, &run.join("model.ckpt"))?;
    Ok(outcome.params)
}

pub fn train_transformer(cfg: &RunConfig, ckpt: &Path, cache: &Path) -> Result<(), CliError> {
    let backbone = checkpoint(&cfg.model, ckpt)?;
    let ids: Vec<usize> = Dataset::open(&cfg.dataset)?.entries(Split::Train).map(|e| e.id).collect();
    let train = load_cached(cache, &ids, &cache_key(&backbone, &cfg.model))?;
    let run = RunDir::create(cfg, "train-transformer")?;
    stage_two_from(&cfg.model, &cfg.train, backbone, &train, &run)?;
    println!("{}", run.join("model.ckpt").display());
    Ok(())
}

/// Keeps what stage one trained and re-initializes the rest, so a retrained
/// transformer does not start from weights fitted under another loss.
fn stage_one_part(mut params: ModelParams, cfg: &ModelConfig) -> Result<ModelParams, CliError> {
    let fresh = init_params::<f64>(cfg)?;
    for (name, p) in fresh.iter() {
        if !trained_in(name, Stage::Backbone) {
            if let Some(slot) = params.param_mut(name) {
                slot.value = p.value.clone();
            }
        }
    }
    Ok(params)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    schema_version: u32,
    config_hash: &'a str,
    model_config_hash: String,
    variant: Variant,
    test_videos: Vec<usize>,
    /// Accuracy of always predicting the most frequent test phase, percent.
    prior_ceiling: f64,
    metrics: &'a PhaseMetrics,
}

pub fn eval(cfg: &RunConfig, ckpt: Option<&Path>, variant: Variant, heatmap_frames: usize) -> Result<(), CliError> {
    let mut model = cfg.model.clone();
    if !variant.msta {
        model.msta_stage = None;
    }
    let tc = TrainConfig {
        lambda: if variant.dsr { cfg.train.lambda } else { 0.0 },
        verify_routing: cfg.train.verify_routing && variant.dsr,
        ..cfg.train.clone()
    };
    let test = load(cfg, Split::Test)?;
    let loaded = match ckpt {
        Some(path) if variant.msta => Some(stage_one_part(checkpoint(&model, path)?, &model)?),
        _ => None,
    };
    let retrain = !variant.msta || !variant.dsr;
    let train = if retrain { Some(load(cfg, Split::Train)?) } else { None };
    let run = RunDir::create(cfg, "eval")?;

    let params = match (loaded, train) {
        (Some(p), None) => p,
        (backbone, Some(train)) => {
            let backbone = match backbone {
                Some(p) => p,
                None => stage_one(&train, None, &model, &tc)?.params,
            };
            let feats = features_of(&train, &backbone, &model)?;
            stage_two_from(&model, &tc, backbone, &feats, &run)?
        }
        (None, None) => return Err(CliError::Config("eval needs --checkpoint".into())),
    };

    let mut pairs = Vec::with_capacity(test.len());
    let palette = default_palette(model.num_classes);
    let ribbons = run.join("ribbons");
    std::fs::create_dir_all(&ribbons).map_err(|e| crate::run::io(&ribbons, e))?;
    for v in &test {
        let pred = online_infer(v, &params, &model)?.task_predictions();
        ribbon_export(&pred, &v.labels, &palette, RIBBON_ROW_HEIGHT, &ribbons.join(format!("video{:04}.ppm", v.video_id)))?;
        pairs.push((pred, v.labels.clone()));
    }
    let metrics = phase_metrics(&pairs, model.num_classes, Aggregation::PerVideo)?;
    if model.msta_stage.is_some() && heatmap_frames > 0 {
        let maps = action_maps(&test[0], &params, &model, heatmap_frames)?;
        action_heatmap_export(&maps, &run.join("heatmaps"))?;
    }
    let file = MetricsFile {
        schema_version: METRICS_SCHEMA_VERSION,
        config_hash: &run.config_hash,
        model_config_hash: hex(&model.hash()),
        variant,
        test_videos: test.iter().map(|v| v.video_id).collect(),
        prior_ceiling: 100.0 * prior_ceiling(&test, model.num_classes),
        metrics: &metrics,
    };
    let path = run.write_json("metrics.json", &file)?;
    println!(
        "AC {:.2}  PR {:.2}  RE {:.2}  JA {:.2}  ({})",
        metrics.accuracy.mean,
        metrics.precision.mean,
        metrics.recall.mean,
        metrics.jaccard.mean,
        path.display()
    );
    Ok(())
}

pub fn cost(cfg: &RunConfig) -> Result<(), CliError> {
    let report = cost_report(&cfg.model)?;
    let run = RunDir::create(cfg, "cost")?;
    run.write_json("cost.json", &report)?;
    println!("params {}  MACs {}", report.total_params, report.total_macs);
    if let Some(m) = report.msta {
        println!(
            "MS-STA: {} MACs, {} subtractions, {:.2}% of backbone MACs",
            m.conv3d_macs,
            m.subtractions,
            100.0 * m.mac_ratio_to_backbone
        );
    }
    Ok(())
}

fn pick(cfg: &RunConfig, video: Option<usize>) -> Result<Vec<PhaseSequence>, CliError> {
    let ds = Dataset::open(&cfg.dataset)?;
    match video {
        None => load(cfg, Split::Test),
        Some(id) => {
            let entry = ds
                .manifest
                .videos
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| CliError::Config(format!("no video {id} in {}", cfg.dataset.display())))?;
            Ok(vec![ds.load(entry)?])
        }
    }
}

pub fn ribbon(cfg: &RunConfig, ckpt: &Path, video: Option<usize>) -> Result<(), CliError> {
    let params = checkpoint(&cfg.model, ckpt)?;
    let videos = pick(cfg, video)?;
    let run = RunDir::create(cfg, "ribbon")?;
    let palette = default_palette(cfg.model.num_classes);
    for v in &videos {
        let pred = online_infer(v, &params, &cfg.model)?.task_predictions();
        let path = run.join(&format!("video{:04}.ppm", v.video_id));
        ribbon_export(&pred, &v.labels, &palette, RIBBON_ROW_HEIGHT, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Action features of the first `frames` frames of `video`.
fn action_maps(video: &PhaseSequence, params: &ModelParams, cfg: &ModelConfig, frames: usize) -> Result<FeatureMap, CliError> {
    let n = frames.min(video.len());
    let per = video.frames.numel() / video.len().max(1);
    let mut shape = video.frames.shape().to_vec();
    shape[0] = n;
    let clip = starnet::Tensor::new(shape, video.frames.data()[..n * per].to_vec())?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = backbone_forward(tape.constant(clip), &bound, cfg, None)?;
    let a = out
        .a_ms
        .ok_or_else(|| CliError::Config("the model has no MS-STA module".into()))?;
    Ok(FeatureMap::new((*a.value()).clone())?)
}

pub fn heatmap(cfg: &RunConfig, ckpt: &Path, video: Option<usize>, frames: usize) -> Result<(), CliError> {
    if cfg.model.msta_stage.is_none() {
        return Err(CliError::Config("heatmaps need model.msta_stage".into()));
    }
    let params = checkpoint(&cfg.model, ckpt)?;
    let v = pick(cfg, video)?.swap_remove(0);
    let run = RunDir::create(cfg, "heatmap")?;
    let maps = action_maps(&v, &params, &cfg.model, frames)?;
    let dir = run.join(&format!("video{:04}", v.video_id));
    let paths = action_heatmap_export(&maps, &dir)?;
    println!("{} heatmaps in {}", paths.len(), dir.display());
    Ok(())
}
