//! On-disk cache of frozen backbone features, one file per video.
//!
//! Files use the checkpoint record format with the cache key in the header.
//! The key hashes the config together with every backbone-stage parameter,
//! so features from a different backbone are never reused silently.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{trained_in, ModelConfig};
use crate::params::{ModelParams, Stage};
use crate::synthdata::{video_name, PhaseSequence};
use crate::Tensor;

use super::checkpoint::{decode_records, encode_records, hex};
use super::online::video_features;
use super::train::CachedVideo;

/// Cache key for `params` under `cfg`.
pub fn cache_key(params: &ModelParams, cfg: &ModelConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"starnet-feature-cache");
    h.update(cfg.hash());
    for (name, p) in params.iter().filter(|(n, _)| trained_in(n, Stage::Backbone)) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn cache_path(dir: &Path, video_id: usize) -> PathBuf {
    dir.join(format!("{}.feat", video_name(video_id)))
}

fn encode_video(key: &[u8; 32], v: &CachedVideo) -> Result<Vec<u8>> {
    let labels = Tensor::new(vec![v.labels.len()], v.labels.iter().map(|&l| l as f64).collect())?;
    let id = Tensor::scalar(v.video_id as f64);
    Ok(encode_records(
        key,
        [("features", &v.features), ("labels", &labels), ("video_id", &id)],
    ))
}

/// Reads one cached video, checking the key.
pub fn read_cached(path: &Path, key: &[u8; 32]) -> Result<CachedVideo> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (found, records) = decode_records(&bytes, path)?;
    if found != *key {
        return Err(Error::ConfigMismatch {
            expected: hex(key),
            found: hex(&found),
        });
    }
    let mut features = None;
    let mut labels = None;
    let mut video_id = None;
    for (name, t) in records {
        match name.as_str() {
            "features" => features = Some(t),
            "labels" => labels = Some(t.data().iter().map(|&l| l as usize).collect::<Vec<_>>()),
            "video_id" => video_id = Some(t.item() as usize),
            other => return Err(Error::format(path, format!("unexpected record `{other}`"))),
        }
    }
    match (features, labels, video_id) {
        (Some(features), Some(labels), Some(video_id)) if features.shape().first() == Some(&labels.len()) => {
            Ok(CachedVideo {
                video_id,
                features,
                labels,
            })
        }
        _ => Err(Error::format(path, "missing or inconsistent cache records")),
    }
}

/// Summary of one [`cache_features`] call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheReport {
    pub key: [u8; 32],
    pub written: usize,
    pub reused: usize,
}

/// Computes and stores features for every video that does not already have
/// a valid entry under the current key. Entries with another key are
/// overwritten.
pub fn cache_features(
    videos: &[PhaseSequence],
    params: &ModelParams,
    cfg: &ModelConfig,
    dir: &Path,
) -> Result<CacheReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let key = cache_key(params, cfg);
    let mut report = CacheReport {
        key,
        written: 0,
        reused: 0,
    };
    for v in videos {
        let path = cache_path(dir, v.video_id);
        if path.exists() && read_cached(&path, &key).is_ok_and(|c| c.labels == v.labels) {
            report.reused += 1;
            continue;
        }
        let cached = CachedVideo {
            video_id: v.video_id,
            features: video_features(&v.frames, params, cfg)?,
            labels: v.labels.clone(),
        };
        let tmp = path.with_extension("feat.tmp");
        fs::write(&tmp, encode_video(&key, &cached)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        report.written += 1;
    }
    log::info!(
        "feature cache {}: {} written, {} reused",
        &hex(&key)[..12],
        report.written,
        report.reused
    );
    Ok(report)
}

/// Loads cached features for `video_ids`. Fails on a missing entry or one
/// written under another key.
pub fn load_cached(dir: &Path, video_ids: &[usize], key: &[u8; 32]) -> Result<Vec<CachedVideo>> {
    video_ids.iter().map(|&id| read_cached(&cache_path(dir, id), key)).collect()
}
