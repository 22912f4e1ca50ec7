//! Colour-coded phase ribbons and action-feature heatmaps as PPM/PGM files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msta::FeatureMap;

/// A maximal run of one phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phase: usize,
    pub start: usize,
    pub len: usize,
}

pub fn run_lengths(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.phase == l => s.len += 1,
            _ => out.push(Segment {
                phase: l,
                start: i,
                len: 1,
            }),
        }
    }
    out
}

/// Evenly spaced hues, fully saturated.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = 6.0 * i as f64 / n.max(1) as f64;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
        })
        .collect()
}

/// RGB ribbon: prediction rows on top, ground-truth rows below.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ribbon {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub pred_segments: Vec<Segment>,
    pub gt_segments: Vec<Segment>,
}

pub fn ribbon_image(pred: &[usize], gt: &[usize], palette: &[[u8; 3]], row_height: usize) -> Result<Ribbon> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "ribbon needs equal non-empty sequences, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    if row_height == 0 {
        return Err(Error::InvalidArgument("row_height must be positive".into()));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= palette.len()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} has no palette entry ({} colours)",
            palette.len()
        )));
    }
    let width = pred.len();
    let mut rgb = Vec::with_capacity(width * 2 * row_height * 3);
    for labels in [pred, gt] {
        for _ in 0..row_height {
            for &l in labels {
                rgb.extend_from_slice(&palette[l]);
            }
        }
    }
    Ok(Ribbon {
        width,
        height: 2 * row_height,
        rgb,
        pred_segments: run_lengths(pred),
        gt_segments: run_lengths(gt),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `path` (binary PPM) and a run-length CSV next to it
/// (`row,phase,start,length`). Returns the CSV path.
pub fn ribbon_export(
    pred: &[usize],
    gt: &[usize],
    palette: &[[u8; 3]],
    row_height: usize,
    path: &Path,
) -> Result<PathBuf> {
    let r = ribbon_image(pred, gt, palette, row_height)?;
    let mut ppm = format!("P6\n{} {}\n255\n", r.width, r.height).into_bytes();
    ppm.extend_from_slice(&r.rgb);
    write_file(path, &ppm)?;
    let csv_path = path.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(&csv_path, e.to_string());
    w.write_record(["row", "phase", "start", "length"]).map_err(io)?;
    for (row, segs) in [("pred", &r.pred_segments), ("gt", &r.gt_segments)] {
        for s in segs.iter() {
            w.write_record([row.to_string(), s.phase.to_string(), s.start.to_string(), s.len.to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

/// Per-frame L2 norm over channels, min-max scaled over the whole sequence
/// to `0..=255`. A constant sequence maps to all zeros.
pub fn action_heatmaps(a_ms: &FeatureMap<f64>) -> Vec<Vec<u8>> {
    let t = a_ms.tensor();
    let d = t.shape()[3];
    let mags: Vec<f64> = t
        .data()
        .chunks(d)
        .map(|px| px.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bytes: Vec<u8> = mags
        .iter()
        .map(|&m| if span > 0.0 { (255.0 * (m - lo) / span).round() as u8 } else { 0 })
        .collect();
    let per_frame = bytes.len() / a_ms.frames().max(1);
    bytes.chunks(per_frame.max(1)).map(<[u8]>::to_vec).collect()
}

/// Writes one binary PGM per frame into `dir` as `frame0000.pgm`, ...
pub fn action_heatmap_export(a_ms: &FeatureMap<f64>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = {
        let s = a_ms.tensor().shape();
        (s[1], s[2])
    };
    let mut paths = Vec::new();
    for (i, frame) in action_heatmaps(a_ms).iter().enumerate() {
        let path = dir.join(format!("frame{i:04}.pgm"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write!(f, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(&path, e))?;
        f.write_all(frame).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
