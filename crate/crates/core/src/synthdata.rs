//! Synthetic phase-labelled videos in which phases differ by how a blob
//! moves, not by how any single frame looks.
//!
//! Each video is a fixed-order run through every phase. A Gaussian blob moves
//! on a reflecting square; its unfolded coordinate starts uniform over a full
//! reflection period, so the folded position of every frame is uniformly
//! distributed whatever the phase. With `overlap = 1` a single frame carries
//! no phase information at all.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::Tensor;

const VIDEO_MAGIC: &[u8; 8] = b"STARVID1";
pub const MANIFEST_VERSION: u32 = 1;

/// How the blob moves during one phase, in pixels per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSignature {
    /// Constant drift `(dy, dx)`.
    pub velocity: [f64; 2],
    /// Sinusoidal displacement amplitude per axis.
    pub osc_amplitude: [f64; 2],
    pub osc_period: f64,
    /// Phase lead of the x oscillation over y, in radians.
    pub osc_phase: f64,
    /// Std of an isotropic random step added every frame.
    pub jitter: f64,
}

impl Default for MotionSignature {
    fn default() -> Self {
        Self {
            velocity: [0.0; 2],
            osc_amplitude: [0.0; 2],
            osc_period: 1.0,
            osc_phase: 0.0,
            jitter: 0.0,
        }
    }
}

impl MotionSignature {
    fn oscillation(&self, step: usize) -> [f64; 2] {
        let w = std::f64::consts::TAU * step as f64 / self.osc_period;
        [
            self.osc_amplitude[0] * w.sin(),
            self.osc_amplitude[1] * (w + self.osc_phase).sin(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseGrammar {
    pub num_phases: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_phase_frames: usize,
    /// Relative share of each phase in a video.
    pub weights: Vec<f64>,
    /// Multiplicative spread of each phase share, `U[1-j, 1+j]`.
    pub duration_jitter: f64,
    pub motions: Vec<MotionSignature>,
    /// 1.0 makes frames of different phases identically distributed; lower
    /// values give each phase its own blob brightness.
    pub overlap: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub background: f64,
    pub noise_std: f64,
}

impl Default for PhaseGrammar {
    fn default() -> Self {
        let m = |velocity: [f64; 2]| MotionSignature {
            velocity,
            ..Default::default()
        };
        Self {
            num_phases: 8,
            height: 32,
            width: 32,
            channels: 1,
            min_frames: 120,
            max_frames: 400,
            min_phase_frames: 8,
            weights: vec![0.06, 0.18, 0.10, 0.22, 0.12, 0.14, 0.10, 0.08],
            duration_jitter: 0.3,
            motions: vec![
                m([0.0, 0.0]),
                m([0.0, 0.7]),
                m([0.0, 2.0]),
                m([0.7, 0.0]),
                m([2.0, 0.0]),
                m([1.2, 1.2]),
                MotionSignature {
                    jitter: 1.2,
                    ..Default::default()
                },
                MotionSignature {
                    osc_amplitude: [3.0, 3.0],
                    osc_period: 10.0,
                    osc_phase: std::f64::consts::FRAC_PI_2,
                    ..Default::default()
                },
            ],
            overlap: 1.0,
            blob_sigma: 2.0,
            blob_amplitude: 0.6,
            background: 0.2,
            noise_std: 0.05,
        }
    }
}

impl PhaseGrammar {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_phases < 2 {
            return bad("grammar needs at least two phases".into());
        }
        if self.weights.len() != self.num_phases || self.motions.len() != self.num_phases {
            return bad(format!(
                "grammar has {} phases but {} weights and {} motions",
                self.num_phases,
                self.weights.len(),
                self.motions.len()
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return bad("phase weights must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 0 < min_frames <= max_frames".into());
        }
        if self.min_phase_frames * self.num_phases > self.min_frames {
            return bad("min_frames cannot hold every phase at min_phase_frames".into());
        }
        if !(0.0..1.0).contains(&self.duration_jitter) {
            return bad("duration_jitter must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]".into());
        }
        if self.motions.iter().any(|m| !(m.osc_period > 0.0) || m.jitter < 0.0) {
            return bad("motions need a positive period and non-negative jitter".into());
        }
        if self.channels == 0 || !(self.blob_sigma > 0.0) || self.noise_std < 0.0 {
            return bad("invalid image settings".into());
        }
        let lo = self.margin();
        if self.height as f64 - 1.0 - 2.0 * lo <= 1.0 || self.width as f64 - 1.0 - 2.0 * lo <= 1.0 {
            return bad("frame too small for the blob".into());
        }
        Ok(())
    }

    /// Blob centers stay this far from the frame edges.
    pub fn margin(&self) -> f64 {
        2.5 * self.blob_sigma
    }

    /// Admissible center interval `[lo, hi]` on an axis of `extent` pixels.
    fn bounds(&self, extent: usize) -> (f64, f64) {
        (self.margin(), extent as f64 - 1.0 - self.margin())
    }

    /// Blob peak brightness in a given phase.
    pub fn amplitude(&self, phase: usize) -> f64 {
        let spread = phase as f64 / (self.num_phases - 1) as f64 - 0.5;
        self.blob_amplitude * (1.0 + (1.0 - self.overlap) * spread)
    }

    /// Normalized phase shares.
    pub fn proportions(&self) -> Vec<f64> {
        let s: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / s).collect()
    }
}

/// Maps an unfolded coordinate onto `[lo, hi]` by mirror reflection.
pub fn reflect(u: f64, lo: f64, hi: f64) -> f64 {
    let r = hi - lo;
    let v = u.rem_euclid(2.0 * r);
    if v <= r {
        lo + v
    } else {
        lo + 2.0 * r - v
    }
}

/// Blob state between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobState {
    /// Unfolded coordinate `(y, x)` before reflection, relative to `lo`.
    pub unfolded: [f64; 2],
    pub phase: usize,
    /// Frames elapsed within the current phase.
    pub step: usize,
}

impl BlobState {
    /// Start uniformly over one reflection period on each axis.
    pub fn random(grammar: &PhaseGrammar, rng: &mut impl Rng) -> Self {
        let (ylo, yhi) = grammar.bounds(grammar.height);
        let (xlo, xhi) = grammar.bounds(grammar.width);
        Self {
            unfolded: [
                rng.gen_range(0.0..2.0 * (yhi - ylo)),
                rng.gen_range(0.0..2.0 * (xhi - xlo)),
            ],
            phase: 0,
            step: 0,
        }
    }

    /// Folded blob center `(y, x)` in pixel coordinates.
    pub fn position(&self, grammar: &PhaseGrammar) -> [f64; 2] {
        let (ylo, yhi) = grammar.bounds(grammar.height);
        let (xlo, xhi) = grammar.bounds(grammar.width);
        [
            reflect(self.unfolded[0], 0.0, yhi - ylo) + ylo,
            reflect(self.unfolded[1], 0.0, xhi - xlo) + xlo,
        ]
    }

    /// One frame of the current phase's motion.
    pub fn advance(&mut self, grammar: &PhaseGrammar, rng: &mut impl Rng) {
        let m = &grammar.motions[self.phase];
        let o0 = m.oscillation(self.step);
        let o1 = m.oscillation(self.step + 1);
        let (jy, jx) = if m.jitter > 0.0 {
            let n = Normal::new(0.0, m.jitter).expect("valid std");
            (n.sample(rng), n.sample(rng))
        } else {
            (0.0, 0.0)
        };
        self.unfolded[0] += m.velocity[0] + o1[0] - o0[0] + jy;
        self.unfolded[1] += m.velocity[1] + o1[1] - o0[1] + jx;
        self.step += 1;
    }

    pub fn enter_phase(&mut self, phase: usize) {
        self.phase = phase;
        self.step = 0;
    }
}

/// Background plus noise plus a Gaussian blob at the state's position,
/// clamped to `[0, 1]`; `[C, H, W]` values in channel-major order.
pub fn render_frame(state: &BlobState, grammar: &PhaseGrammar, rng: &mut impl Rng) -> Vec<f64> {
    let [py, px] = state.position(grammar);
    let amp = grammar.amplitude(state.phase);
    let inv = 1.0 / (2.0 * grammar.blob_sigma * grammar.blob_sigma);
    let noise = Normal::new(0.0, grammar.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let (h, w) = (grammar.height, grammar.width);
    let mut out = Vec::with_capacity(grammar.channels * h * w);
    for _ in 0..grammar.channels {
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                let n = if grammar.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                let v = grammar.background + amp * (-d2 * inv).exp() + n;
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// One labelled clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSequence {
    /// `[N, C, H, W]` in `[0, 1]`
    pub frames: Tensor,
    pub labels: Vec<usize>,
    pub video_id: usize,
    pub seed: u64,
    /// Blob center of each frame, `(y, x)`.
    pub positions: Vec<[f64; 2]>,
}

impl PhaseSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-video seed derived from the master seed and the video id.
pub fn video_seed(master: u64, video_id: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"starnet-video");
    h.update(master.to_le_bytes());
    h.update((video_id as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Frame counts per phase for one video.
pub fn sample_durations(grammar: &PhaseGrammar, rng: &mut impl Rng) -> Vec<usize> {
    let n = rng.gen_range(grammar.min_frames..=grammar.max_frames);
    let j = grammar.duration_jitter;
    let raw: Vec<f64> = grammar
        .weights
        .iter()
        .map(|w| w * if j > 0.0 { rng.gen_range(1.0 - j..1.0 + j) } else { 1.0 })
        .collect();
    let sum: f64 = raw.iter().sum();
    let mut lens: Vec<usize> = raw
        .iter()
        .map(|r| ((n as f64 * r / sum).floor() as usize).max(grammar.min_phase_frames))
        .collect();
    // settle rounding against the largest phase, never below the minimum
    let largest = (0..lens.len()).max_by_key(|&i| lens[i]).expect("phases");
    let total: usize = lens.iter().sum();
    if total < n {
        lens[largest] += n - total;
    } else {
        let excess = total - n;
        lens[largest] -= excess.min(lens[largest] - grammar.min_phase_frames);
    }
    lens
}

/// Renders one video from its own seed.
pub fn generate_video(grammar: &PhaseGrammar, video_id: usize, seed: u64) -> Result<PhaseSequence> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = sample_durations(grammar, &mut rng);
    let mut state = BlobState::random(grammar, &mut rng);
    let n: usize = lens.iter().sum();
    let (c, h, w) = (grammar.channels, grammar.height, grammar.width);
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for (phase, &len) in lens.iter().enumerate() {
        state.enter_phase(phase);
        for _ in 0..len {
            positions.push(state.position(grammar));
            data.extend(render_frame(&state, grammar, &mut rng));
            labels.push(phase);
            state.advance(grammar, &mut rng);
        }
    }
    Ok(PhaseSequence {
        frames: Tensor::new(vec![n, c, h, w], data)?,
        labels,
        video_id,
        seed,
        positions,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: usize,
    pub name: String,
    pub video: String,
    pub labels: String,
    pub frames: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub train_fraction: f64,
    pub grammar: PhaseGrammar,
    pub videos: Vec<VideoEntry>,
}

/// Split of each video id: a seeded shuffle, the first
/// `round(n · train_fraction)` ids of which go to training.
pub fn assign_splits(num_videos: usize, seed: u64, train_fraction: f64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..num_videos).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(video_seed(seed, usize::MAX)));
    let n_train = (num_videos as f64 * train_fraction).round() as usize;
    let mut splits = vec![Split::Test; num_videos];
    for &id in &order[..n_train.min(num_videos)] {
        splits[id] = Split::Train;
    }
    splits
}

/// The same videos and split as [`generate_dataset`], kept in memory.
pub fn generate_split(
    grammar: &PhaseGrammar,
    num_videos: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<(Vec<PhaseSequence>, Vec<PhaseSequence>)> {
    let splits = assign_splits(num_videos, seed, train_fraction);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (id, split) in splits.into_iter().enumerate() {
        let v = generate_video(grammar, id, video_seed(seed, id))?;
        match split {
            Split::Train => train.push(v),
            Split::Test => test.push(v),
        }
    }
    Ok((train, test))
}

pub fn video_name(id: usize) -> String {
    format!("video{id:03}")
}

/// Writes `num_videos` videos, their label files and `manifest.json` into
/// `out_dir`. Videos are split by id into train and test.
pub fn generate_dataset(
    grammar: &PhaseGrammar,
    num_videos: usize,
    seed: u64,
    train_fraction: f64,
    out_dir: &Path,
) -> Result<Manifest> {
    grammar.validate()?;
    if num_videos == 0 {
        return Err(Error::Config("num_videos must be positive".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = assign_splits(num_videos, seed, train_fraction);
    let mut videos = Vec::with_capacity(num_videos);
    for id in 0..num_videos {
        let vseed = video_seed(seed, id);
        let seq = generate_video(grammar, id, vseed)?;
        let name = video_name(id);
        let video = format!("{name}.stv");
        let labels = format!("{name}.csv");
        write_video(&out_dir.join(&video), &seq.frames)?;
        write_labels(&out_dir.join(&labels), &seq.labels)?;
        let split = splits[id].clone();
        log::debug!("generated {name}: {} frames ({split:?})", seq.len());
        videos.push(VideoEntry {
            id,
            name,
            video,
            labels,
            frames: seq.len(),
            seed: vseed,
            split,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        train_fraction,
        grammar: grammar.clone(),
        videos,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// `STARVID1`, then `N, H, W, C` as u32 LE, then `[N, C, H, W]` f64 LE.
pub fn write_video(path: &Path, frames: &Tensor) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "write_video",
            detail: format!("expected [N,C,H,W], got {s:?}"),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(VIDEO_MAGIC)?;
    for d in [s[0], s[2], s[3], s[1]] {
        put(&(d as u32).to_le_bytes())?;
    }
    for v in frames.data() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != VIDEO_MAGIC {
        return Err(Error::format(path, "missing STARVID1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let count = n * c * h * w;
    if bytes.len() != 24 + 8 * count {
        return Err(Error::format(
            path,
            format!("expected {count} pixels, found {} payload bytes", bytes.len() - 24),
        ));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(vec![n, c, h, w], data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["frame_index", "phase"]).map_err(|e| csv_error(path, e))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut labels = Vec::new();
    for (i, rec) in r.deserialize::<(usize, usize)>().enumerate() {
        let (idx, phase) = rec.map_err(|e| csv_error(path, e))?;
        if idx != i {
            return Err(Error::format(path, format!("row {i} has frame_index {idx}")));
        }
        labels.push(phase);
    }
    Ok(labels)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// A generated dataset opened from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(&path, format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.manifest.videos.iter().filter(move |v| v.split == split)
    }

    pub fn load(&self, entry: &VideoEntry) -> Result<PhaseSequence> {
        let frames = read_video(&self.root.join(&entry.video))?;
        let labels = read_labels(&self.root.join(&entry.labels))?;
        if labels.len() != frames.shape()[0] {
            return Err(Error::format(
                self.root.join(&entry.labels),
                format!("{} labels for {} frames", labels.len(), frames.shape()[0]),
            ));
        }
        Ok(PhaseSequence {
            frames,
            labels,
            video_id: entry.id,
            seed: entry.seed,
            positions: Vec::new(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PhaseSequence>> {
        self.entries(split).map(|e| self.load(e)).collect()
    }
}
