mod common;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starnet::synthdata::{
    assign_splits, generate_dataset, generate_split, generate_video, read_labels, read_video, render_frame,
    video_seed, write_labels, write_video, BlobState, Dataset, PhaseGrammar, Split,
};

/// Two-sample Kolmogorov-Smirnov p-value from the asymptotic distribution.
fn ks_p_value(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    let q: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    q.clamp(0.0, 1.0)
}

#[test]
fn ks_oracle_sanity() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..500).map(|_| r.gen::<f64>()).collect();
    let b: Vec<f64> = (0..500).map(|_| r.gen::<f64>()).collect();
    let shifted: Vec<f64> = b.iter().map(|v| v + 0.2).collect();
    assert!(ks_p_value(a.clone(), b) > 0.01);
    assert!(ks_p_value(a, shifted) < 1e-6);
}

#[test]
fn same_seed_same_video() {
    let g = PhaseGrammar::default();
    let a = generate_video(&g, 3, 42).unwrap();
    let b = generate_video(&g, 3, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.frames, generate_video(&g, 3, 43).unwrap().frames);
    assert_ne!(video_seed(0, 1), video_seed(0, 2));
    assert_ne!(video_seed(0, 1), video_seed(1, 1));
}

#[test]
fn labels_are_monotone_and_cover_every_phase() {
    let g = PhaseGrammar::default();
    for id in 0..20 {
        let v = generate_video(&g, id, video_seed(7, id)).unwrap();
        assert!((g.min_frames..=g.max_frames).contains(&v.len()));
        assert!(v.labels.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
        for c in 0..g.num_phases {
            assert!(v.labels.iter().filter(|&&l| l == c).count() >= g.min_phase_frames);
        }
        assert!(v.frames.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn phase_proportions_follow_weights() {
    let g = PhaseGrammar::default();
    let mut counts = vec![0usize; g.num_phases];
    for id in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(11, id));
        for (c, n) in starnet::synthdata::sample_durations(&g, &mut rng).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: usize = counts.iter().sum();
    for (c, (&n, w)) in counts.iter().zip(g.proportions()).enumerate() {
        let share = n as f64 / total as f64;
        assert!((share - w).abs() <= 0.05, "phase {c}: {share} vs {w}");
    }
}

#[test]
fn blob_centroid_matches_state() {
    let g = PhaseGrammar {
        noise_std: 0.0,
        background: 0.0,
        ..PhaseGrammar::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = BlobState::random(&g, &mut rng);
    for step in 0..200 {
        state.enter_phase(step % g.num_phases);
        let frame = render_frame(&state, &g, &mut rng);
        let (mut m, mut cy, mut cx) = (0.0, 0.0, 0.0);
        for (i, &v) in frame.iter().enumerate() {
            m += v;
            cy += v * (i / g.width) as f64;
            cx += v * (i % g.width) as f64;
        }
        let [py, px] = state.position(&g);
        assert!(((cy / m - py).powi(2) + (cx / m - px).powi(2)).sqrt() <= 1.0, "step {step}");
        state.advance(&g, &mut rng);
    }
}

#[test]
fn still_phase_repeats_frames_without_noise() {
    let g = PhaseGrammar {
        noise_std: 0.0,
        ..PhaseGrammar::default()
    };
    let v = generate_video(&g, 0, 9).unwrap();
    let per = g.height * g.width;
    let still: Vec<usize> = (0..v.len()).filter(|&i| v.labels[i] == 0).collect();
    let first = &v.frames.data()[..per];
    for &i in &still {
        assert_eq!(&v.frames.data()[i * per..(i + 1) * per], first);
    }
}

#[test]
fn full_overlap_makes_static_appearance_indistinguishable() {
    let g = PhaseGrammar::default();
    let per = g.height * g.width;
    let mut pixels = vec![Vec::new(); g.num_phases];
    let mut means = vec![Vec::new(); g.num_phases];
    let mut pick = ChaCha8Rng::seed_from_u64(77);
    for id in 0..30 {
        let v = generate_video(&g, id, video_seed(3, id)).unwrap();
        for (i, &l) in v.labels.iter().enumerate() {
            let frame = &v.frames.data()[i * per..(i + 1) * per];
            pixels[l].push(frame[pick.gen_range(0..per)]);
            means[l].push(frame.iter().sum::<f64>() / per as f64);
        }
    }
    for c in 1..g.num_phases {
        let p_pix = ks_p_value(pixels[0].clone(), pixels[c].clone());
        let p_mean = ks_p_value(means[0].clone(), means[c].clone());
        assert!(p_pix > 0.01, "phase {c}: pixel histogram p = {p_pix}");
        assert!(p_mean > 0.01, "phase {c}: frame mean p = {p_mean}");
    }
}

#[test]
fn zero_overlap_separates_appearance() {
    let g = PhaseGrammar {
        overlap: 0.0,
        ..PhaseGrammar::default()
    };
    assert!(g.amplitude(0) < g.amplitude(g.num_phases - 1));
    assert_eq!(PhaseGrammar::default().amplitude(0), PhaseGrammar::default().amplitude(7));
}

#[test]
fn invalid_grammars_are_rejected() {
    let bad = [
        PhaseGrammar {
            weights: vec![1.0; 3],
            ..PhaseGrammar::default()
        },
        PhaseGrammar {
            overlap: 1.5,
            ..PhaseGrammar::default()
        },
        PhaseGrammar {
            min_frames: 10,
            ..PhaseGrammar::default()
        },
        PhaseGrammar {
            height: 8,
            ..PhaseGrammar::default()
        },
    ];
    for g in bad {
        assert!(g.validate().is_err());
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn small_grammar() -> PhaseGrammar {
    PhaseGrammar {
        min_frames: 64,
        max_frames: 80,
        ..PhaseGrammar::default()
    }
}

#[test]
fn dataset_is_byte_identical_per_seed() {
    let g = small_grammar();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&g, 4, 21, 0.7, a.path()).unwrap();
    generate_dataset(&g, 4, 21, 0.7, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn dataset_round_trip_matches_memory() {
    let g = small_grammar();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&g, 5, 8, 0.6, dir.path()).unwrap();
    let (train, test) = generate_split(&g, 5, 8, 0.6).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(test.len(), 2);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, manifest);
    for (split, memory) in [(Split::Train, &train), (Split::Test, &test)] {
        let loaded = ds.load_split(split).unwrap();
        assert_eq!(loaded.len(), memory.len());
        for (l, m) in loaded.iter().zip(memory.iter()) {
            assert_eq!(l.video_id, m.video_id);
            assert_eq!(l.labels, m.labels);
            assert_eq!(l.frames.shape(), m.frames.shape());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(l.frames.data()), bits(m.frames.data()));
        }
    }
}

#[test]
fn file_formats_round_trip_and_reject_corruption() {
    let g = small_grammar();
    let v = generate_video(&g, 0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let vp = dir.path().join("a.stv");
    let lp = dir.path().join("a.csv");
    write_video(&vp, &v.frames).unwrap();
    write_labels(&lp, &v.labels).unwrap();
    assert_eq!(read_video(&vp).unwrap(), v.frames);
    assert_eq!(read_labels(&lp).unwrap(), v.labels);

    let bytes = fs::read(&vp).unwrap();
    assert_eq!(&bytes[..8], b"STARVID1");
    fs::write(&vp, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_video(&vp).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    fs::write(&vp, wrong).unwrap();
    assert!(read_video(&vp).is_err());
    assert!(read_video(&dir.path().join("missing.stv")).is_err());
}

#[test]
fn splits_are_seeded_and_sized() {
    let s = assign_splits(10, 4, 0.7);
    assert_eq!(s.iter().filter(|&x| *x == Split::Train).count(), 7);
    assert_eq!(s, assign_splits(10, 4, 0.7));
    assert_ne!(s, assign_splits(10, 5, 0.7));
}
