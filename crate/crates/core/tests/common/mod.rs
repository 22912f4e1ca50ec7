#![allow(dead_code)]

pub mod grad_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starnet::autograd::{Tape, Var};
use starnet::tensor::Tensor;
use starnet::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at the origin.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluates `sum(f(inputs) * probe)` for a fixed random probe.
fn probe_loss<'t, F>(tape: &'t Tape<f64>, inputs: &[Var<'t, f64>], probe: &Tensor<f64>, f: &F) -> Result<Var<'t, f64>>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    let out = f(tape, inputs)?;
    let p = tape.constant(probe.reshape(out.shape())?);
    out.mul(p)?.sum()
}

/// Largest relative discrepancy between the tape gradient and a central
/// finite difference over every input entry.
pub fn gradcheck<F>(seed: u64, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    const EPS: f64 = 1e-5;
    let probe_len = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).unwrap().numel()
    };
    let mut r = rng(seed ^ 0x9e37_79b9);
    let probe = random_tensor(&mut r, &[probe_len], -1.0, 1.0);

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = probe_loss(&tape, &vars, &probe, &f).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        probe_loss(&tape, &vars, &probe, &f).unwrap().value().item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Small random model configurations for structural checks.
pub fn random_model_config(rng: &mut ChaCha8Rng) -> starnet::model::ModelConfig {
    loop {
        let cfg = random_model_config_once(rng);
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

fn random_model_config_once(rng: &mut ChaCha8Rng) -> starnet::model::ModelConfig {
    use starnet::model::{ModelConfig, StageSpec};
    let stages = rng.gen_range(1..=3);
    let backbone: Vec<StageSpec> = (0..stages)
        .map(|i| StageSpec {
            channels: rng.gen_range(2..=6),
            stride: if i == 0 { 2 } else { rng.gen_range(1..=2) },
        })
        .collect();
    let num_heads = rng.gen_range(1..=2);
    let mut cfg = ModelConfig {
        num_classes: rng.gen_range(2..=5),
        seq_len: rng.gen_range(3..=8),
        image_channels: rng.gen_range(1..=2),
        image_height: rng.gen_range(8..=12),
        image_width: rng.gen_range(8..=12),
        backbone,
        token_dim: num_heads * rng.gen_range(2..=4),
        num_heads,
        ffn_mult: rng.gen_range(1..=2),
        num_spatial_blocks: rng.gen_range(0..=1),
        num_temporal_blocks: rng.gen_range(1..=2),
        positional_encoding: rng.gen_bool(0.5),
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    cfg.msta_stage = if rng.gen_bool(0.8) { Some(rng.gen_range(0..stages)) } else { None };
    cfg.msta.tau = rng.gen_range(1..=5);
    cfg.msta.fusion_kernel = [1, 3][rng.gen_range(0..2)];
    cfg.msta.bias_free_fusion = rng.gen_bool(0.3);
    cfg
}

/// Full confusion matrix, then the textbook per-phase formulas.
pub fn metrics_oracle(videos: &[(Vec<usize>, Vec<usize>)], c: usize) -> (Vec<[f64; 4]>, [f64; 4]) {
    let mut per_video = Vec::new();
    for (pred, gt) in videos {
        let mut cm = vec![vec![0usize; c]; c];
        for (&p, &g) in pred.iter().zip(gt) {
            cm[g][p] += 1;
        }
        let mut sums = [0.0; 3];
        let mut present = 0;
        for k in 0..c {
            let tp = cm[k][k] as f64;
            let pred_k: f64 = (0..c).map(|g| cm[g][k] as f64).sum();
            let gt_k: f64 = cm[k].iter().map(|&x| x as f64).sum();
            if pred_k == 0.0 && gt_k == 0.0 {
                continue;
            }
            present += 1;
            let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * a / b };
            sums[0] += div(tp, pred_k);
            sums[1] += div(tp, gt_k);
            sums[2] += div(tp, pred_k + gt_k - tp);
        }
        let correct: usize = (0..c).map(|k| cm[k][k]).sum();
        let n = present as f64;
        per_video.push([100.0 * correct as f64 / gt.len() as f64, sums[0] / n, sums[1] / n, sums[2] / n]);
    }
    let mut mean = [0.0; 4];
    for v in &per_video {
        for i in 0..4 {
            mean[i] += v[i];
        }
    }
    for m in &mut mean {
        *m /= per_video.len() as f64;
    }
    (per_video, mean)
}
