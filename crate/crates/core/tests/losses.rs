mod common;

use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use starnet::autograd::{Tape, Var};
use starnet::losses::{
    cross_entropy, dsr_loss, dsr_terms, kl_div, sequence_ranges, total_loss, LossOptions, RangeBounds, SequenceRanges,
};
use starnet::tensor::Tensor;

fn probs<'t>(tape: &'t Tape<f64>, rows: usize, data: &[f64]) -> Var<'t, f64> {
    tape.constant(Tensor::new(vec![rows, data.len() / rows], data.to_vec()).unwrap())
}

fn random_probs(r: &mut impl Rng, rows: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

#[test]
fn cross_entropy_hand_values() {
    let tape = Tape::new();
    let ce = cross_entropy(probs(&tape, 1, &[0.25, 0.75]), &[1]).unwrap();
    assert!((ce.value().item() - 0.2877).abs() < 1e-4);
    let one_hot = cross_entropy(probs(&tape, 1, &[0.0, 1.0, 0.0]), &[1]).unwrap();
    assert_eq!(one_hot.value().item(), 0.0);
    let uniform = cross_entropy(probs(&tape, 2, &[0.25; 8]), &[0, 3]).unwrap();
    assert!((uniform.value().item() - 4f64.ln()).abs() < 1e-12);
    assert!(cross_entropy(probs(&tape, 1, &[0.5, 0.5]), &[2]).is_err());
}

#[test]
fn kl_hand_values() {
    let tape = Tape::new();
    let kl = kl_div(probs(&tape, 1, &[0.5, 0.5]), probs(&tape, 1, &[0.25, 0.75])).unwrap();
    assert!((kl.value().item() - 0.1438).abs() < 1e-4);
    let same = kl_div(probs(&tape, 1, &[0.3, 0.7]), probs(&tape, 1, &[0.3, 0.7])).unwrap();
    assert_eq!(same.value().item(), 0.0);
    assert!(kl_div(probs(&tape, 1, &[0.5, 0.6]), probs(&tape, 1, &[0.5, 0.5])).is_err());
}

#[test]
fn default_ranges() {
    let r = sequence_ranges(20, &RangeBounds::default()).unwrap();
    assert_eq!(r.early, (4..12).collect::<Vec<_>>());
    assert_eq!(r.late, (16..20).collect::<Vec<_>>());
    let r = sequence_ranges(5, &RangeBounds::default()).unwrap();
    assert_eq!(r.early, [1, 2]);
    assert_eq!(r.late, [4]);
    let empty = RangeBounds {
        early_lo: 0.3,
        early_hi: 0.3,
        ..RangeBounds::default()
    };
    assert!(sequence_ranges(20, &empty).unwrap().early.is_empty());
    let overlap = RangeBounds {
        early_hi: 0.9,
        ..RangeBounds::default()
    };
    assert!(sequence_ranges(20, &overlap).is_err());
}

#[test]
fn tiled_ranges_offset_each_window() {
    let r = sequence_ranges(5, &RangeBounds::default()).unwrap().tiled(3, 5);
    assert_eq!(r.early, [1, 2, 6, 7, 11, 12]);
    assert_eq!(r.late, [4, 9, 14]);
    assert_eq!(r.windows, 3);
}

#[test]
fn dsr_single_frame_example() {
    let tape = Tape::new();
    let ranges = SequenceRanges {
        early: vec![0],
        late: vec![],
        windows: 1,
    };
    let v = dsr_loss(probs(&tape, 1, &[0.5, 0.5]), probs(&tape, 1, &[0.25, 0.75]), &ranges).unwrap();
    assert!((v.value().item() - 0.1438).abs() < 1e-4);
    let same = dsr_loss(probs(&tape, 1, &[0.4, 0.6]), probs(&tape, 1, &[0.4, 0.6]), &ranges).unwrap();
    assert_eq!(same.value().item(), 0.0);
}

#[test]
fn total_loss_composes_hand_examples() {
    // Frame 0 is early, frame 1 is late.
    let tape = Tape::new();
    let ranges = SequenceRanges {
        early: vec![0],
        late: vec![1],
        windows: 1,
    };
    let task = probs(&tape, 2, &[0.5, 0.5, 0.25, 0.75]);
    let aux = probs(&tape, 2, &[0.25, 0.75, 0.25, 0.75]);
    let opts = LossOptions::default();
    let out = total_loss(task, aux, &[1, 1], &ranges, 1.0, &opts).unwrap();
    let ce_task = (0.5f64.ln() + 0.75f64.ln()) / -2.0;
    let ce_aux = 0.2877;
    let expected = ce_task + ce_aux + 0.1438;
    assert!((out.total.value().item() - expected).abs() < 1e-4);

    let ce_only = total_loss(task, aux, &[1, 1], &ranges, 0.0, &opts).unwrap();
    let ce = ce_only.ce_task.value().item() + ce_only.ce_aux.unwrap().value().item();
    assert_eq!(ce_only.total.value().item(), ce);
    assert!(total_loss(task, aux, &[1, 1], &ranges, -1.0, &opts).is_err());

    let one_hot = probs(&tape, 2, &[0.0, 1.0, 1.0, 0.0]);
    let perfect = total_loss(one_hot, one_hot, &[1, 0], &ranges, 1.0, &opts).unwrap();
    assert_eq!(perfect.total.value().item(), 0.0);
}

/// Two linear heads over shared constant inputs.
struct ToyHeads {
    x: Tensor<f64>,
    w_task: Tensor<f64>,
    w_aux: Tensor<f64>,
}

impl ToyHeads {
    fn new(seed: u64, t: usize) -> Self {
        let mut r = rng(seed);
        Self {
            x: random_tensor(&mut r, &[t, 3], -1.0, 1.0),
            w_task: random_tensor(&mut r, &[3, 4], -1.0, 1.0),
            w_aux: random_tensor(&mut r, &[3, 4], -1.0, 1.0),
        }
    }

    /// Gradients of `w_task` and `w_aux` under DSR restricted to `ranges`.
    fn grads(&self, ranges: &SequenceRanges) -> (Tensor<f64>, Tensor<f64>) {
        let tape = Tape::new();
        let x = tape.constant(self.x.clone());
        let wt = tape.param(self.w_task.clone());
        let wa = tape.param(self.w_aux.clone());
        let pt = x.matmul(wt).unwrap().softmax(1).unwrap();
        let pa = x.matmul(wa).unwrap().softmax(1).unwrap();
        tape.backward(dsr_loss(pt, pa, ranges).unwrap()).unwrap();
        let zeros = Tensor::zeros(vec![3, 4]);
        (tape.grad(wt).unwrap_or(zeros.clone()), tape.grad(wa).unwrap_or(zeros))
    }
}

#[test]
fn dsr_gradient_routing() {
    let full = sequence_ranges(20, &RangeBounds::default()).unwrap();
    for seed in 0..5 {
        let toy = ToyHeads::new(seed, 20);
        let early_only = SequenceRanges {
            late: vec![],
            ..full.clone()
        };
        let late_only = SequenceRanges {
            early: vec![],
            ..full.clone()
        };
        let (gt_e, ga_e) = toy.grads(&early_only);
        assert!(ga_e.data().iter().all(|&g| g == 0.0));
        assert!(gt_e.data().iter().any(|&g| g != 0.0));
        let (gt_l, ga_l) = toy.grads(&late_only);
        assert!(gt_l.data().iter().all(|&g| g == 0.0));
        assert!(ga_l.data().iter().any(|&g| g != 0.0));
        // The full loss splits exactly into the two routed parts.
        let (gt, ga) = toy.grads(&full);
        assert_eq!(gt.data(), gt_e.data());
        assert_eq!(ga.data(), ga_l.data());
    }
}

#[test]
fn early_term_step_reduces_divergence() {
    let toy = ToyHeads::new(9, 5);
    let ranges = sequence_ranges(5, &RangeBounds::default()).unwrap();
    let ranges = SequenceRanges { late: vec![], ..ranges };
    let eval = |w_task: &Tensor<f64>| {
        let tape = Tape::new();
        let x = tape.constant(toy.x.clone());
        let pt = x.matmul(tape.constant(w_task.clone())).unwrap().softmax(1).unwrap();
        let pa = x.matmul(tape.constant(toy.w_aux.clone())).unwrap().softmax(1).unwrap();
        dsr_loss(pt, pa, &ranges).unwrap().value().item()
    };
    let (g, _) = toy.grads(&ranges);
    let stepped: Vec<f64> = toy.w_task.data().iter().zip(g.data()).map(|(w, g)| w - 1e-2 * g).collect();
    let stepped = Tensor::new(vec![3, 4], stepped).unwrap();
    assert!(eval(&stepped) < eval(&toy.w_task));
}

#[test]
fn dsr_average_divides_by_range_size() {
    let mut r = rng(4);
    let tape = Tape::new();
    let ranges = sequence_ranges(20, &RangeBounds::default()).unwrap();
    let pt = probs(&tape, 20, &random_probs(&mut r, 20, 3));
    let pa = probs(&tape, 20, &random_probs(&mut r, 20, 3));
    let summed = dsr_terms(pt, pa, &ranges, false).unwrap();
    let averaged = dsr_terms(pt, pa, &ranges, true).unwrap();
    let e = summed.early.unwrap().value().item();
    let l = summed.late.unwrap().value().item();
    assert!((averaged.early.unwrap().value().item() - e / 8.0).abs() < 1e-12);
    assert!((averaged.late.unwrap().value().item() - l / 4.0).abs() < 1e-12);
}

#[test]
fn softmax_shift_keeps_argmax() {
    let mut r = rng(2);
    let logits = random_tensor(&mut r, &[6, 5], -3.0, 3.0);
    let shifted = logits.map(|v| v + 7.5);
    let tape = Tape::new();
    let a = tape.constant(logits).softmax(1).unwrap().value().argmax_rows();
    let b = tape.constant(shifted).softmax(1).unwrap().value().argmax_rows();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), c in 2usize..8) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let p = random_probs(&mut r, 1, c);
        let q = random_probs(&mut r, 1, c);
        let kl = kl_div(probs(&tape, 1, &p), probs(&tape, 1, &q)).unwrap().value().item();
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn total_loss_is_finite_and_deterministic(seed in any::<u64>(), t in 1usize..25) {
        let mut r = rng(seed);
        let ranges = sequence_ranges(t, &RangeBounds::default()).unwrap();
        let pt_data = random_probs(&mut r, t, 4);
        let pa_data = random_probs(&mut r, t, 4);
        let y: Vec<usize> = (0..t).map(|_| r.gen_range(0..4)).collect();
        let run = || {
            let tape = Tape::new();
            let out = total_loss(probs(&tape, t, &pt_data), probs(&tape, t, &pa_data), &y, &ranges, 1.0, &LossOptions::default());
            out.unwrap().total.value().item()
        };
        let v = run();
        prop_assert!(v.is_finite());
        prop_assert_eq!(v.to_bits(), run().to_bits());
    }
}
