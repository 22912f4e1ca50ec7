//! One finite-difference case per differentiable tape op.

use std::rc::Rc;

use starnet::autograd::{concat, ConvSpec};

use super::*;

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: &[Case] = &[
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scalar_broadcast", scalar_broadcast),
    ("add_tiled", add_tiled),
    ("mul_tiled", mul_tiled),
    ("scale", scale),
    ("relu", relu),
    ("exp", exp),
    ("ln_floor", ln_floor),
    ("sum", sum),
    ("mean", mean),
    ("reshape", reshape),
    ("permute", permute),
    ("slice", slice),
    ("concat", concat_case),
    ("delay", delay),
    ("zero_prefix", zero_prefix),
    ("pick_rows", pick_rows),
    ("matmul", matmul),
    ("bmm", bmm),
    ("bmm_trans_b", bmm_trans_b),
    ("conv2d", conv2d),
    ("conv2d_strided", conv2d_strided),
    ("conv3d", conv3d),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("masked_softmax", masked_softmax),
    ("layer_norm", layer_norm),
    ("detach_product", detach_product),
];

fn add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].add(v[1]))
}

fn sub(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[5], -1.0, 1.0);
    let b = random_tensor(&mut r, &[5], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].sub(v[1]))
}

fn mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].mul(v[1]))
}

fn scalar_broadcast(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[1], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].mul(v[1])?.sub(v[1])?.add(v[1]))
}

fn add_tiled(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].add_tiled(v[1]))
}

fn mul_tiled(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].mul_tiled(v[1]))
}

fn scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[4], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].scale(-2.5))
}

fn relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_away_from_zero(&mut r, &[3, 5]);
    gradcheck(seed, &[a], |_, v| v[0].relu())
}

fn exp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[6], -2.0, 2.0);
    gradcheck(seed, &[a], |_, v| v[0].exp())
}

fn ln_floor(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[6], 0.05, 3.0);
    gradcheck(seed, &[a], |_, v| v[0].ln_floor(1e-12))
}

fn sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 2, 3], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].sum())
}

fn mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let axes: &[usize] = match seed % 3 {
        0 => &[1],
        1 => &[0, 2],
        _ => &[0, 1, 2],
    };
    gradcheck(seed, &[a], |_, v| v[0].mean(axes))
}

fn reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 6], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].reshape(vec![3, 4]))
}

fn permute(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].permute(&[2, 0, 1]))
}

fn slice(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[3, 5, 2], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].slice(1, 1, 3))
}

fn concat_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 2], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| concat(&[v[0], v[1], v[0]], 1))
}

fn delay(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[5, 2, 2], -1.0, 1.0);
    let k = 1 + (seed as usize % 3);
    gradcheck(seed, &[a], move |_, v| v[0].delay(k))
}

fn zero_prefix(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[5, 3], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].zero_prefix(2))
}

fn pick_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
    gradcheck(seed, &[a], |_, v| v[0].pick_rows(&[2, 0, 1, 2]))
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4, 2], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].matmul(v[1]))
}

fn bmm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 4, 2], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].bmm(v[1], false))
}

fn bmm_trans_b(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
    gradcheck(seed, &[a, b], |_, v| v[0].bmm(v[1], true))
}

fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3], -1.0, 1.0);
    gradcheck(seed, &[x, w, b], |_, v| {
        v[0].conv2d(v[1], Some(v[2]), ConvSpec { stride: &[1, 1], padding: &[1, 1] })
    })
}

fn conv2d_strided(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 5, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, &[2, 2, 3, 2], -1.0, 1.0);
    gradcheck(seed, &[x, w], |_, v| {
        v[0].conv2d(v[1], None, ConvSpec { stride: &[2, 2], padding: &[1, 0] })
    })
}

fn conv3d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 2, 3, 3, 3], -1.0, 1.0);
    let w = random_tensor(&mut r, &[2, 2, 3, 3, 1], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2], -1.0, 1.0);
    gradcheck(seed, &[x, w, b], |_, v| {
        v[0].conv3d(v[1], Some(v[2]), ConvSpec { stride: &[1, 1, 1], padding: &[0, 1, 0] })
    })
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let axis = (seed % 2) as usize;
    gradcheck(seed, &[a], move |_, v| v[0].softmax(axis))
}

fn log_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], -2.0, 2.0);
    let axis = (seed % 3) as usize;
    gradcheck(seed, &[a], move |_, v| v[0].log_softmax(axis))
}

fn masked_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 4, 4], -2.0, 2.0);
    let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
    let mask = Rc::new(mask);
    gradcheck(seed, &[a], move |_, v| v[0].masked_softmax(Rc::clone(&mask)))
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[3, 5], -2.0, 2.0);
    let g = random_tensor(&mut r, &[5], 0.5, 1.5);
    let b = random_tensor(&mut r, &[5], -0.5, 0.5);
    gradcheck(seed, &[x, g, b], |_, v| v[0].layer_norm(v[1], v[2], 1e-5))
}

/// `x * detach(x)`: only the first factor is differentiable.
fn detach_product(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[4], -1.0, 1.0);
    let tape = Tape::new();
    let x = tape.param(a.clone());
    let loss = x.mul(x.detach()).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    g.max_abs_diff(&a)
}
