//! Elementwise arithmetic. Broadcasting is limited to a scalar right operand
//! and to "tiled" operands whose shape equals the trailing dims of the left.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::{GradSink, Op, Var};

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
        }
    }

    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
        }
    }
}

fn tail_matches(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'t, S: Scalar> Var<'t, S> {
    fn binary(self, other: Var<'t, S>, kind: Bin) -> Result<Var<'t, S>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let data: Vec<S> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else if b.numel() == 1 {
            let y = b.item();
            a.data().iter().map(|&x| kind.apply(x, y)).collect()
        } else {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let n = data.len() as u64;
        self.tape.count(|c| match kind {
            Bin::Add => c.adds += n,
            Bin::Sub => c.subs += n,
            Bin::Mul => c.muls += n,
        });
        let op = match kind {
            Bin::Add => Op::Add(self.id, other.id),
            Bin::Sub => Op::Sub(self.id, other.id),
            Bin::Mul => Op::Mul(self.id, other.id),
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(kind.name(), Tensor::from_parts(a.shape().to_vec(), data), op, rg)
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Mul)
    }

    /// `self + other` where `other`'s shape equals the trailing dims of `self`
    /// (bias rows, positional tables).
    pub fn add_tiled(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.tiled(other, false)
    }

    /// `self * other` with the same tiling rule as [`Var::add_tiled`].
    pub fn mul_tiled(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.tiled(other, true)
    }

    fn tiled(self, other: Var<'t, S>, mul: bool) -> Result<Var<'t, S>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        if !tail_matches(a.shape(), b.shape()) {
            return Err(Error::ShapeMismatch {
                op: if mul { "mul_tiled" } else { "add_tiled" },
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data();
        let m = bd.len();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(m) {
            if mul {
                chunk.iter_mut().zip(bd).for_each(|(x, &y)| *x *= y);
            } else {
                chunk.iter_mut().zip(bd).for_each(|(x, &y)| *x += y);
            }
        }
        let n = data.len() as u64;
        self.tape.count(|c| if mul { c.muls += n } else { c.adds += n });
        let rg = self.requires_grad() || other.requires_grad();
        let (name, op) = if mul {
            ("mul_tiled", Op::MulTiled(self.id, other.id))
        } else {
            ("add_tiled", Op::AddTiled(self.id, other.id))
        };
        self.tape.push(name, Tensor::from_parts(a.shape().to_vec(), data), op, rg)
    }

    pub fn scale(self, c: S) -> Result<Var<'t, S>> {
        let a = self.value();
        self.tape.push(
            "scale",
            a.map(|v| v * c),
            Op::Scale(self.id, c),
            self.requires_grad(),
        )
    }

    pub fn neg(self) -> Result<Var<'t, S>> {
        self.scale(-S::one())
    }

    pub fn relu(self) -> Result<Var<'t, S>> {
        let a = self.value();
        self.tape.push(
            "relu",
            a.map(|v| if v > S::zero() { v } else { S::zero() }),
            Op::Relu(self.id),
            self.requires_grad(),
        )
    }

    pub fn exp(self) -> Result<Var<'t, S>> {
        let a = self.value();
        self.tape
            .push("exp", a.map(|v| v.exp()), Op::Exp(self.id), self.requires_grad())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(self, floor: S) -> Result<Var<'t, S>> {
        let a = self.value();
        self.tape.push(
            "ln",
            a.map(|v| v.max(floor).ln()),
            Op::LnFloor(self.id, floor),
            self.requires_grad(),
        )
    }
}

pub(crate) fn backward_add<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, b: usize, g: &[S], sign: S) {
    sink.add(a, g);
    if !sink.wants(b) {
        return;
    }
    if sink.value(b).numel() == 1 && sink.value(a).numel() != 1 {
        let s: S = g.iter().copied().sum();
        sink.add_owned(b, vec![s * sign]);
    } else if sign == S::one() {
        sink.add(b, g);
    } else {
        sink.add_owned(b, g.iter().map(|&v| v * sign).collect());
    }
}

pub(crate) fn backward_mul<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, b: usize, g: &[S]) {
    let av = sink.value(a).data().to_vec();
    let bv = sink.value(b).data().to_vec();
    let scalar_b = bv.len() == 1 && av.len() != 1;
    if sink.wants(a) {
        let ga: Vec<S> = if scalar_b {
            g.iter().map(|&v| v * bv[0]).collect()
        } else {
            g.iter().zip(&bv).map(|(&v, &y)| v * y).collect()
        };
        sink.add_owned(a, ga);
    }
    if sink.wants(b) {
        let prod = g.iter().zip(&av).map(|(&v, &x)| v * x);
        if scalar_b {
            sink.add_owned(b, vec![prod.sum()]);
        } else {
            sink.add_owned(b, prod.collect());
        }
    }
}

pub(crate) fn backward_add_tiled<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, b: usize, g: &[S]) {
    sink.add(a, g);
    if sink.wants(b) {
        let m = sink.value(b).numel();
        let mut gb = vec![S::zero(); m];
        for chunk in g.chunks(m) {
            gb.iter_mut().zip(chunk).for_each(|(acc, &v)| *acc += v);
        }
        sink.add_owned(b, gb);
    }
}

pub(crate) fn backward_mul_tiled<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, b: usize, g: &[S]) {
    let bv = sink.value(b).data().to_vec();
    let m = bv.len();
    if sink.wants(a) {
        let mut ga = g.to_vec();
        for chunk in ga.chunks_mut(m) {
            chunk.iter_mut().zip(&bv).for_each(|(x, &y)| *x *= y);
        }
        sink.add_owned(a, ga);
    }
    if sink.wants(b) {
        let av = sink.value(a).data().to_vec();
        let mut gb = vec![S::zero(); m];
        for (gc, ac) in g.chunks(m).zip(av.chunks(m)) {
            for j in 0..m {
                gb[j] += gc[j] * ac[j];
            }
        }
        sink.add_owned(b, gb);
    }
}

pub(crate) fn backward_relu<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, g: &[S]) {
    let ga: Vec<S> = sink
        .value(a)
        .data()
        .iter()
        .zip(g)
        .map(|(&x, &v)| if x > S::zero() { v } else { S::zero() })
        .collect();
    sink.add_owned(a, ga);
}

pub(crate) fn backward_exp<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, out: &Tensor<S>, g: &[S]) {
    let ga: Vec<S> = out.data().iter().zip(g).map(|(&y, &v)| y * v).collect();
    sink.add_owned(a, ga);
}

pub(crate) fn backward_ln<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, floor: S, g: &[S]) {
    let ga: Vec<S> = sink
        .value(a)
        .data()
        .iter()
        .zip(g)
        .map(|(&x, &v)| if x > floor { v / x } else { S::zero() })
        .collect();
    sink.add_owned(a, ga);
}
