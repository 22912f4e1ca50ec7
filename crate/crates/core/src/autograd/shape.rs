//! Layout operations: reshape, permute, slicing, concatenation, and the
//! leading-axis temporal shift used by the action module.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

use super::tape::{GradSink, Op, Var};

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis extent, inner) decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let shape = shape.into();
        let a = self.value();
        let t = a.reshape(shape)?;
        self.tape
            .push("reshape", t, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..a.rank()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} invalid for rank {}",
                a.rank()
            )));
        }
        let (shape, data) = permute_data(a.data(), a.shape(), perm);
        self.tape.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Sub-range `[start, start + len)` of `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                a.shape()
            )));
        }
        let (outer, ext, inner) = split_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        )
    }

    /// `out[t] = x[t - k]` along axis 0, zero for `t < k`; the last `k`
    /// entries of `x` fall off the end.
    pub fn delay(self, k: usize) -> Result<Var<'t, S>> {
        if k == 0 {
            return Err(Error::InvalidArgument("delay must be at least one frame".into()));
        }
        let a = self.value();
        let t = a.shape()[0];
        let row = a.numel() / t;
        let mut data = vec![S::zero(); a.numel()];
        if k < t {
            data[k * row..].copy_from_slice(&a.data()[..(t - k) * row]);
        }
        self.tape.push(
            "delay",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Delay { x: self.id, k },
            self.requires_grad(),
        )
    }

    /// Zeroes entries `t < k` along axis 0.
    pub fn zero_prefix(self, k: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        let t = a.shape()[0];
        let row = a.numel() / t;
        let mut data = a.data().to_vec();
        let cut = k.min(t) * row;
        data[..cut].iter_mut().for_each(|v| *v = S::zero());
        self.tape.push(
            "zero_prefix",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::ZeroPrefix { x: self.id, k },
            self.requires_grad(),
        )
    }

    /// For a rank-2 `[R, C]` value, gathers `x[r, idx[r]]` into shape `[R]`.
    pub fn pick_rows(self, idx: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "pick_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let c = a.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for {c} columns"
            )));
        }
        let data: Vec<S> = idx.iter().enumerate().map(|(r, &i)| a.data()[r * c + i]).collect();
        self.tape.push(
            "pick_rows",
            Tensor::from_parts(vec![idx.len()], data),
            Op::PickRows {
                x: self.id,
                idx: Rc::new(idx.to_vec()),
            },
            self.requires_grad(),
        )
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, S: Scalar>(xs: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tape = first.tape;
    let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
    let base = vals[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::InvalidArgument(format!("concat axis {axis} out of range")));
    }
    for (v, x) in vals.iter().zip(xs) {
        first.same_tape(x)?;
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for v in &vals {
            let ext = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * ext * inner..(o + 1) * ext * inner]);
        }
    }
    let rg = xs.iter().any(|x| x.requires_grad());
    tape.push(
        "concat",
        Tensor::from_parts(shape, data),
        Op::Concat {
            xs: xs.iter().map(|x| x.id).collect(),
            axis,
        },
        rg,
    )
}

pub(crate) fn backward_permute<S: Scalar>(sink: &mut GradSink<'_, S>, x: usize, perm: &[usize], g: &[S]) {
    let in_shape = sink.value(x).shape().to_vec();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let (_, gx) = permute_data(g, &out_shape, &inverse_perm(perm));
    sink.add_owned(x, gx);
}

pub(crate) fn backward_slice<S: Scalar>(
    sink: &mut GradSink<'_, S>,
    x: usize,
    axis: usize,
    start: usize,
    out: &Tensor<S>,
    g: &[S],
) {
    let in_shape = sink.value(x).shape().to_vec();
    let (outer, ext, inner) = split_axis(&in_shape, axis);
    let len = out.shape()[axis];
    sink.accumulate_with(x, |gx| {
        for o in 0..outer {
            let dst = (o * ext + start) * inner;
            let src = o * len * inner;
            gx[dst..dst + len * inner]
                .iter_mut()
                .zip(&g[src..src + len * inner])
                .for_each(|(a, &b)| *a += b);
        }
    });
}

pub(crate) fn backward_concat<S: Scalar>(sink: &mut GradSink<'_, S>, xs: &[usize], axis: usize, g: &[S]) {
    let shapes: Vec<Vec<usize>> = xs.iter().map(|&id| sink.value(id).shape().to_vec()).collect();
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let (outer, _, inner) = split_axis(&shapes[0], axis);
    let mut offset = 0;
    for (&id, s) in xs.iter().zip(&shapes) {
        let ext = s[axis];
        if sink.wants(id) {
            let mut gx = Vec::with_capacity(numel(s));
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                gx.extend_from_slice(&g[src..src + ext * inner]);
            }
            sink.add_owned(id, gx);
        }
        offset += ext;
    }
}

pub(crate) fn backward_delay<S: Scalar>(sink: &mut GradSink<'_, S>, x: usize, k: usize, g: &[S]) {
    let shape = sink.value(x).shape().to_vec();
    let t = shape[0];
    let row = g.len() / t;
    let mut gx = vec![S::zero(); g.len()];
    if k < t {
        gx[..(t - k) * row].copy_from_slice(&g[k * row..]);
    }
    sink.add_owned(x, gx);
}

pub(crate) fn backward_zero_prefix<S: Scalar>(sink: &mut GradSink<'_, S>, x: usize, k: usize, g: &[S]) {
    let t = sink.value(x).shape()[0];
    let row = g.len() / t;
    let mut gx = g.to_vec();
    gx[..k.min(t) * row].iter_mut().for_each(|v| *v = S::zero());
    sink.add_owned(x, gx);
}

pub(crate) fn backward_pick_rows<S: Scalar>(sink: &mut GradSink<'_, S>, x: usize, idx: &[usize], g: &[S]) {
    let shape = sink.value(x).shape().to_vec();
    let c = shape[1];
    let mut gx = vec![S::zero(); shape[0] * c];
    for (r, &i) in idx.iter().enumerate() {
        gx[r * c + i] = g[r];
    }
    sink.add_owned(x, gx);
}
