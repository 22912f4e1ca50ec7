use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::shape::split_axis;
use super::tape::{GradSink, Op, Var};

#[derive(Clone, Debug)]
pub(crate) struct LayerNormNode<S> {
    x: usize,
    gamma: usize,
    beta: usize,
    /// normalized input, `(x - mean) * rstd`
    xhat: Rc<Vec<S>>,
    rstd: Rc<Vec<S>>,
}

fn check_axis<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {:?}",
            t.shape()
        )))
    } else {
        Ok(())
    }
}

/// Max-shifted softmax along `axis`, also returning the log-sum-exp per lane.
fn softmax_lanes<S: Scalar>(t: &Tensor<S>, axis: usize, log: bool) -> Vec<S> {
    let (outer, ext, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * ext + j) * inner + i;
            let mut max = x[at(0)];
            for j in 1..ext {
                max = max.max(x[at(j)]);
            }
            let mut sum = S::zero();
            for j in 0..ext {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..ext {
                    out[at(j)] = x[at(j)] - max - lse;
                }
            } else {
                for j in 0..ext {
                    out[at(j)] /= sum;
                }
            }
        }
    }
    out
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn softmax(self, axis: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        check_axis(&a, axis)?;
        let out = softmax_lanes(&a, axis, false);
        self.tape.push(
            "softmax",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Softmax { x: self.id, axis },
            self.requires_grad(),
        )
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        check_axis(&a, axis)?;
        let out = softmax_lanes(&a, axis, true);
        self.tape.push(
            "log_softmax",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::LogSoftmax { x: self.id, axis },
            self.requires_grad(),
        )
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true; masked entries come out exactly zero and contribute nothing.
    /// `mask` is `[M, N]` matching the two trailing dims and is tiled over
    /// the leading ones. Every row must keep at least one entry.
    pub fn masked_softmax(self, mask: Rc<Vec<bool>>) -> Result<Var<'t, S>> {
        let a = self.value();
        let shape = a.shape();
        if shape.len() < 2 || mask.len() != shape[shape.len() - 1] * shape[shape.len() - 2] {
            return Err(Error::InvalidShape {
                op: "masked_softmax",
                detail: format!("mask of {} entries for shape {shape:?}", mask.len()),
            });
        }
        let n = shape[shape.len() - 1];
        let rows_per_tile = shape[shape.len() - 2];
        let x = a.data();
        let mut out = vec![S::zero(); x.len()];
        for (r, (lane, dst)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let m = &mask[(r % rows_per_tile) * n..(r % rows_per_tile + 1) * n];
            let mut max = None::<S>;
            for (v, &keep) in lane.iter().zip(m) {
                if keep {
                    max = Some(max.map_or(*v, |cur: S| cur.max(*v)));
                }
            }
            let Some(max) = max else {
                return Err(Error::InvalidArgument("masked_softmax row with no open entries".into()));
            };
            let mut sum = S::zero();
            for ((d, v), &keep) in dst.iter_mut().zip(lane).zip(m) {
                if keep {
                    *d = (*v - max).exp();
                    sum += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        self.tape.push(
            "masked_softmax",
            Tensor::from_parts(shape.to_vec(), out),
            Op::MaskedSoftmax { x: self.id },
            self.requires_grad(),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let a = self.value();
        let d = *a.shape().last().unwrap();
        let gv = gamma.value();
        let bv = beta.value();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: a.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = a.numel() / d;
        let mut xhat = vec![S::zero(); a.numel()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); a.numel()];
        let inv_d = S::one() / S::from_count(d);
        for r in 0..rows {
            let lane = &a.data()[r * d..(r + 1) * d];
            let mean = lane.iter().copied().sum::<S>() * inv_d;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (lane[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            "layer_norm",
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::LayerNorm(LayerNormNode {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Rc::new(xhat),
                rstd: Rc::new(rstd),
            }),
            rg,
        )
    }
}

pub(crate) fn backward_softmax<S: Scalar>(sink: &mut GradSink<'_, S>, x: usize, axis: usize, y: &Tensor<S>, g: &[S]) {
    let (outer, ext, inner) = split_axis(y.shape(), axis);
    let yv = y.data();
    let mut gx = vec![S::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * ext + j) * inner + i;
            let dot: S = (0..ext).map(|j| g[at(j)] * yv[at(j)]).sum();
            for j in 0..ext {
                gx[at(j)] = yv[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    sink.add_owned(x, gx);
}

/// Softmax backward for contiguous rows of length `n` (last-axis softmax).
pub(crate) fn backward_softmax_rows<S: Scalar>(sink: &mut GradSink<'_, S>, x: usize, n: usize, y: &Tensor<S>, g: &[S]) {
    let mut gx = vec![S::zero(); g.len()];
    for ((dst, yr), gr) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            dst[j] = yr[j] * (gr[j] - dot);
        }
    }
    sink.add_owned(x, gx);
}

pub(crate) fn backward_log_softmax<S: Scalar>(
    sink: &mut GradSink<'_, S>,
    x: usize,
    axis: usize,
    y: &Tensor<S>,
    g: &[S],
) {
    let (outer, ext, inner) = split_axis(y.shape(), axis);
    let yv = y.data();
    let mut gx = vec![S::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * ext + j) * inner + i;
            let gsum: S = (0..ext).map(|j| g[at(j)]).sum();
            for j in 0..ext {
                gx[at(j)] = g[at(j)] - yv[at(j)].exp() * gsum;
            }
        }
    }
    sink.add_owned(x, gx);
}

pub(crate) fn backward_layer_norm<S: Scalar>(sink: &mut GradSink<'_, S>, node: &LayerNormNode<S>, g: &[S]) {
    let gamma = sink.value(node.gamma).data().to_vec();
    let d = gamma.len();
    let rows = g.len() / d;
    let xhat = &node.xhat;
    if sink.wants(node.gamma) || sink.wants(node.beta) {
        let mut gg = vec![S::zero(); d];
        let mut gb = vec![S::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                gg[j] += g[r * d + j] * xhat[r * d + j];
                gb[j] += g[r * d + j];
            }
        }
        sink.add_owned(node.gamma, gg);
        sink.add_owned(node.beta, gb);
    }
    if sink.wants(node.x) {
        let inv_d = S::one() / S::from_count(d);
        let mut gx = vec![S::zero(); g.len()];
        for r in 0..rows {
            let mut sum_gh = S::zero();
            let mut sum_ghx = S::zero();
            for j in 0..d {
                let gh = g[r * d + j] * gamma[j];
                sum_gh += gh;
                sum_ghx += gh * xhat[r * d + j];
            }
            let rs = node.rstd[r];
            for j in 0..d {
                let gh = g[r * d + j] * gamma[j];
                gx[r * d + j] = rs * (gh - inv_d * sum_gh - xhat[r * d + j] * inv_d * sum_ghx);
            }
        }
        sink.add_owned(node.x, gx);
    }
}
