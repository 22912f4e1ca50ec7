use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

use super::tape::{GradSink, Op, Var};

/// For each input flat index, the flat index of the reduced output it feeds.
fn reduced_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let in_strides = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|i| !axes.contains(i)).collect();
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    for flat in 0..n {
        let mut o = 0;
        for (j, &ax) in kept.iter().enumerate() {
            let coord = (flat / in_strides[ax]) % shape[ax];
            o += coord * out_strides[j];
        }
        map.push(o);
    }
    (out_shape, map)
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t, S>> {
        let a = self.value();
        let s: S = a.data().iter().copied().sum();
        self.tape
            .push("sum", Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    /// Arithmetic mean over `axes`; reduced axes are dropped. Reducing every
    /// axis yields shape `[1]`; an empty axis list is the identity.
    pub fn mean(self, axes: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        let rank = a.rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&ax| ax >= rank) {
            return Err(Error::InvalidArgument(format!(
                "mean axes {axes:?} invalid for rank {rank}"
            )));
        }
        if sorted.is_empty() {
            return self.reshape(a.shape().to_vec());
        }
        let (out_shape, map) = reduced_index_map(a.shape(), &sorted);
        let count: usize = sorted.iter().map(|&ax| a.shape()[ax]).product();
        let mut out = vec![S::zero(); out_shape.iter().product()];
        for (v, &o) in a.data().iter().zip(&map) {
            out[o] += *v;
        }
        let inv = S::one() / S::from_count(count);
        out.iter_mut().for_each(|v| *v *= inv);
        self.tape.push(
            "mean",
            Tensor::from_parts(out_shape, out),
            Op::Mean {
                x: self.id,
                axes: sorted,
            },
            self.requires_grad(),
        )
    }
}

pub(crate) fn backward_mean<S: Scalar>(
    sink: &mut GradSink<'_, S>,
    x: usize,
    axes: &[usize],
    _out: &Tensor<S>,
    g: &[S],
) {
    let shape = sink.value(x).shape().to_vec();
    let (_, map) = reduced_index_map(&shape, axes);
    let count: usize = axes.iter().map(|&ax| shape[ax]).product();
    let inv = S::one() / S::from_count(count);
    let gx: Vec<S> = map.iter().map(|&o| g[o] * inv).collect();
    sink.add_owned(x, gx);
}
