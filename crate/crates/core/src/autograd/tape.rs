use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{conv, elementwise, linalg, nn, reduce, shape};

/// Forward-pass operation counts recorded by a tape.
///
/// `macs` counts multiply-accumulates in matmul and convolution kernels; the
/// elementwise fields count one per output element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub macs: u64,
    pub adds: u64,
    pub subs: u64,
    pub muls: u64,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddTiled(usize, usize),
    MulTiled(usize, usize),
    Scale(usize, S),
    Relu(usize),
    Exp(usize),
    LnFloor(usize, S),
    Sum(usize),
    Mean { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Delay { x: usize, k: usize },
    ZeroPrefix { x: usize, k: usize },
    PickRows { x: usize, idx: Rc<Vec<usize>> },
    Matmul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Conv(conv::ConvNode),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MaskedSoftmax { x: usize },
    LayerNorm(nn::LayerNormNode<S>),
}

pub(crate) struct Node<S> {
    pub(crate) value: Rc<Tensor<S>>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Records a forward pass so gradients can be replayed in reverse.
///
/// A tape lives for one forward/backward pass and is confined to one thread.
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<S>>>,
    counts: Cell<OpCounts>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar = f64> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(BTreeMap::new()),
            counts: Cell::new(OpCounts::default()),
        }
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_unchecked(Rc::new(value), Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_unchecked(Rc::new(value), Op::Leaf, false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<S>>) -> Var<'_, S> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> OpCounts {
        self.counts.get()
    }

    pub fn reset_counts(&self) {
        self.counts.set(OpCounts::default());
    }

    pub(crate) fn count(&self, f: impl FnOnce(&mut OpCounts)) {
        let mut c = self.counts.get();
        f(&mut c);
        self.counts.set(c);
    }

    fn push_unchecked(&self, value: Rc<Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op output. Fails if the forward produced a NaN or infinity.
    pub(crate) fn push(
        &self,
        name: &'static str,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> Result<Var<'_, S>> {
        if !value.is_all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(Rc::new(value), op, requires_grad))
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn owns(&self, v: &Var<'_, S>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        if !self.owns(&v) {
            return None;
        }
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        self.leaf_grads
            .borrow()
            .get(&v.id)
            .map(|g| Tensor::from_parts(shape, g.clone()))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into the
    /// trainable leaves across repeated calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        if !self.owns(&loss) {
            return Err(Error::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![S::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::Add(a, b) => elementwise::backward_add(&mut sink, *a, *b, &g, S::one()),
                Op::Sub(a, b) => elementwise::backward_add(&mut sink, *a, *b, &g, -S::one()),
                Op::Mul(a, b) => elementwise::backward_mul(&mut sink, *a, *b, &g),
                Op::AddTiled(a, b) => elementwise::backward_add_tiled(&mut sink, *a, *b, &g),
                Op::MulTiled(a, b) => elementwise::backward_mul_tiled(&mut sink, *a, *b, &g),
                Op::Scale(a, c) => {
                    let ga: Vec<S> = g.iter().map(|&v| v * *c).collect();
                    sink.add(*a, &ga);
                }
                Op::Relu(a) => elementwise::backward_relu(&mut sink, *a, &g),
                Op::Exp(a) => elementwise::backward_exp(&mut sink, *a, &node.value, &g),
                Op::LnFloor(a, floor) => elementwise::backward_ln(&mut sink, *a, *floor, &g),
                Op::Sum(a) => {
                    let n = sink.value(*a).numel();
                    sink.add(*a, &vec![g[0]; n]);
                }
                Op::Mean { x, axes } => reduce::backward_mean(&mut sink, *x, axes, &node.value, &g),
                Op::Reshape(a) => sink.add(*a, &g),
                Op::Permute { x, perm } => shape::backward_permute(&mut sink, *x, perm, &g),
                Op::Slice { x, axis, start } => {
                    shape::backward_slice(&mut sink, *x, *axis, *start, &node.value, &g)
                }
                Op::Concat { xs, axis } => shape::backward_concat(&mut sink, xs, *axis, &g),
                Op::Delay { x, k } => shape::backward_delay(&mut sink, *x, *k, &g),
                Op::ZeroPrefix { x, k } => shape::backward_zero_prefix(&mut sink, *x, *k, &g),
                Op::PickRows { x, idx } => shape::backward_pick_rows(&mut sink, *x, idx, &g),
                Op::Matmul(a, b) => linalg::backward_matmul(&mut sink, *a, *b, &g),
                Op::Bmm { a, b, trans_b } => linalg::backward_bmm(&mut sink, *a, *b, *trans_b, &g),
                Op::Conv(c) => conv::backward(&mut sink, c, &g),
                Op::Softmax { x, axis } => nn::backward_softmax(&mut sink, *x, *axis, &node.value, &g),
                Op::LogSoftmax { x, axis } => {
                    nn::backward_log_softmax(&mut sink, *x, *axis, &node.value, &g)
                }
                Op::MaskedSoftmax { x, .. } => {
                    let last = *node.value.shape().last().unwrap();
                    nn::backward_softmax_rows(&mut sink, *x, last, &node.value, &g)
                }
                Op::LayerNorm(ln) => nn::backward_layer_norm(&mut sink, ln, &g),
            }
        }
        Ok(())
    }
}

/// Gradient accumulator handed to per-op backward rules.
pub(crate) struct GradSink<'a, S> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<S: Scalar> GradSink<'_, S> {
    pub(crate) fn value(&self, id: usize) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn add(&mut self, id: usize, g: &[S]) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Calls `f` on the gradient accumulator of `id`, creating it zeroed
    /// when absent. For ops whose gradient touches only part of the input.
    pub(crate) fn accumulate_with(&mut self, id: usize, f: impl FnOnce(&mut [S])) {
        if !self.wants(id) {
            return;
        }
        let n = self.nodes[id].value.numel();
        f(self.grads[id].get_or_insert_with(|| vec![S::zero(); n]));
    }

    pub(crate) fn add_owned(&mut self, id: usize, g: Vec<S>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    /// Same value, cut off from the graph: nothing flows back through it.
    pub fn detach(self) -> Var<'t, S> {
        self.tape.constant_rc(self.value())
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, S>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }
}
