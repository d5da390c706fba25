//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! when the op is created and stored on the tape together with the parent
//! node ids. [`Tape::backward`] then walks the nodes in reverse creation
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it.
//!
//! Besides values the tape keeps two counters:
//! - a FLOP estimate, used to verify the complexity of the interaction module;
//! - a branch signature folding in every ReLU/clamp/max-pool decision.
//!
//! A tape can also record those decisions and a later tape can replay them,
//! which evaluates the smooth piece the analytic gradient belongs to. Finite
//! differences taken under replay stay valid when a perturbation crosses a
//! kink.

mod elementwise;
mod linalg;
mod shape;
mod spatial;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub use spatial::ResampleMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) use elementwise::{BinaryKind, UnaryKind};

/// Recorded operation with its parent node ids and whatever the backward
/// rule needs beyond parent values.
pub(crate) enum Op<T: Real> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Sum {
        x: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    Resample {
        x: usize,
        map: Rc<ResampleMap<T>>,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
}

pub(crate) struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Discrete decisions of every branching op, one entry per op in creation
/// order.
pub type BranchLog = Vec<Vec<u8>>;

enum Branching {
    Free,
    Record(BranchLog),
    Replay {
        log: Rc<BranchLog>,
        next: usize,
        crossed: usize,
        broken: bool,
    },
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    flops: Cell<u64>,
    branch: Cell<u64>,
    branching: RefCell<Branching>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_branching(Branching::Free)
    }

    /// Tape that keeps every branch decision for [`Tape::take_branch_log`].
    pub fn recording() -> Self {
        Self::with_branching(Branching::Record(Vec::new()))
    }

    /// Tape whose branching ops follow `log` instead of their inputs.
    pub fn replaying(log: Rc<BranchLog>) -> Self {
        Self::with_branching(Branching::Replay {
            log,
            next: 0,
            crossed: 0,
            broken: false,
        })
    }

    fn with_branching(branching: Branching) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
            branch: Cell::new(0xcbf2_9ce4_8422_2325),
            branching: RefCell::new(branching),
        }
    }

    /// Decisions recorded so far; empty unless built with [`Tape::recording`].
    pub fn take_branch_log(&self) -> BranchLog {
        match &mut *self.branching.borrow_mut() {
            Branching::Record(log) => std::mem::take(log),
            _ => Vec::new(),
        }
    }

    /// Number of replayed ops whose own decisions differed from the log.
    pub fn crossed_kinks(&self) -> usize {
        match &*self.branching.borrow() {
            Branching::Replay { crossed, .. } => *crossed,
            _ => 0,
        }
    }

    /// Fails if a replaying tape met branching ops that the log does not
    /// describe; those ops followed their own inputs.
    pub fn check_replay(&self) -> Result<()> {
        match &*self.branching.borrow() {
            Branching::Replay { log, next, broken, .. } if *broken || *next != log.len() => {
                Err(Error::Tape("branch log does not match the replayed graph".into()))
            }
            _ => Ok(()),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point operations recorded so far (multiply-add = 2).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Hash of every discrete branch decision taken so far.
    pub fn branch_signature(&self) -> u64 {
        self.branch.get()
    }

    pub(crate) fn count_flops(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    pub(crate) fn mix_branch(&self, word: u64) {
        // FNV-1a style folding of 64-bit words.
        let mut h = self.branch.get();
        h ^= word;
        h = h.wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
        self.branch.set(h);
    }

    /// Folds `actual` into the signature and returns the decisions the op
    /// must follow: `actual` itself, or the logged ones when replaying.
    pub(crate) fn decide(&self, actual: Vec<u8>) -> Vec<u8> {
        for chunk in actual.chunks(8) {
            let word = chunk.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64);
            self.mix_branch(word);
        }
        self.mix_branch(actual.len() as u64);
        match &mut *self.branching.borrow_mut() {
            Branching::Free => actual,
            Branching::Record(log) => {
                log.push(actual.clone());
                actual
            }
            Branching::Replay {
                log,
                next,
                crossed,
                broken,
            } => match log.get(*next).filter(|l| l.len() == actual.len() && !*broken) {
                Some(logged) => {
                    *next += 1;
                    if *logged != actual {
                        *crossed += 1;
                    }
                    logged.clone()
                }
                None => {
                    *broken = true;
                    actual
                }
            },
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records an op whose gradient requirement is inherited from `parents`.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let rg = parents.iter().any(|&p| self.requires_grad(p));
        self.push(value, op, rg)
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        shape::concat(self, xs, axis)
    }

    /// Backpropagates from a scalar `loss`, returning gradients for every
    /// leaf that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Tape(
                "backward on a value detached from every parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
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
                Op::Leaf => leaves[id] = Some(g),
                op => backward_op(op, &node.value, &g, &mut sink)?,
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradient buffers for the leaves of one tape.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

/// Accumulates parent gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<'a, T: Real> GradSink<'a, T> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn value(&self, id: usize) -> &'a Tensor<T> {
        &self.nodes[id].value
    }

    pub(crate) fn add(&mut self, id: usize, t: Tensor<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign_tensor(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Hands the (zero-initialized on first use) gradient buffer of `id` to
    /// `f` for in-place accumulation.
    pub(crate) fn add_with(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.wants(id) {
            return;
        }
        let shape = self.nodes[id].value.shape().to_vec();
        let slot = self.grads[id].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }
}

fn backward_op<T: Real>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => elementwise::binary_backward(*kind, *a, *b, g, sink),
        Op::Scale { x, c } => {
            let c = *c;
            sink.add(*x, g.map(|v| v * c));
        }
        Op::AddScalar { x } => sink.add(*x, g.clone()),
        Op::Unary { kind, x } => elementwise::unary_backward(*kind, *x, out, g, sink),
        Op::Clamp { x, lo, hi } => elementwise::clamp_backward(*x, *lo, *hi, g, sink),
        Op::MatMul { a, b, ta, tb } => linalg::matmul_backward(*a, *b, *ta, *tb, g, sink),
        Op::Sum { x } => {
            let gv = g.data()[0];
            sink.add_with(*x, |d| d.iter_mut().for_each(|v| *v += gv));
        }
        Op::SumAxis { x, axis } => shape::sum_axis_backward(*x, *axis, g, sink),
        Op::Softmax { x } => linalg::softmax_backward(*x, out, g, sink),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => linalg::layernorm_backward(*x, *gamma, *beta, mean, rstd, g, sink),
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => spatial::conv2d_backward(*x, *w, *b, *stride, *pad, g, sink),
        Op::MaxPool2 { x, argmax } => spatial::maxpool_backward(*x, argmax, g, sink),
        Op::Resample { x, map } => spatial::resample_backward(*x, map, g, sink),
        Op::Permute { x, perm } => shape::permute_backward(*x, perm, g, sink)?,
        Op::Reshape { x } => {
            let shape = sink.value(*x).shape().to_vec();
            sink.add(*x, g.clone().reshape(shape)?);
        }
        Op::Concat { xs, axis } => shape::concat_backward(xs, *axis, g, sink),
    }
    Ok(())
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_follows_logged_decisions() {
        let x = Tensor::from_f64([2, 2, 2], &[0.5, -0.2, 0.1, 0.3, -1.0, 2.0, 0.0, 1.0]).unwrap();
        let run = |tape: &Tape<f64>, v: &Tensor<f64>| {
            let a = tape.constant(v.clone());
            a.relu().maxpool2().unwrap().add(a.clamp(0.0, 0.4).sum()).unwrap().sum().item()
        };
        let rec = Tape::recording();
        let base = run(&rec, &x);
        let log = Rc::new(rec.take_branch_log());
        assert_eq!(log.len(), 3);

        let flipped = x.map(|v| -v);
        let free = run(&Tape::new(), &flipped);
        let replay = Tape::replaying(Rc::clone(&log));
        let replayed = run(&replay, &flipped);
        replay.check_replay().unwrap();
        assert_eq!(replay.crossed_kinks(), 3);
        assert_ne!(free, replayed);
        // relu keeps entries 0, 2, 3, 5, 7; pool winners 0.5 and 2.0; clamp
        // keeps 0.1 and 0.3, pins 0.5, 2.0, 1.0 high and the rest low.
        assert!((replayed - (-0.5 - 2.0 + 2.0 * (-0.1 - 0.3 + 1.2))).abs() < 1e-12, "{replayed}");
        assert!((base - (0.5 + 2.0 + 2.0 * 1.6)).abs() < 1e-12, "{base}");

        let short = Tape::replaying(Rc::new(log[..1].to_vec()));
        run(&short, &x);
        assert!(short.check_replay().is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64 - 2.0));
        let loss = x.sum();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_fn([5], |i| (i as f64) * 0.7 - 1.3);
        let x = tape.param(xv.clone());
        let loss = x.mul(x).unwrap().sum().scale(0.5);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().max_abs_diff(&xv) < 1e-12);
    }

    #[test]
    fn backward_rejects_detached_and_non_scalar() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones([3]));
        assert!(matches!(tape.backward(c.sum()), Err(Error::Tape(_))));
        let p = tape.param(Tensor::ones([3]));
        assert!(matches!(tape.backward(p), Err(Error::Tape(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x + x) => grad = 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([4], |i| i as f64));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let tape = Tape::<f32>::new();
            let a = tape.param(Tensor::from_fn([3, 4], |i| (i as f32).sin()));
            let b = tape.constant(Tensor::from_fn([4, 2], |i| (i as f32).cos()));
            let y = a.matmul(b).unwrap().softmax().sigmoid().sum();
            let g = tape.backward(y).unwrap();
            (y.item().to_bits(), g.get(a).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert!(g1
            .data()
            .iter()
            .zip(g2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
