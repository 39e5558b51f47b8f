//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation together with its output value and any
//! forward context the adjoint needs (pooling argmax, sigmoid output). One
//! [`Tape::backward`] sweep visits the recorded operations once in reverse and
//! sums the adjoints of values consumed more than once.
//!
//! Model code is written against the [`Graph`] trait so the same forward
//! definition runs on a recording tape for training and on [`Eager`] for
//! inference, where intermediates are dropped as soon as they go out of scope.

mod gradcheck;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, LossProbe, ParamCheck, Parameterized, Probe};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Element, Tensor4};

/// A learnable tensor with its gradient accumulator and ADAM moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub m: Tensor4<T>,
    pub v: Tensor4<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor4<T>) -> Self {
        let dims = value.dims();
        Self {
            name: name.into(),
            value,
            grad: Tensor4::zeros(dims),
            m: Tensor4::zeros(dims),
            v: Tensor4::zeros(dims),
        }
    }

    pub fn zeros(name: impl Into<String>, dims: [usize; 4]) -> Self {
        Self::new(name, Tensor4::zeros(dims))
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Element>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

/// Operations shared by the recording tape and eager evaluation.
pub trait Graph<T: Element> {
    type Value;

    fn input(&mut self, t: Tensor4<T>) -> Self::Value;
    fn param(&mut self, p: &Param<T>) -> Self::Value;
    fn conv3x3(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn conv1x1(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn maxpool(&mut self, x: &Self::Value, k: usize) -> Result<Self::Value>;
    fn upsample2x(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// `relu(conv3x3(x, w, b))`. Evaluators without a tape may fuse the two.
    fn conv3x3_relu(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        let y = self.conv3x3(x, w, b)?;
        self.relu(&y)
    }
    fn dims(&self, v: &Self::Value) -> Result<[usize; 4]>;
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Element> Graph<T> for Eager {
    type Value = Tensor4<T>;

    fn input(&mut self, t: Tensor4<T>) -> Tensor4<T> {
        t
    }
    fn param(&mut self, p: &Param<T>) -> Tensor4<T> {
        p.value.clone()
    }
    fn conv3x3(&mut self, x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::conv2d_3x3(x, w, b.data())
    }
    fn conv1x1(&mut self, x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::conv1x1(x, w, b.data())
    }
    fn maxpool(&mut self, x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
        tensor::maxpool_values(x, k)
    }
    fn upsample2x(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(tensor::upsample2x(x))
    }
    fn concat(&mut self, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::concat_channels(a, b)
    }
    fn relu(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(tensor::relu(x))
    }
    fn conv3x3_relu(&mut self, x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::conv2d_3x3_relu(x, w, b.data())
    }
    fn dims(&self, v: &Tensor4<T>) -> Result<[usize; 4]> {
        Ok(v.dims())
    }
}

/// Eager evaluation that also fingerprints every non-smooth decision: the
/// sign pattern at each ReLU input and the argmax of each pooling window.
/// Two evaluations with equal signatures lie on the same smooth piece of the
/// function.
#[derive(Debug, Default, Clone)]
pub struct Traced {
    hasher: DefaultHasher,
}

impl Traced {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn signature(&self) -> u64 {
        self.hasher.finish()
    }
}

fn hash_signs<T: Element>(h: &mut DefaultHasher, data: &[T]) {
    for chunk in data.chunks(64) {
        let word = chunk
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &v)| w | (u64::from(v > T::zero()) << i));
        word.hash(h);
    }
}

impl<T: Element> Graph<T> for Traced {
    type Value = Tensor4<T>;

    fn input(&mut self, t: Tensor4<T>) -> Tensor4<T> {
        t
    }
    fn param(&mut self, p: &Param<T>) -> Tensor4<T> {
        p.value.clone()
    }
    fn conv3x3(&mut self, x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::conv2d_3x3(x, w, b.data())
    }
    fn conv1x1(&mut self, x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::conv1x1(x, w, b.data())
    }
    fn maxpool(&mut self, x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
        let p = tensor::maxpool(x, k)?;
        p.argmax.hash(&mut self.hasher);
        Ok(p.output)
    }
    fn upsample2x(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(tensor::upsample2x(x))
    }
    fn concat(&mut self, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        tensor::concat_channels(a, b)
    }
    fn relu(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        hash_signs(&mut self.hasher, x.data());
        Ok(tensor::relu(x))
    }
    fn dims(&self, v: &Tensor4<T>) -> Result<[usize; 4]> {
        Ok(v.dims())
    }
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3x3 { x: usize, w: usize, b: usize },
    Conv1x1 { x: usize, w: usize, b: usize },
    MaxPool { x: usize, argmax: Vec<u32> },
    Upsample2x { x: usize },
    Concat { a: usize, b: usize, ca: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: T },
    Sum { x: usize },
    BalancedBce { logits: usize, target: usize, beta: T },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor4<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug)]
pub struct Tape<T = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnknownValue(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op<T>, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Records a parameter leaf, registered under its name so gradients can be
    /// routed back with [`Gradients::accumulate_into`].
    pub fn param_leaf(&mut self, p: &Param<T>) -> Var {
        let v = self.leaf(p.value.clone(), true);
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor4<T>> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let mut out = self.nodes[ia].value.clone();
        out.add_assign(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Add { a: ia, b: ib }, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.dims() != vb.dims() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", va.dims(), vb.dims()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor4::from_vec(va.dims(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Mul { a: ia, b: ib }, out, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * s);
        let rg = self.rg(ix);
        Ok(self.push(Op::Scale { x: ix, s }, out, rg))
    }

    /// Sum of every element, as a 1x1x1x1 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let total = self.nodes[ix]
            .value
            .data()
            .iter()
            .fold(0.0f64, |s, &v| s + v.to_f64());
        let rg = self.rg(ix);
        Ok(self.push(Op::Sum { x: ix }, Tensor4::scalar(T::from_f64(total)), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::sigmoid(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(Op::Sigmoid { x: ix }, out, rg))
    }

    /// Class-balanced binary cross-entropy on logits, summed over pixels:
    /// `-β Σ_{y=1} log σ(z) - (1-β) Σ_{y=0} log(1-σ(z))`, evaluated with the
    /// softplus form so saturated logits stay finite.
    pub fn balanced_bce(&mut self, logits: Var, target: Var, beta: T) -> Result<Var> {
        let (il, it) = (self.idx(logits)?, self.idx(target)?);
        let loss = crate::loss::class_balanced_bce_logits(
            &self.nodes[il].value,
            &self.nodes[it].value,
            beta,
        )?;
        let rg = self.rg(il);
        Ok(self.push(
            Op::BalancedBce {
                logits: il,
                target: it,
                beta,
            },
            Tensor4::scalar(loss),
            rg,
        ))
    }

    /// Same fingerprint as [`Traced::signature`] for everything recorded so far.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => hash_signs(&mut h, self.nodes[*x].value.data()),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf that
    /// requires them; intermediate adjoints are released as soon as they have
    /// been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let ld = self.nodes[il].value.dims();
        if ld != [1, 1, 1, 1] {
            return Err(Error::NotScalar(ld));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor4::scalar(T::one()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads)?;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } | Op::Conv1x1 { x, w, b } => {
                let need_x = self.rg(*x);
                let cg = if matches!(node.op, Op::Conv3x3 { .. }) {
                    tensor::conv2d_3x3_backward(val(*x), val(*w), &g, need_x)?
                } else {
                    tensor::conv1x1_backward(val(*x), val(*w), &g, need_x)?
                };
                if let Some(gx) = cg.input {
                    accumulate(grads, *x, gx)?;
                }
                if self.rg(*w) {
                    accumulate(grads, *w, cg.weight)?;
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor4::from_vec(val(*b).dims(), cg.bias)?)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.rg(*x) {
                    let gx = tensor::maxpool_backward(val(*x).dims(), argmax, &g)?;
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::Upsample2x { x } => {
                if self.rg(*x) {
                    accumulate(grads, *x, tensor::upsample2x_backward(&g)?)?;
                }
            }
            Op::Concat { a, b, ca } => {
                let (ga, gb) = tensor::split_channels(&g, *ca)?;
                if self.rg(*a) {
                    accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::Sigmoid { x } => {
                if self.rg(*x) {
                    let mut gx = g;
                    for (gv, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv = *gv * s * (T::one() - s);
                    }
                    accumulate(grads, *x, gx)?;
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) && self.rg(*b) {
                    accumulate(grads, *a, g.clone())?;
                    accumulate(grads, *b, g)?;
                } else if self.rg(*a) {
                    accumulate(grads, *a, g)?;
                } else if self.rg(*b) {
                    accumulate(grads, *b, g)?;
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&gv, &y)| gv * y).collect();
                    accumulate(grads, *a, Tensor4::from_vec(g.dims(), d)?)?;
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&gv, &x)| gv * x).collect();
                    accumulate(grads, *b, Tensor4::from_vec(g.dims(), d)?)?;
                }
            }
            Op::Scale { x, s } => {
                if self.rg(*x) {
                    let s = *s;
                    accumulate(grads, *x, g.map(|v| v * s))?;
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let gv = g.data()[0];
                    accumulate(grads, *x, Tensor4::full(val(*x).dims(), gv))?;
                }
            }
            Op::BalancedBce {
                logits,
                target,
                beta,
            } => {
                if self.rg(*logits) {
                    let gv = g.data()[0];
                    let gx = crate::loss::class_balanced_bce_logits_grad(
                        val(*logits),
                        val(*target),
                        *beta,
                    )?;
                    accumulate(grads, *logits, gx.map(|v| v * gv))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor4<T>>], i: usize, g: Tensor4<T>) -> Result<()> {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Element> Graph<T> for Tape<T> {
    type Value = Var;

    fn input(&mut self, t: Tensor4<T>) -> Var {
        self.leaf(t, false)
    }

    fn param(&mut self, p: &Param<T>) -> Var {
        self.param_leaf(p)
    }

    fn conv3x3(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(*x)?, self.idx(*w)?, self.idx(*b)?);
        let out = tensor::conv2d_3x3(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            self.nodes[ib].value.data(),
        )?;
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        Ok(self.push(Op::Conv3x3 { x: ix, w: iw, b: ib }, out, rg))
    }

    fn conv1x1(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(*x)?, self.idx(*w)?, self.idx(*b)?);
        let out = tensor::conv1x1(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            self.nodes[ib].value.data(),
        )?;
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        Ok(self.push(Op::Conv1x1 { x: ix, w: iw, b: ib }, out, rg))
    }

    fn maxpool(&mut self, x: &Var, k: usize) -> Result<Var> {
        let ix = self.idx(*x)?;
        let p = tensor::maxpool(&self.nodes[ix].value, k)?;
        let rg = self.rg(ix);
        Ok(self.push(
            Op::MaxPool {
                x: ix,
                argmax: p.argmax,
            },
            p.output,
            rg,
        ))
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let ix = self.idx(*x)?;
        let out = tensor::upsample2x(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(Op::Upsample2x { x: ix }, out, rg))
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.idx(*a)?, self.idx(*b)?);
        let out = tensor::concat_channels(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ca = self.nodes[ia].value.channels();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Concat { a: ia, b: ib, ca }, out, rg))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let ix = self.idx(*x)?;
        let out = tensor::relu(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(Op::Relu { x: ix }, out, rg))
    }

    fn dims(&self, v: &Var) -> Result<[usize; 4]> {
        Ok(self.value(*v)?.dims())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Tensor4<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient of the parameter registered under `name`.
    pub fn param(&self, name: &str) -> Option<&Tensor4<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Adds each parameter's gradient into its `grad` buffer. Parameters that
    /// were not used in the forward pass are left untouched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        for p in params {
            if let Some(g) = self.param(&p.name) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}
