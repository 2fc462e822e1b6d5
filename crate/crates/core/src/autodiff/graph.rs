//! Differentiable computation graphs.
//!
//! Model code is written once against [`Graph`] and runs either eagerly
//! ([`Eager`], no recording) or on a [`Tape`] that records every operation for
//! reverse-mode gradient evaluation. Both share the same kernels, so their
//! forward values agree bitwise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::params::{Gradients, ParamSet};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::linop::LinearOperator;
use crate::tvops;

/// Operations shared by the eager and recording back ends.
pub trait Graph<'op> {
    type Var: Clone;

    fn value<'s>(&'s self, v: &'s Self::Var) -> &'s Tensor;
    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn param(&mut self, params: &ParamSet, name: &str) -> Result<Self::Var>;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, k: usize) -> Result<Self::Var>;
    fn affine(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn avgpool2(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn global_mean(&mut self, x: &Self::Var) -> Self::Var;

    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn tile(&mut self, v: &Self::Var, h: usize, w: usize) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: f64) -> Self::Var;
    fn add_scalar(&mut self, x: &Self::Var, s: f64) -> Self::Var;
    fn exp(&mut self, x: &Self::Var) -> Self::Var;
    fn ln(&mut self, x: &Self::Var) -> Self::Var;
    fn softplus(&mut self, x: &Self::Var) -> Self::Var;
    fn clamp(&mut self, x: &Self::Var, lo: f64, hi: f64) -> Self::Var;
    fn sum(&mut self, x: &Self::Var) -> Self::Var;

    /// `A x` for a single-channel image tensor.
    fn forward_op(&mut self, x: &Self::Var, op: &'op dyn LinearOperator) -> Result<Self::Var>;
    /// `A* y` for a single-channel sinogram tensor.
    fn adjoint_op(&mut self, y: &Self::Var, op: &'op dyn LinearOperator) -> Result<Self::Var>;
    /// Gradient of the smoothed total variation of a single-channel image.
    fn tv_gradient(&mut self, x: &Self::Var, eps: f64) -> Result<Self::Var>;
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(a.shape(), b.shape()));
    }
    Ok(())
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Result<()> {
    let [co, ci, kk] = w.shape();
    if k % 2 == 0 || kk != k * k {
        return Err(Error::InvalidArgument(format!("conv kernel must be odd, weight shape {:?}", w.shape())));
    }
    if x.channels() != ci {
        return Err(shape_err(format!("{ci} input channels"), x.shape()));
    }
    b.check_shape([co, 1, 1])
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    let [out, n, _] = w.shape();
    if x.len() != n {
        return Err(shape_err(format!("{n} inputs"), x.shape()));
    }
    b.check_shape([out, 1, 1])
}

fn check_single_channel(x: &Tensor, plane: (usize, usize)) -> Result<()> {
    x.check_shape([1, plane.0, plane.1])
}

fn elementwise(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        .expect("same shape")
}

fn concat_values(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(Error::Empty("concat inputs"))?;
    let [_, h, w] = first.shape();
    let mut channels = 0;
    for x in xs {
        if x.shape()[1] != h || x.shape()[2] != w {
            return Err(shape_err([h, w], x.shape()));
        }
        channels += x.channels();
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec([channels, h, w], data)
}

fn slice_value(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape();
    if start + len > c || len == 0 {
        return Err(Error::InvalidArgument(format!("channel slice {start}..{} of {c}", start + len)));
    }
    Tensor::from_vec([len, h, w], x.data()[start * h * w..(start + len) * h * w].to_vec())
}

fn tv_value(x: &Tensor, eps: f64) -> Result<Tensor> {
    let [c, h, w] = x.shape();
    if c != 1 {
        return Err(shape_err("single channel", x.shape()));
    }
    let mut out = Tensor::zeros(x.shape());
    tvops::smoothed_tv_gradient(x.data(), h, w, eps, out.data_mut());
    Ok(out)
}

fn op_forward(x: &Tensor, op: &dyn LinearOperator) -> Result<Tensor> {
    check_single_channel(x, op.domain_shape())?;
    let (r, c) = op.range_shape();
    let mut out = Tensor::zeros([1, r, c]);
    op.apply_into(x.data(), out.data_mut());
    Ok(out)
}

fn op_adjoint(y: &Tensor, op: &dyn LinearOperator) -> Result<Tensor> {
    check_single_channel(y, op.range_shape())?;
    let (r, c) = op.domain_shape();
    let mut out = Tensor::zeros([1, r, c]);
    op.adjoint_into(y.data(), out.data_mut());
    Ok(out)
}

fn check_pool(x: &Tensor) -> Result<()> {
    let [_, h, w] = x.shape();
    if h < 2 || w < 2 {
        return Err(shape_err("spatial dims >= 2 for pooling", x.shape()));
    }
    Ok(())
}

fn check_tile(v: &Tensor) -> Result<()> {
    let [_, h, w] = v.shape();
    if h != 1 || w != 1 {
        return Err(shape_err("[c, 1, 1]", v.shape()));
    }
    Ok(())
}

/// Evaluates operations immediately without recording anything.
#[derive(Debug, Default)]
pub struct Eager;

impl<'op> Graph<'op> for Eager {
    type Var = Rc<Tensor>;

    fn value<'s>(&'s self, v: &'s Self::Var) -> &'s Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Self::Var {
        Rc::new(t)
    }

    fn param(&mut self, params: &ParamSet, name: &str) -> Result<Self::Var> {
        Ok(Rc::new(params.get(name)?.clone()))
    }

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, k: usize) -> Result<Self::Var> {
        check_conv(x, w, b, k)?;
        Ok(Rc::new(kernels::conv2d(x, w, b, k)))
    }

    fn affine(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        check_affine(x, w, b)?;
        Ok(Rc::new(kernels::affine(x, w, b)))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(elementwise(x, |v| v.max(0.0)))
    }

    fn avgpool2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        check_pool(x)?;
        Ok(Rc::new(kernels::avgpool2(x)))
    }

    fn global_mean(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(kernels::global_mean(x))
    }

    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| &**v).collect();
        Ok(Rc::new(concat_values(&refs)?))
    }

    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        Ok(Rc::new(slice_value(x, start, len)?))
    }

    fn tile(&mut self, v: &Self::Var, h: usize, w: usize) -> Result<Self::Var> {
        check_tile(v)?;
        Ok(Rc::new(kernels::tile(v, h, w)))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        check_same(a, b)?;
        Ok(Rc::new(zip(a, b, |x, y| x + y)))
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        check_same(a, b)?;
        Ok(Rc::new(zip(a, b, |x, y| x - y)))
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        check_same(a, b)?;
        Ok(Rc::new(zip(a, b, |x, y| x * y)))
    }

    fn scale(&mut self, x: &Self::Var, s: f64) -> Self::Var {
        Rc::new(elementwise(x, |v| v * s))
    }

    fn add_scalar(&mut self, x: &Self::Var, s: f64) -> Self::Var {
        Rc::new(elementwise(x, |v| v + s))
    }

    fn exp(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(elementwise(x, libm::exp))
    }

    fn ln(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(elementwise(x, libm::log))
    }

    fn softplus(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(elementwise(x, kernels::softplus))
    }

    fn clamp(&mut self, x: &Self::Var, lo: f64, hi: f64) -> Self::Var {
        Rc::new(elementwise(x, |v| v.clamp(lo, hi)))
    }

    fn sum(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(Tensor::scalar(x.data().iter().sum()))
    }

    fn forward_op(&mut self, x: &Self::Var, op: &'op dyn LinearOperator) -> Result<Self::Var> {
        Ok(Rc::new(op_forward(x, op)?))
    }

    fn adjoint_op(&mut self, y: &Self::Var, op: &'op dyn LinearOperator) -> Result<Self::Var> {
        Ok(Rc::new(op_adjoint(y, op)?))
    }

    fn tv_gradient(&mut self, x: &Self::Var, eps: f64) -> Result<Self::Var> {
        Ok(Rc::new(tv_value(x, eps)?))
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<'op> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, k: usize },
    Affine { x: usize, w: usize, b: usize },
    Relu(usize),
    AvgPool2(usize),
    GlobalMean(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Tile(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Forward(usize, &'op dyn LinearOperator),
    Adjoint(usize, &'op dyn LinearOperator),
    TvGradient { x: usize, eps: f64 },
}

struct Node<'op> {
    value: Tensor,
    op: Op<'op>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Records operations for reverse-mode differentiation.
pub struct Tape<'op> {
    id: u64,
    nodes: Vec<Node<'op>>,
    params: BTreeMap<String, usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse sweep: one optional gradient per recorded node.
pub struct TapeGradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

impl TapeGradients {
    /// Gradient with respect to a recorded node, zero-filled if the node did
    /// not influence the output.
    pub fn wrt(&self, v: Var, shape: [usize; 3]) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::TapeMismatch("variable belongs to another tape".into()));
        }
        Ok(self.grads[v.index].clone().unwrap_or_else(|| Tensor::zeros(shape)))
    }

    /// Gradients for every parameter of `params`; entries that were not used
    /// on the tape are zero.
    pub fn params(&self, params: &ParamSet) -> Gradients {
        let mut out = Gradients::zeros_like(params);
        self.accumulate_into(&mut out);
        out
    }

    /// Adds the parameter gradients into an existing accumulator.
    pub fn accumulate_into(&self, acc: &mut Gradients) {
        for (name, &idx) in &self.params {
            if let (Some(g), Some(slot)) = (&self.grads[idx], acc.get_mut(name)) {
                slot.add_assign(g);
            }
        }
    }
}

impl<'op> Tape<'op> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'op>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index
    }

    fn val(&self, v: &Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    /// Hash of every activation-pattern decision (ReLU signs, clamp regions)
    /// taken during the recorded forward pass. Two evaluations with equal
    /// signatures are on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: u64| {
            h ^= bit;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x].value.data() {
                        mix((v > 0.0) as u64);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.nodes[x].value.data() {
                        mix(if v < lo { 2 } else if v > hi { 3 } else { 4 });
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<TapeGradients> {
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(Error::TapeMismatch("output variable is not on this tape".into()));
        }
        let out_shape = self.nodes[output.index].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::TapeMismatch(format!(
                "output gradient shape {:?} does not match output {:?}",
                seed.shape(),
                out_shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        grads[output.index] = Some(seed.clone());

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let v = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf => {
                    // Keep leaf gradients for the caller.
                    grads[i] = Some(g);
                }
                Op::Conv2d { x, w, b, k } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(v(*x), v(*w), *k, &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine { x, w, b } => {
                    let (gx, gw, gb) = kernels::affine_backward(v(*x), v(*w), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(x) => acc(&mut grads, *x, zip(&g, v(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
                Op::AvgPool2(x) => acc(&mut grads, *x, kernels::avgpool2_backward(v(*x).shape(), &g)),
                Op::GlobalMean(x) => acc(&mut grads, *x, kernels::global_mean_backward(v(*x).shape(), &g)),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = v(p).channels();
                        acc(&mut grads, p, slice_value(&g, offset, c)?);
                        offset += c;
                    }
                }
                Op::Slice { x, start } => {
                    let mut gx = Tensor::zeros(v(*x).shape());
                    let n = g.len();
                    let off = start * v(*x).plane();
                    gx.data_mut()[off..off + n].copy_from_slice(g.data());
                    acc(&mut grads, *x, gx);
                }
                Op::Tile(x) => acc(&mut grads, *x, kernels::tile_backward(&g)),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, elementwise(&g, |x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, zip(&g, v(*b), |x, y| x * y));
                    acc(&mut grads, *b, zip(&g, v(*a), |x, y| x * y));
                }
                Op::Scale(x, s) => acc(&mut grads, *x, elementwise(&g, |gv| gv * s)),
                Op::AddScalar(x) => acc(&mut grads, *x, g),
                Op::Exp(x) => acc(&mut grads, *x, zip(&g, &node.value, |gv, e| gv * e)),
                Op::Ln(x) => acc(&mut grads, *x, zip(&g, v(*x), |gv, xv| gv / xv)),
                Op::Softplus(x) => acc(&mut grads, *x, zip(&g, v(*x), |gv, xv| gv * kernels::sigmoid(xv))),
                Op::Clamp { x, lo, hi } => acc(
                    &mut grads,
                    *x,
                    zip(&g, v(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
                ),
                Op::Sum(x) => acc(&mut grads, *x, Tensor::filled(v(*x).shape(), g.item())),
                Op::Forward(x, op) => acc(&mut grads, *x, op_adjoint(&g, *op)?),
                Op::Adjoint(y, op) => acc(&mut grads, *y, op_forward(&g, *op)?),
                Op::TvGradient { x, eps } => {
                    let [_, h, w] = v(*x).shape();
                    let mut gx = Tensor::zeros(v(*x).shape());
                    tvops::smoothed_tv_hvp(v(*x).data(), g.data(), h, w, *eps, gx.data_mut());
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(TapeGradients {
            tape: self.id,
            grads,
            params: self.params.clone(),
        })
    }
}

impl<'op> Graph<'op> for Tape<'op> {
    type Var = Var;

    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor {
        self.val(v)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&index) = self.params.get(name) {
            return Ok(Var { tape: self.id, index });
        }
        let v = self.push(params.get(name)?.clone(), Op::Leaf);
        self.params.insert(String::from(name), v.index);
        Ok(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, k: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.val(x), self.val(w), self.val(b));
        check_conv(xt, wt, bt, k)?;
        let out = kernels::conv2d(xt, wt, bt, k);
        let op = Op::Conv2d {
            x: self.idx(x),
            w: self.idx(w),
            b: self.idx(b),
            k,
        };
        Ok(self.push(out, op))
    }

    fn affine(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (xt, wt, bt) = (self.val(x), self.val(w), self.val(b));
        check_affine(xt, wt, bt)?;
        let out = kernels::affine(xt, wt, bt);
        let op = Op::Affine {
            x: self.idx(x),
            w: self.idx(w),
            b: self.idx(b),
        };
        Ok(self.push(out, op))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = elementwise(self.val(x), |v| v.max(0.0));
        let i = self.idx(x);
        self.push(out, Op::Relu(i))
    }

    fn avgpool2(&mut self, x: &Var) -> Result<Var> {
        check_pool(self.val(x))?;
        let out = kernels::avgpool2(self.val(x));
        let i = self.idx(x);
        Ok(self.push(out, Op::AvgPool2(i)))
    }

    fn global_mean(&mut self, x: &Var) -> Var {
        let out = kernels::global_mean(self.val(x));
        let i = self.idx(x);
        self.push(out, Op::GlobalMean(i))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.val(v)).collect();
        let out = concat_values(&refs)?;
        let idx = xs.iter().map(|v| self.idx(v)).collect();
        Ok(self.push(out, Op::Concat(idx)))
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = slice_value(self.val(x), start, len)?;
        let i = self.idx(x);
        Ok(self.push(out, Op::Slice { x: i, start }))
    }

    fn tile(&mut self, v: &Var, h: usize, w: usize) -> Result<Var> {
        check_tile(self.val(v))?;
        let out = kernels::tile(self.val(v), h, w);
        let i = self.idx(v);
        Ok(self.push(out, Op::Tile(i)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_same(self.val(a), self.val(b))?;
        let out = zip(self.val(a), self.val(b), |x, y| x + y);
        let op = Op::Add(self.idx(a), self.idx(b));
        Ok(self.push(out, op))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_same(self.val(a), self.val(b))?;
        let out = zip(self.val(a), self.val(b), |x, y| x - y);
        let op = Op::Sub(self.idx(a), self.idx(b));
        Ok(self.push(out, op))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        check_same(self.val(a), self.val(b))?;
        let out = zip(self.val(a), self.val(b), |x, y| x * y);
        let op = Op::Mul(self.idx(a), self.idx(b));
        Ok(self.push(out, op))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let out = elementwise(self.val(x), |v| v * s);
        let i = self.idx(x);
        self.push(out, Op::Scale(i, s))
    }

    fn add_scalar(&mut self, x: &Var, s: f64) -> Var {
        let out = elementwise(self.val(x), |v| v + s);
        let i = self.idx(x);
        self.push(out, Op::AddScalar(i))
    }

    fn exp(&mut self, x: &Var) -> Var {
        let out = elementwise(self.val(x), libm::exp);
        let i = self.idx(x);
        self.push(out, Op::Exp(i))
    }

    fn ln(&mut self, x: &Var) -> Var {
        let out = elementwise(self.val(x), libm::log);
        let i = self.idx(x);
        self.push(out, Op::Ln(i))
    }

    fn softplus(&mut self, x: &Var) -> Var {
        let out = elementwise(self.val(x), kernels::softplus);
        let i = self.idx(x);
        self.push(out, Op::Softplus(i))
    }

    fn clamp(&mut self, x: &Var, lo: f64, hi: f64) -> Var {
        let out = elementwise(self.val(x), |v| v.clamp(lo, hi));
        let i = self.idx(x);
        self.push(out, Op::Clamp { x: i, lo, hi })
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(x).data().iter().sum());
        let i = self.idx(x);
        self.push(out, Op::Sum(i))
    }

    fn forward_op(&mut self, x: &Var, op: &'op dyn LinearOperator) -> Result<Var> {
        let out = op_forward(self.val(x), op)?;
        let i = self.idx(x);
        Ok(self.push(out, Op::Forward(i, op)))
    }

    fn adjoint_op(&mut self, y: &Var, op: &'op dyn LinearOperator) -> Result<Var> {
        let out = op_adjoint(self.val(y), op)?;
        let i = self.idx(y);
        Ok(self.push(out, Op::Adjoint(i, op)))
    }

    fn tv_gradient(&mut self, x: &Var, eps: f64) -> Result<Var> {
        let out = tv_value(self.val(x), eps)?;
        let i = self.idx(x);
        Ok(self.push(out, Op::TvGradient { x: i, eps }))
    }
}
