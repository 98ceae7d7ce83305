//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written with [`Var`] operations, so calling
//! [`Var::backward`] with `create_graph = true` records the gradient
//! computation and allows differentiating through it again (needed for the
//! R1 gradient penalty).

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::ops;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, broadcast_shape, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording on this thread while alive.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|c| c.replace(true));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|c| c.set(self.prev));
    }
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _g = NoGradGuard::new();
    f()
}

fn recording() -> bool {
    !NO_GRAD.with(|c| c.get())
}

trait Op<T: Scalar> {
    fn backward(&self, inputs: &[Var<T>], out: &Var<T>, grad: &Var<T>) -> Vec<Option<Var<T>>>;
}

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn Op<T>>>,
    inputs: Vec<Var<T>>,
}

/// A node of the computation graph: a tensor value plus (when recording)
/// the operation that produced it.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients produced by [`Var::backward`], keyed by node.
pub struct Gradients<T: Scalar> {
    map: HashMap<usize, Var<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Var<T>> {
        self.map.get(&v.0.id)
    }

    /// Gradient value, or zeros when `v` did not influence the root.
    pub fn value_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, op: Option<Box<dyn Op<T>>>, inputs: Vec<Var<T>>) -> Self {
        Var(Rc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, requires_grad, op, inputs }))
    }

    /// A graph leaf; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::make(value, requires_grad, None, Vec::new())
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor<T>, op: impl Op<T> + 'static, inputs: Vec<Var<T>>) -> Self {
        let track = recording() && inputs.iter().any(|v| v.0.requires_grad);
        if track {
            Self::make(value, true, Some(Box::new(op)), inputs)
        } else {
            Self::make(value, false, None, Vec::new())
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.value().clone())
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Back-propagates from this (single element) node.
    ///
    /// With `create_graph` the returned gradients are themselves recorded and
    /// can be differentiated again.
    pub fn backward(&self, create_graph: bool) -> Gradients<T> {
        assert_eq!(self.value().numel(), 1, "backward from non-scalar {:?}", self.shape());
        let seed = Var::constant(Tensor::ones(self.shape()));
        self.backward_with(seed, create_graph)
    }

    pub fn backward_with(&self, seed: Var<T>, create_graph: bool) -> Gradients<T> {
        let mut map: HashMap<usize, Var<T>> = HashMap::new();
        if !self.0.requires_grad {
            return Gradients { map };
        }
        // iterative post-order DFS for a topological order
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.0.id) {
                continue;
            }
            stack.push((v.clone(), true));
            for inp in &v.0.inputs {
                if inp.0.requires_grad && !seen.contains(&inp.0.id) {
                    stack.push((inp.clone(), false));
                }
            }
        }
        let _guard = if create_graph { None } else { Some(NoGradGuard::new()) };
        map.insert(self.0.id, seed);
        for v in order.iter().rev() {
            let Some(op) = v.0.op.as_ref() else { continue };
            let Some(g) = map.get(&v.0.id).cloned() else { continue };
            let grads = op.backward(&v.0.inputs, v, &g);
            for (inp, gi) in v.0.inputs.iter().zip(grads) {
                let Some(gi) = gi else { continue };
                if !inp.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(gi.shape(), inp.shape());
                let acc = match map.remove(&inp.0.id) {
                    Some(prev) => prev.add(&gi).expect("same shape"),
                    None => gi,
                };
                map.insert(inp.0.id, acc);
            }
        }
        Gradients { map }
    }

    // -- shape ops ----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(Var::from_op(value, ReshapeOp { shape: self.shape().to_vec() }, vec![self.clone()]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let value = self.value().broadcast_to(shape)?;
        Ok(Var::from_op(value, BroadcastOp { shape: self.shape().to_vec() }, vec![self.clone()]))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let value = self.value().sum_to(shape)?;
        Ok(Var::from_op(value, SumToOp { shape: self.shape().to_vec() }, vec![self.clone()]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<T> {
        self.sum_to(&[1]).expect("any shape sums to [1]")
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return shape_err(format!("axis {a} of {:?}", self.shape()));
            }
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let n: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / n.max(1) as f64))
    }

    /// Matrix transpose of a rank-2 var.
    pub fn t(&self) -> Result<Var<T>> {
        let value = self.value().transpose2d()?;
        Ok(Var::from_op(value, TransposeOp, vec![self.clone()]))
    }

    // -- elementwise --------------------------------------------------------

    fn binary(&self, other: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        let Some(shape) = broadcast_shape(self.shape(), other.shape()) else {
            return shape_err(format!("cannot broadcast {:?} with {:?}", self.shape(), other.shape()));
        };
        Ok((self.broadcast_to(&shape)?, other.broadcast_to(&shape)?))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.binary(other)?;
        let value = a.value().zip_map(b.value(), |x, y| x + y)?;
        Ok(Var::from_op(value, AddOp, vec![a, b]))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.binary(other)?;
        let value = a.value().zip_map(b.value(), |x, y| x - y)?;
        Ok(Var::from_op(value, SubOp, vec![a, b]))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.binary(other)?;
        let value = a.value().zip_map(b.value(), |x, y| x * y)?;
        Ok(Var::from_op(value, MulOp, vec![a, b]))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = self.binary(other)?;
        let value = a.value().zip_map(b.value(), |x, y| x / y)?;
        Ok(Var::from_op(value, DivOp, vec![a, b]))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        let ct = T::from_f64_lossy(c);
        Var::from_op(self.value().map(|x| x * ct), ScaleOp { c }, vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let ct = T::from_f64_lossy(c);
        Var::from_op(self.value().map(|x| x + ct), AddScalarOp, vec![self.clone()])
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self).expect("same shape")
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.exp()), ExpOp, vec![self.clone()])
    }

    pub fn log(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.ln()), LogOp, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.sqrt()), SqrtOp, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.tanh()), TanhOp, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var<T> {
        Var::from_op(self.value().map(sigmoid), SigmoidOp, vec![self.clone()])
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<T> {
        let v = self.value().map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        Var::from_op(v, SoftplusOp, vec![self.clone()])
    }

    pub fn abs(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.abs()), AbsOp, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::from_f64_lossy(slope);
        let v = self.value().map(|x| if x > T::zero() { x } else { x * s });
        Var::from_op(v, LeakyReluOp { slope }, vec![self.clone()])
    }

    /// `max(x, floor)`; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Var<T> {
        let f = T::from_f64_lossy(floor);
        let v = self.value().map(|x| x.max(f));
        Var::from_op(v, ClampMinOp { floor }, vec![self.clone()])
    }

    // -- linear algebra / convolution ---------------------------------------

    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().matmul(other.value())?;
        Ok(Var::from_op(value, MatMulOp, vec![self.clone(), other.clone()]))
    }

    /// Stride-1 "same" convolution; `w` is `[O,C,k,k]` or per-sample
    /// `[N,O,C,k,k]`.
    pub fn conv2d(&self, w: &Var<T>) -> Result<Var<T>> {
        let per_sample = w.shape().len() == 5;
        let value = tensor::conv2d(self.value(), w.value(), per_sample)?;
        Ok(Var::from_op(value, Conv2dOp { per_sample }, vec![self.clone(), w.clone()]))
    }

    fn flip_swap(&self) -> Result<Var<T>> {
        let value = tensor::flip_swap(self.value())?;
        Ok(Var::from_op(value, FlipSwapOp, vec![self.clone()]))
    }

    fn conv2d_weight_grad(x: &Var<T>, g: &Var<T>, k: usize, per_sample: bool) -> Result<Var<T>> {
        let value = tensor::conv2d_weight_grad(x.value(), g.value(), k, per_sample)?;
        Ok(Var::from_op(value, ConvWeightGradOp { per_sample }, vec![x.clone(), g.clone()]))
    }

    pub fn upsample2x(&self) -> Result<Var<T>> {
        let value = tensor::upsample2x(self.value())?;
        Ok(Var::from_op(value, UpsampleOp, vec![self.clone()]))
    }

    pub fn avgpool2x(&self) -> Result<Var<T>> {
        let value = tensor::avgpool2x(self.value())?;
        Ok(Var::from_op(value, AvgPoolOp, vec![self.clone()]))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

macro_rules! binop_impl {
    ($tr:ident, $m:ident) => {
        impl<T: Scalar> ops::$tr<&Var<T>> for &Var<T> {
            type Output = Var<T>;
            fn $m(self, rhs: &Var<T>) -> Var<T> {
                Var::$m(self, rhs).expect(concat!("shape-compatible operands for ", stringify!($m)))
            }
        }
    };
}
binop_impl!(Add, add);
binop_impl!(Sub, sub);
binop_impl!(Mul, mul);
binop_impl!(Div, div);

impl<T: Scalar> ops::Neg for &Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        Var::neg(self)
    }
}

// ---------------------------------------------------------------------------
// backward rules

fn mask_const<T: Scalar>(x: &Var<T>, f: impl Fn(T) -> T) -> Var<T> {
    Var::constant(x.value().map(f))
}

struct ReshapeOp {
    shape: Vec<usize>,
}
impl<T: Scalar> Op<T> for ReshapeOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.reshape(&self.shape).unwrap())]
    }
}

struct BroadcastOp {
    shape: Vec<usize>,
}
impl<T: Scalar> Op<T> for BroadcastOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.sum_to(&self.shape).unwrap())]
    }
}

struct SumToOp {
    shape: Vec<usize>,
}
impl<T: Scalar> Op<T> for SumToOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.broadcast_to(&self.shape).unwrap())]
    }
}

struct TransposeOp;
impl<T: Scalar> Op<T> for TransposeOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.t().unwrap())]
    }
}

struct AddOp;
impl<T: Scalar> Op<T> for AddOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubOp;
impl<T: Scalar> Op<T> for SubOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), Some(g.neg())]
    }
}

struct MulOp;
impl<T: Scalar> Op<T> for MulOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let ga = i[0].requires_grad().then(|| g * &i[1]);
        let gb = i[1].requires_grad().then(|| g * &i[0]);
        vec![ga, gb]
    }
}

struct DivOp;
impl<T: Scalar> Op<T> for DivOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let ga = i[0].requires_grad().then(|| g / &i[1]);
        let gb = i[1].requires_grad().then(|| -&(&(g * &i[0]) / &(&i[1] * &i[1])));
        vec![ga, gb]
    }
}

struct ScaleOp {
    c: f64,
}
impl<T: Scalar> Op<T> for ScaleOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.scale(self.c))]
    }
}

struct AddScalarOp;
impl<T: Scalar> Op<T> for AddScalarOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone())]
    }
}

struct ExpOp;
impl<T: Scalar> Op<T> for ExpOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g * out)]
    }
}

struct LogOp;
impl<T: Scalar> Op<T> for LogOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g / &i[0])]
    }
}

struct SqrtOp;
impl<T: Scalar> Op<T> for SqrtOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some((g / out).scale(0.5))]
    }
}

struct TanhOp;
impl<T: Scalar> Op<T> for TanhOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let d = out.square().neg().add_scalar(1.0);
        vec![Some(g * &d)]
    }
}

struct SigmoidOp;
impl<T: Scalar> Op<T> for SigmoidOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let d = out * &out.neg().add_scalar(1.0);
        vec![Some(g * &d)]
    }
}

struct SoftplusOp;
impl<T: Scalar> Op<T> for SoftplusOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g * &i[0].sigmoid())]
    }
}

struct AbsOp;
impl<T: Scalar> Op<T> for AbsOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let sign = mask_const(&i[0], |x| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        vec![Some(g * &sign)]
    }
}

struct LeakyReluOp {
    slope: f64,
}
impl<T: Scalar> Op<T> for LeakyReluOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let s = T::from_f64_lossy(self.slope);
        let m = mask_const(&i[0], |x| if x > T::zero() { T::one() } else { s });
        vec![Some(g * &m)]
    }
}

struct ClampMinOp {
    floor: f64,
}
impl<T: Scalar> Op<T> for ClampMinOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let f = T::from_f64_lossy(self.floor);
        let m = mask_const(&i[0], |x| if x > f { T::one() } else { T::zero() });
        vec![Some(g * &m)]
    }
}

struct MatMulOp;
impl<T: Scalar> Op<T> for MatMulOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let ga = i[0].requires_grad().then(|| g.matmul(&i[1].t().unwrap()).unwrap());
        let gb = i[1].requires_grad().then(|| i[0].t().unwrap().matmul(g).unwrap());
        vec![ga, gb]
    }
}

struct Conv2dOp {
    per_sample: bool,
}
impl<T: Scalar> Op<T> for Conv2dOp {
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let (x, w) = (&i[0], &i[1]);
        let k = *w.shape().last().unwrap();
        let gx = x.requires_grad().then(|| g.conv2d(&w.flip_swap().unwrap()).unwrap());
        let gw = w
            .requires_grad()
            .then(|| Var::conv2d_weight_grad(x, g, k, self.per_sample).unwrap());
        vec![gx, gw]
    }
}

struct FlipSwapOp;
impl<T: Scalar> Op<T> for FlipSwapOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.flip_swap().unwrap())]
    }
}

struct ConvWeightGradOp {
    per_sample: bool,
}
impl<T: Scalar> Op<T> for ConvWeightGradOp {
    // out = wgrad(x, gy); upstream `g` has the kernel's shape
    fn backward(&self, i: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let (x, gy) = (&i[0], &i[1]);
        let gx = x.requires_grad().then(|| gy.conv2d(&g.flip_swap().unwrap()).unwrap());
        let ggy = gy.requires_grad().then(|| x.conv2d(g).unwrap());
        let _ = self.per_sample;
        vec![gx, ggy]
    }
}

struct UpsampleOp;
impl<T: Scalar> Op<T> for UpsampleOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.avgpool2x().unwrap().scale(4.0))]
    }
}

struct AvgPoolOp;
impl<T: Scalar> Op<T> for AvgPoolOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.upsample2x().unwrap().scale(0.25))]
    }
}
