//! Named parameters, graph binding and the plain layers shared by the
//! generator and discriminator.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Leaky-ReLU slope used throughout the networks.
pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    name: String,
    pub value: Tensor<T>,
    /// Frozen parameters are never bound for gradient tracking.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value, frozen: false }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Anything owning named parameters.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn state(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        out
    }

    /// Overwrites every parameter from `state`; all names must be present
    /// with matching shapes.
    fn load_state(&mut self, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match state.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => {
                    err = Some(Error::Shape(format!(
                        "parameter {} has shape {:?}, state holds {:?}",
                        p.name,
                        p.value.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::InvalidInput(format!("missing parameter {}", p.name))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut(&mut |p| p.frozen = frozen);
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

type Selector<'a, T> = Box<dyn Fn(&Param<T>) -> bool + 'a>;

/// Binds parameters into a graph, deciding which become tracked leaves.
pub struct Ctx<'a, T: Scalar> {
    track: Selector<'a, T>,
    bound: RefCell<HashMap<String, Var<T>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Tracks nothing; forward passes build no graph through parameters.
    pub fn inference() -> Self {
        Self::tracking(|_| false)
    }

    /// Tracks every non-frozen parameter accepted by `select`.
    pub fn tracking(select: impl Fn(&Param<T>) -> bool + 'a) -> Self {
        Self { track: Box::new(select), bound: RefCell::new(HashMap::new()) }
    }

    /// Tracks every non-frozen parameter whose name starts with one of
    /// `prefixes`.
    pub fn prefixes(prefixes: &'a [&'a str]) -> Self {
        Self::tracking(move |p| prefixes.iter().any(|pre| p.name.starts_with(pre)))
    }

    pub fn var(&self, p: &Param<T>) -> Var<T> {
        if let Some(v) = self.bound.borrow().get(&p.name) {
            return v.clone();
        }
        let tracked = !p.frozen && (self.track)(p);
        let v = Var::leaf(p.value.clone(), tracked);
        self.bound.borrow_mut().insert(p.name.clone(), v.clone());
        v
    }

    /// Names of the parameters bound as tracked leaves so far.
    pub fn tracked_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.bound.borrow().iter().filter(|(_, v)| v.requires_grad()).map(|(k, _)| k.clone()).collect();
        names.sort();
        names
    }

    /// Gradients of all tracked parameters (zeros when unreached).
    pub fn grads(&self, g: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), g.value_or_zeros(v)))
            .collect()
    }
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self::with_std(name, d_in, d_out, he_std(d_in), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[d_out, d_in], std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `x @ W^T + b` for `x: [N, d_in]`.
    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.var(&self.weight);
        let b = ctx.var(&self.bias);
        x.matmul(&w.t()?)?.add(&b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Plain stride-1 same-padding convolution.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[c_out, c_in, k, k], he_std(c_in * k * k), rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.var(&self.weight);
        let b = ctx.var(&self.bias).reshape(&[1, self.out_channels(), 1, 1])?;
        x.conv2d(&w)?.add(&b)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Stack of fully connected layers with leaky-ReLU between them (the last
/// layer is linear).
#[derive(Clone, Debug)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth).map(|i| Linear::new(&format!("{name}.{i}"), width, width, rng)).collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(ctx, &h)?;
            if i + 1 < self.layers.len() {
                h = h.leaky_relu(LRELU_SLOPE);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// One-hot rows for `labels` as a constant `[N, n]` var.
pub fn one_hot<T: Scalar>(labels: &[usize], n: usize) -> Result<Var<T>> {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (r, &c) in labels.iter().enumerate() {
        if c >= n {
            return Err(Error::OutOfRange { what: "class", index: c, len: n });
        }
        t.data_mut()[r * n + c] = T::one();
    }
    Ok(Var::constant(t))
}
