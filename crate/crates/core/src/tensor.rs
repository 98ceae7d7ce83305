//! Dense row-major tensors and the raw numeric kernels behind the autodiff ops.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `small` laid out against `big` (0 on broadcast axes).
fn broadcast_strides(small: &[usize], big: &[usize]) -> Option<Vec<usize>> {
    if small.len() > big.len() {
        return None;
    }
    let pad = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        let (ds, db) = (small[i], big[i + pad]);
        if ds == db {
            strides[i + pad] = if ds == 1 { 0 } else { acc };
        } else if ds != 1 {
            return None;
        }
        acc *= ds;
    }
    Some(strides)
}

/// Calls `f(big_offset, small_offset)` for every element of `big`.
fn for_each_broadcast(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(big);
    if big.is_empty() {
        if total == 1 {
            f(0, 0);
        }
        return;
    }
    let rank = big.len();
    let inner = big[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut pos = 0usize;
    while pos < total {
        let mut s = off;
        for _ in 0..inner {
            f(pos, s);
            pos += 1;
            s += inner_stride;
        }
        // advance odometer on the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < big[axis] {
                break;
            }
            off -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return shape_err(format!(
                "{} elements do not fill shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("elementwise {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let Some(strides) = broadcast_strides(&self.shape, shape) else {
            return shape_err(format!("cannot broadcast {:?} to {:?}", self.shape, shape));
        };
        let mut data = Vec::with_capacity(numel(shape));
        for_each_broadcast(shape, &strides, |_, s| data.push(self.data[s]));
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Sums over broadcast axes so the result has `shape` (inverse of
    /// [`Tensor::broadcast_to`]).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let Some(strides) = broadcast_strides(shape, &self.shape) else {
            return shape_err(format!("cannot sum {:?} down to {:?}", self.shape, shape));
        };
        let mut out = vec![T::zero(); numel(shape)];
        for_each_broadcast(&self.shape, &strides, |b, s| out[s] += self.data[b]);
        Ok(Self { shape: shape.to_vec(), data: out })
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return shape_err(format!("matmul {a:?} @ {b:?}"));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), &self.data, false, &other.data, false, T::zero(), &mut out);
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return shape_err(format!("transpose of rank-{} tensor", self.shape.len()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    /// Rows `idx` along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return shape_err("select_rows on scalar");
        };
        let row = numel(rest);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(crate::Error::OutOfRange { what: "row", index: i, len: n });
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let rest = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != rest {
                return shape_err(format!("concat {:?} with {:?}", first.shape, p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

// ---------------------------------------------------------------------------
// convolution kernels (stride 1, odd square kernel, "same" zero padding)

fn conv_dims(x: &[usize], w: &[usize], per_sample: bool) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.len() != 4 {
        return shape_err(format!("conv input must be NCHW, got {x:?}"));
    }
    let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
    let wshape = if per_sample {
        if w.len() != 5 || w[0] != n {
            return shape_err(format!("per-sample conv weight {w:?} for batch {n}"));
        }
        &w[1..]
    } else {
        if w.len() != 4 {
            return shape_err(format!("conv weight must be OCKK, got {w:?}"));
        }
        w
    };
    let (o, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if wc != c || kh != kw || kh % 2 == 0 {
        return shape_err(format!("conv weight {w:?} incompatible with input {x:?}"));
    }
    Ok((n, c, h, wd, o, kh))
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for a in 0..k {
            for b in 0..k {
                let row = &mut cols[((ci * k + a) * k + b) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + a as isize - p as isize;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for j in 0..w {
                        let sj = j as isize + b as isize - p as isize;
                        dst[j] = if sj < 0 || sj >= w as isize { T::zero() } else { src[sj as usize] };
                    }
                }
            }
        }
    }
}

/// `y[n,o,i,j] = sum_{c,a,b} w[o,c,a,b] x[n,c,i+a-p,j+b-p]`.
///
/// With `per_sample` the weight carries a leading batch axis and sample `n`
/// uses `w[n]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, per_sample: bool) -> Result<Tensor<T>> {
    let (n, c, h, wd, o, k) = conv_dims(&x.shape, &w.shape, per_sample)?;
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); n * o * hw];
    let mut cols = vec![T::zero(); ckk * hw];
    for s in 0..n {
        let xs = &x.data[s * c * hw..(s + 1) * c * hw];
        let ws = if per_sample { &w.data[s * o * ckk..(s + 1) * o * ckk] } else { &w.data[..] };
        let ys = &mut out[s * o * hw..(s + 1) * o * hw];
        if k == 1 {
            gemm(o, c, hw, T::one(), ws, false, xs, false, T::zero(), ys);
        } else {
            im2col(xs, c, h, wd, k, &mut cols);
            gemm(o, ckk, hw, T::one(), ws, false, &cols, false, T::zero(), ys);
        }
    }
    Tensor::from_vec(&[n, o, h, wd], out)
}

/// Gradient of [`conv2d`] with respect to its weight, given the input `x`
/// and the output gradient `g`.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    k: usize,
    per_sample: bool,
) -> Result<Tensor<T>> {
    if x.shape.len() != 4 || g.shape.len() != 4 || x.shape[0] != g.shape[0] || x.shape[2..] != g.shape[2..] {
        return shape_err(format!("conv weight grad: input {:?}, grad {:?}", x.shape, g.shape));
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let o = g.shape[1];
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); if per_sample { n * o * ckk } else { o * ckk }];
    let mut cols = vec![T::zero(); ckk * hw];
    for s in 0..n {
        let xs = &x.data[s * c * hw..(s + 1) * c * hw];
        let gs = &g.data[s * o * hw..(s + 1) * o * hw];
        let (dst, beta) = if per_sample {
            (&mut out[s * o * ckk..(s + 1) * o * ckk], T::zero())
        } else {
            (&mut out[..], T::one())
        };
        if k == 1 {
            gemm(o, hw, c, T::one(), gs, false, xs, true, beta, dst);
        } else {
            im2col(xs, c, h, wd, k, &mut cols);
            gemm(o, hw, ckk, T::one(), gs, false, &cols, true, beta, dst);
        }
    }
    let shape = if per_sample { vec![n, o, c, k, k] } else { vec![o, c, k, k] };
    Tensor::from_vec(&shape, out)
}

/// Swaps the in/out channel axes of a (possibly batched) kernel and flips it
/// spatially: `w'[c,o,a,b] = w[o,c,k-1-a,k-1-b]`.
pub fn flip_swap<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let r = w.shape.len();
    if r != 4 && r != 5 {
        return shape_err(format!("flip_swap of {:?}", w.shape));
    }
    let lead = if r == 5 { w.shape[0] } else { 1 };
    let (o, c, k, k2) = (w.shape[r - 4], w.shape[r - 3], w.shape[r - 2], w.shape[r - 1]);
    if k != k2 {
        return shape_err("non-square kernel");
    }
    let kk = k * k;
    let per = o * c * kk;
    let mut out = vec![T::zero(); w.data.len()];
    for l in 0..lead {
        let src = &w.data[l * per..(l + 1) * per];
        let dst = &mut out[l * per..(l + 1) * per];
        for oi in 0..o {
            for ci in 0..c {
                for a in 0..k {
                    for b in 0..k {
                        dst[((ci * o + oi) * k + (k - 1 - a)) * k + (k - 1 - b)] =
                            src[((oi * c + ci) * k + a) * k + b];
                    }
                }
            }
        }
    }
    let mut shape = w.shape.clone();
    shape.swap(r - 4, r - 3);
    Tensor::from_vec(&shape, out)
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape.len() != 4 {
        return shape_err(format!("upsample of {:?}", x.shape));
    }
    let (nc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![T::zero(); nc * 4 * h * w];
    for p in 0..nc {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_vec(&[x.shape[0], x.shape[1], 2 * h, 2 * w], out)
}

/// 2x2 average pooling of an NCHW tensor with even spatial size.
pub fn avgpool2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape.len() != 4 || !x.shape[2].is_multiple_of(2) || !x.shape[3].is_multiple_of(2) {
        return shape_err(format!("avgpool of {:?}", x.shape));
    }
    let (nc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); nc * ho * wo];
    for p in 0..nc {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = (a + b) * quarter;
            }
        }
    }
    Tensor::from_vec(&[x.shape[0], x.shape[1], ho, wo], out)
}
