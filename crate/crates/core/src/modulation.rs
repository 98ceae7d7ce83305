//! Frozen-weight normalization and adaptive filter modulation.
//!
//! A pretrained layer `h(x) = W x + b` is re-styled as
//! `ŵ = γ ⊙ (W - μ) / σ + β`, `b̂ = b + Δb`, where `μ`, `σ` are the per-filter
//! mean and (population) standard deviation of the frozen `W`.

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Ctx, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Lower clamp on per-filter standard deviations.
pub const STAT_EPS: f64 = 1e-8;

/// How many modulation coefficients a layer receives per (γ, β).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationShape {
    /// One γ and one β per output filter, broadcast over the filter.
    #[default]
    PerFilter,
    /// One γ and one β per weight entry.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

/// Per-output-filter mean and clamped population std of `w`
/// (`[out, ...]`, every trailing axis belongs to the filter).
pub fn compute_weight_stats<T: Scalar>(w: &Tensor<T>) -> Result<WeightStats<T>> {
    if w.numel() == 0 || w.shape().is_empty() {
        return Err(Error::InvalidInput("weight statistics of an empty tensor".into()));
    }
    let out = w.shape()[0];
    let fan = w.numel() / out;
    let mut mean = Vec::with_capacity(out);
    let mut std = Vec::with_capacity(out);
    let eps = T::from_f64_lossy(STAT_EPS);
    for row in w.data().chunks(fan) {
        let n = T::from_usize_lossy(fan);
        // exact mean for constant filters, otherwise rounding noise gets
        // amplified by the 1/STAT_EPS scale
        let mu = if row.iter().all(|&v| v == row[0]) { row[0] } else { row.iter().copied().sum::<T>() / n };
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        mean.push(mu);
        std.push(var.sqrt().max(eps));
    }
    Ok(WeightStats { mean: Tensor::from_vec(&[out], mean)?, std: Tensor::from_vec(&[out], std)? })
}

/// Modulation coefficients for one layer and one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams<T: Scalar> {
    /// `[out]` (per filter) or the weight's full shape.
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// `[out]`
    pub delta_bias: Tensor<T>,
}

/// A pretrained convolution (or fully connected layer, `k = 1`) whose weights
/// stay frozen while conditions re-style them.
#[derive(Clone, Debug)]
pub struct ModulatedLayer<T: Scalar> {
    pub base: Conv2d<T>,
    stats: WeightStats<T>,
}

impl<T: Scalar> ModulatedLayer<T> {
    /// Wraps a pretrained layer, freezing it.
    pub fn new(mut base: Conv2d<T>) -> Result<Self> {
        base.set_frozen(true);
        let stats = compute_weight_stats(&base.weight.value)?;
        Ok(Self { base, stats })
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || bias.shape() != [ws[0]] {
            return shape_err(format!("layer weight {:?} / bias {:?}", ws, bias.shape()));
        }
        Self::new(Conv2d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    pub fn stats(&self) -> &WeightStats<T> {
        &self.stats
    }

    pub fn out_channels(&self) -> usize {
        self.base.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.base.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.base.weight.value.shape()[2]
    }

    /// Number of weight entries per output filter.
    pub fn fan_in(&self) -> usize {
        self.base.weight.value.numel() / self.out_channels()
    }

    /// Size of γ (and of β) for the given modulation shape.
    pub fn modulation_width(&self, shape: ModulationShape) -> usize {
        match shape {
            ModulationShape::PerFilter => self.out_channels(),
            ModulationShape::Full => self.base.weight.value.numel(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        !self.base.weight.frozen
    }

    /// Unfreezes (or refreezes) the source weight and bias.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.base.set_frozen(!trainable);
    }

    /// Recomputes μ, σ after the weight changed.
    pub fn refresh_stats(&mut self) -> Result<()> {
        self.stats = compute_weight_stats(&self.base.weight.value)?;
        Ok(())
    }

    /// `w̃ = (W - μ) / σ`, per filter.
    pub fn normalize_weight(&self) -> Tensor<T> {
        let fan = self.fan_in();
        let mut out = self.base.weight.value.clone();
        for (o, row) in out.data_mut().chunks_mut(fan).enumerate() {
            let (mu, sd) = (self.stats.mean.data()[o], self.stats.std.data()[o]);
            row.iter_mut().for_each(|v| *v = (*v - mu) / sd);
        }
        out
    }

    /// Identity coefficients on the normalized weight (`γ = 1, β = 0`).
    pub fn identity_modulation(&self, shape: ModulationShape) -> ModulationParams<T> {
        let width = self.modulation_width(shape);
        ModulationParams {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
            delta_bias: Tensor::zeros(&[self.out_channels()]),
        }
    }

    /// Coefficients that reconstruct the source layer (`γ = σ, β = μ`).
    pub fn recovery_modulation(&self, shape: ModulationShape) -> ModulationParams<T> {
        let (gamma, beta) = match shape {
            ModulationShape::PerFilter => (self.stats.std.clone(), self.stats.mean.clone()),
            ModulationShape::Full => {
                let full = [self.out_channels(), self.fan_in()];
                let g = self.stats.std.reshape(&[full[0], 1]).unwrap().broadcast_to(&full).unwrap();
                let b = self.stats.mean.reshape(&[full[0], 1]).unwrap().broadcast_to(&full).unwrap();
                (g.reshape(&[g.numel()]).unwrap(), b.reshape(&[b.numel()]).unwrap())
            }
        };
        ModulationParams { gamma, beta, delta_bias: Tensor::zeros(&[self.out_channels()]) }
    }

    fn coefficient_view(&self, t: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
        let (o, fan) = (self.out_channels(), self.fan_in());
        if t.numel() == o {
            t.reshape(&[o, 1])
        } else if t.numel() == o * fan {
            t.reshape(&[o, fan])
        } else {
            shape_err(format!("{what} of shape {:?} does not fit weight {:?}", t.shape(), self.base.weight.value.shape()))
        }
    }

    /// `(ŵ, b̂)` for one condition.
    pub fn apply_modulation(&self, p: &ModulationParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (o, fan) = (self.out_channels(), self.fan_in());
        let gamma = self.coefficient_view(&p.gamma, "gamma")?.broadcast_to(&[o, fan])?;
        let beta = self.coefficient_view(&p.beta, "beta")?.broadcast_to(&[o, fan])?;
        if p.delta_bias.numel() != o {
            return shape_err(format!("delta bias {:?} for {o} filters", p.delta_bias.shape()));
        }
        let wn = self.normalize_weight();
        let w_hat: Vec<T> = wn
            .data()
            .iter()
            .zip(gamma.data().iter().zip(beta.data()))
            .map(|(&w, (&g, &b))| g * w + b)
            .collect();
        let b_hat = self.base.bias.value.zip_map(&p.delta_bias.reshape(&[o])?, |b, d| b + d)?;
        Ok((Tensor::from_vec(self.base.weight.value.shape(), w_hat)?, b_hat))
    }

    /// Applies the modulated layer to `x` (`[N, C, H, W]`, or `[N, C]` for a
    /// 1x1 layer used as fully connected).
    pub fn modulated_forward(&self, p: &ModulationParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (w_hat, b_hat) = self.apply_modulation(p)?;
        apply_layer(&w_hat, &b_hat, x)
    }

    /// The unmodulated source layer on a graph input.
    pub fn forward_plain(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.base.forward(ctx, x)
    }

    /// `w̃` as a graph node: constant while frozen, recomputed from the tracked
    /// weight otherwise.
    fn normalized_weight_var(&self, ctx: &Ctx<T>) -> Result<Var<T>> {
        let w = ctx.var(&self.base.weight);
        if !w.requires_grad() {
            return Ok(Var::constant(self.normalize_weight()));
        }
        let axes = [1, 2, 3];
        let mu = w.mean_axes(&axes)?;
        let centered = w.sub(&mu)?;
        let sd = centered.square().mean_axes(&axes)?.clamp_min(STAT_EPS * STAT_EPS).sqrt();
        centered.div(&sd)
    }

    /// Per-sample modulated forward: sample `n` of `x` uses row `n` of every
    /// coefficient in `m`.
    pub fn forward_modulated(&self, ctx: &Ctx<T>, x: &Var<T>, m: &BatchModulation<T>) -> Result<Var<T>> {
        let n = x.shape()[0];
        let ws = self.base.weight.value.shape().to_vec();
        let (o, fan) = (self.out_channels(), self.fan_in());
        let wn = self.normalized_weight_var(ctx)?.reshape(&[1, o, fan])?;
        let width = m.gamma.shape()[1];
        let coef_shape = if width == o { [n, o, 1] } else { [n, o, fan] };
        if m.gamma.shape()[0] != n || m.beta.shape() != m.gamma.shape() || (width != o && width != o * fan) {
            return shape_err(format!("modulation {:?} for batch {n} and weight {:?}", m.gamma.shape(), ws));
        }
        let gamma = m.gamma.reshape(&coef_shape)?;
        let beta = m.beta.reshape(&coef_shape)?;
        let w_hat = gamma.mul(&wn)?.add(&beta)?.reshape(&[n, ws[0], ws[1], ws[2], ws[3]])?;
        let bias = ctx.var(&self.base.bias).reshape(&[1, o])?.add(&m.delta_bias)?.reshape(&[n, o, 1, 1])?;
        x.conv2d(&w_hat)?.add(&bias)
    }
}

impl<T: Scalar> Module<T> for ModulatedLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.base.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.base.visit_mut(f)
    }
}

/// Modulation coefficients for a batch: row `n` belongs to sample `n`.
#[derive(Clone, Debug)]
pub struct BatchModulation<T: Scalar> {
    /// `[N, width]`
    pub gamma: Var<T>,
    /// `[N, width]`
    pub beta: Var<T>,
    /// `[N, out]`
    pub delta_bias: Var<T>,
}

impl<T: Scalar> BatchModulation<T> {
    /// The same coefficients repeated for `n` samples, as constants.
    pub fn repeat(p: &ModulationParams<T>, n: usize) -> Result<Self> {
        let rep = |t: &Tensor<T>| -> Result<Var<T>> {
            Ok(Var::constant(t.reshape(&[1, t.numel()])?.broadcast_to(&[n, t.numel()])?))
        };
        Ok(Self { gamma: rep(&p.gamma)?, beta: rep(&p.beta)?, delta_bias: rep(&p.delta_bias)? })
    }
}

/// A plain layer `(w, b)` applied to `x`.
pub fn apply_layer<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let o = w.shape()[0];
    let k = w.shape()[2];
    match x.shape().len() {
        2 if k == 1 => {
            let n = x.shape()[0];
            let y = apply_layer(w, b, &x.reshape(&[n, x.shape()[1], 1, 1])?)?;
            y.reshape(&[n, o])
        }
        4 => {
            let y = tensor::conv2d(x, w, false)?;
            let bias = b.reshape(&[1, o, 1, 1])?.broadcast_to(y.shape())?;
            y.zip_map(&bias, |a, c| a + c)
        }
        _ => shape_err(format!("layer input {:?} for weight {:?}", x.shape(), w.shape())),
    }
}

/// Convenience: graph-free modulated forward on a batch with shared
/// coefficients.
pub fn modulated_forward<T: Scalar>(
    layer: &ModulatedLayer<T>,
    p: &ModulationParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    no_grad(|| layer.modulated_forward(p, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_from(rows: &[&[f64]]) -> ModulatedLayer<f64> {
        let o = rows.len();
        let fan = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ModulatedLayer::from_parts("l", Tensor::from_f64(&[o, fan, 1, 1], &data).unwrap(), Tensor::zeros(&[o])).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize) -> ModulatedLayer<f64> {
        ModulatedLayer::from_parts(
            "l",
            Tensor::randn(&[o, c, k, k], 0.3, rng).map(|v| v + 0.05),
            Tensor::randn(&[o], 0.1, rng),
        )
        .unwrap()
    }

    #[test]
    fn stats_of_two_filters() {
        // brute force: mean and population std of each row
        let l = layer_from(&[&[1.0, 3.0], &[2.0, 4.0]]);
        let s = l.stats();
        assert_eq!(s.mean.data(), &[2.0, 3.0]);
        assert_eq!(s.std.data(), &[1.0, 1.0]);
    }

    #[test]
    fn standardized_filters_have_identity_stats() {
        let l = layer_from(&[&[1.0, -1.0, 1.0, -1.0]]);
        assert_eq!(l.stats().mean.data(), &[0.0]);
        assert_eq!(l.stats().std.data(), &[1.0]);
        assert_eq!(l.normalize_weight(), l.base.weight.value);
    }

    #[test]
    fn constant_filter_takes_the_clamp_path() {
        let l = layer_from(&[&[0.7, 0.7, 0.7]]);
        assert_eq!(l.stats().std.data(), &[STAT_EPS]);
        assert!(l.normalize_weight().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_weight_is_rejected() {
        assert!(compute_weight_stats(&Tensor::<f64>::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn normalize_single_filter() {
        let l = layer_from(&[&[1.0, 3.0]]);
        assert_eq!(l.normalize_weight().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalized_filters_have_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = random_layer(&mut rng, 4, 3, 3);
        let s = compute_weight_stats(&l.normalize_weight()).unwrap();
        assert!(s.mean.data().iter().all(|m| m.abs() < 1e-6));
        assert!(s.std.data().iter().all(|d| (d - 1.0).abs() < 1e-6));
    }

    #[test]
    fn identity_and_recovery_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_layer(&mut rng, 3, 2, 3);
        for shape in [ModulationShape::PerFilter, ModulationShape::Full] {
            let (w, b) = l.apply_modulation(&l.identity_modulation(shape)).unwrap();
            assert_eq!(w, l.normalize_weight());
            assert_eq!(b, l.base.bias.value);
            let (w, b) = l.apply_modulation(&l.recovery_modulation(shape)).unwrap();
            assert!(w.max_abs_diff(&l.base.weight.value) < 1e-12);
            assert_eq!(b, l.base.bias.value);
        }
    }

    #[test]
    fn random_modulation_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layer_from(&[&[0.3, -1.2], &[2.0, 0.5], &[-0.7, -0.1]]);
        let p = ModulationParams {
            gamma: Tensor::randn(&[3], 1.0, &mut rng),
            beta: Tensor::randn(&[3], 1.0, &mut rng),
            delta_bias: Tensor::randn(&[3], 1.0, &mut rng),
        };
        let (w, b) = l.apply_modulation(&p).unwrap();
        let raw = l.base.weight.value.data();
        for o in 0..3 {
            let row = &raw[o * 2..o * 2 + 2];
            let mu = (row[0] + row[1]) / 2.0;
            let sd = (((row[0] - mu).powi(2) + (row[1] - mu).powi(2)) / 2.0).sqrt();
            for i in 0..2 {
                let expect = p.gamma.data()[o] * (row[i] - mu) / sd + p.beta.data()[o];
                assert!((w.data()[o * 2 + i] - expect).abs() < 1e-12);
            }
            assert!((b.data()[o] - p.delta_bias.data()[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_coefficients_are_rejected() {
        let l = layer_from(&[&[1.0, 2.0], &[3.0, 5.0]]);
        let mut p = l.identity_modulation(ModulationShape::PerFilter);
        p.gamma = Tensor::ones(&[3]);
        assert!(matches!(l.apply_modulation(&p), Err(Error::Shape(_))));
        let mut p = l.identity_modulation(ModulationShape::PerFilter);
        p.delta_bias = Tensor::ones(&[1]);
        assert!(l.apply_modulation(&p).is_err());
    }

    #[test]
    fn fully_connected_degenerate_case() {
        let l = layer_from(&[&[1.0, 3.0], &[2.0, 5.0]]);
        let x = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        let y = modulated_forward(&l, &l.recovery_modulation(ModulationShape::PerFilter), &x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!((y.data()[0] - 4.0).abs() < 1e-12 && (y.data()[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn batched_graph_forward_matches_per_sample_tensor_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_layer(&mut rng, 4, 3, 3);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let ps: Vec<_> = (0..2)
            .map(|_| ModulationParams {
                gamma: Tensor::randn(&[4], 1.0, &mut rng),
                beta: Tensor::randn(&[4], 0.1, &mut rng),
                delta_bias: Tensor::randn(&[4], 1.0, &mut rng),
            })
            .collect();
        let stack = |f: fn(&ModulationParams<f64>) -> &Tensor<f64>| {
            let rows: Vec<Tensor<f64>> = ps.iter().map(|p| f(p).reshape(&[1, 4]).unwrap()).collect();
            Var::constant(Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap())
        };
        let m = BatchModulation { gamma: stack(|p| &p.gamma), beta: stack(|p| &p.beta), delta_bias: stack(|p| &p.delta_bias) };
        let y = l.forward_modulated(&Ctx::inference(), &Var::constant(x.clone()), &m).unwrap();
        for s in 0..2 {
            let ys = modulated_forward(&l, &ps[s], &x.select_rows(&[s]).unwrap()).unwrap();
            assert!(ys.max_abs_diff(&y.value().select_rows(&[s]).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn trainable_weight_normalization_in_graph_matches_tensor_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = random_layer(&mut rng, 3, 2, 3);
        l.set_trainable(true);
        let ctx = Ctx::tracking(|_| true);
        let m = BatchModulation::repeat(&l.identity_modulation(ModulationShape::PerFilter), 1).unwrap();
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let y = l.forward_modulated(&ctx, &Var::constant(x.clone()), &m).unwrap();
        let expect = modulated_forward(&l, &l.identity_modulation(ModulationShape::PerFilter), &x).unwrap();
        assert!(y.value().max_abs_diff(&expect) < 1e-12);
        assert!(y.requires_grad());
    }
}
