//! Discriminator with a class head, adversarial losses, R1 and the
//! Barlow-Twins regularizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{one_hot, Conv2d, Ctx, Linear, Module, Param, LRELU_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter-name prefix of the discriminator.
pub const DISC_PREFIX: &str = "d.";
/// Guards the batch normalization inside the cross-correlation against
/// constant feature dimensions.
pub const BN_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum Head<T: Scalar> {
    /// Unconditional fully connected logit.
    Source(Linear<T>),
    /// 3x3 convolution with one channel per class, averaged over positions.
    Class(Conv2d<T>),
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub from_rgb: Conv2d<T>,
    pub blocks: Vec<Conv2d<T>>,
    pub last: Conv2d<T>,
    pub head: Head<T>,
    channels: usize,
}

impl<T: Scalar> Discriminator<T> {
    /// Unconditional discriminator for `resolution`×`resolution` images.
    pub fn new<R: Rng + ?Sized>(resolution: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if resolution < 4 || !resolution.is_power_of_two() || channels == 0 {
            return Err(Error::Config(format!("discriminator for resolution {resolution}, channels {channels}")));
        }
        let n_down = (resolution / 4).trailing_zeros() as usize;
        Ok(Self {
            from_rgb: Conv2d::new("d.rgb", 3, channels, 1, rng),
            blocks: (0..n_down).map(|i| Conv2d::new(&format!("d.b{i}"), channels, channels, 3, rng)).collect(),
            last: Conv2d::new("d.last", channels, channels, 3, rng),
            head: Head::Source(Linear::new("d.fc", channels * 16, 1, rng)),
            channels,
        })
    }

    /// Replaces the final fully connected layer with a fresh `n_classes`
    /// channel convolution; the trunk is kept.
    pub fn with_class_head<R: Rng + ?Sized>(mut self, n_classes: usize, rng: &mut R) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("class head needs at least one class".into()));
        }
        self.head = Head::Class(Conv2d::new("d.cls", self.channels, n_classes, 3, rng));
        Ok(self)
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.head {
            Head::Source(_) => None,
            Head::Class(c) => Some(c.out_channels()),
        }
    }

    /// Trunk activations entering the head, `[N, C, 4, 4]`.
    pub fn trunk(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = self.from_rgb.forward(ctx, x)?.leaky_relu(LRELU_SLOPE);
        for b in &self.blocks {
            h = b.forward(ctx, &h)?.leaky_relu(LRELU_SLOPE).avgpool2x()?;
        }
        Ok(self.last.forward(ctx, &h)?.leaky_relu(LRELU_SLOPE))
    }

    /// Flattened trunk activations `[N, 16 C]` (the contrastive feature tap).
    pub fn features(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.trunk(ctx, x)?;
        let n = h.shape()[0];
        h.reshape(&[n, self.channels * 16])
    }

    /// Per-class logits `[N, N_c]` of the class head.
    pub fn class_logits(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let Head::Class(conv) = &self.head else {
            return Err(Error::InvalidInput("discriminator has no class head".into()));
        };
        let h = self.trunk(ctx, x)?;
        let n = h.shape()[0];
        conv.forward(ctx, &h)?.mean_axes(&[2, 3])?.reshape(&[n, conv.out_channels()])
    }

    /// Logit `[N]` for each image: the class channel `c[n]` of the class head,
    /// or the unconditional logit when `classes` is `None`.
    pub fn logit(&self, ctx: &Ctx<T>, x: &Var<T>, classes: Option<&[usize]>) -> Result<Var<T>> {
        let n = x.shape()[0];
        match (&self.head, classes) {
            (Head::Source(fc), None) => {
                let f = self.features(ctx, x)?;
                fc.forward(ctx, &f)?.reshape(&[n])
            }
            (Head::Class(conv), Some(c)) => {
                if c.len() != n {
                    return shape_err(format!("{} labels for {n} images", c.len()));
                }
                let sel = one_hot::<T>(c, conv.out_channels())?;
                self.class_logits(ctx, x)?.mul(&sel)?.sum_axes(&[1])?.reshape(&[n])
            }
            (Head::Source(_), Some(_)) => Err(Error::InvalidInput("unconditional discriminator given labels".into())),
            (Head::Class(_), None) => Err(Error::InvalidInput("class-headed discriminator needs labels".into())),
        }
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.from_rgb.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.last.visit(f);
        match &self.head {
            Head::Source(l) => l.visit(f),
            Head::Class(c) => c.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.from_rgb.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.last.visit_mut(f);
        match &mut self.head {
            Head::Source(l) => l.visit_mut(f),
            Head::Class(c) => c.visit_mut(f),
        }
    }
}

/// Class-channel logits without building a graph.
pub fn discriminator_logit<T: Scalar>(d: &Discriminator<T>, x: &Tensor<T>, c: &[usize]) -> Result<Tensor<T>> {
    crate::autograd::no_grad(|| Ok(d.logit(&Ctx::inference(), &Var::constant(x.clone()), Some(c))?.value().clone()))
}

/// Discriminator loss `E softplus(−D(x)) + E softplus(D(G(z)))`.
pub fn d_gan_loss<T: Scalar>(real_logits: &Var<T>, fake_logits: &Var<T>) -> Result<Var<T>> {
    real_logits.neg().softplus().mean().add(&fake_logits.softplus().mean())
}

/// Non-saturating generator loss `E softplus(−D(G(z)))`.
pub fn g_gan_loss<T: Scalar>(fake_logits: &Var<T>) -> Var<T> {
    fake_logits.neg().softplus().mean()
}

/// `(loss_D, loss_G)` for given logits.
pub fn gan_loss<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Result<(f64, f64)> {
    let (r, f) = (Var::constant(real_logits.clone()), Var::constant(fake_logits.clone()));
    let ld = d_gan_loss(&r, &f)?.item().as_f64();
    let lg = g_gan_loss(&f).item().as_f64();
    if !ld.is_finite() || !lg.is_finite() {
        return Err(Error::Divergence(format!("GAN loss not finite (D {ld}, G {lg})")));
    }
    Ok((ld, lg))
}

/// `(γ/2) · E ‖∇ₓ D(x, c)‖²` as a graph node differentiable in the
/// discriminator parameters tracked by `ctx`.
pub fn r1_penalty<T: Scalar>(
    d: &Discriminator<T>,
    ctx: &Ctx<T>,
    real: &Tensor<T>,
    classes: Option<&[usize]>,
    gamma: f64,
) -> Result<Var<T>> {
    let x = Var::leaf(real.clone(), true);
    let logits = d.logit(ctx, &x, classes)?;
    let grads = logits.sum().backward(true);
    let n = real.shape()[0];
    let Some(gx) = grads.get(&x) else {
        return Ok(Var::scalar(T::zero()));
    };
    let per_sample = gx.square().reshape(&[n, real.numel() / n])?.sum_axes(&[1])?;
    Ok(per_sample.mean().scale(gamma / 2.0))
}

/// Per-dimension batch normalization with population statistics.
fn batch_normalize<T: Scalar>(z: &Var<T>) -> Result<Var<T>> {
    let centered = z.sub(&z.mean_axes(&[0])?)?;
    let sd = centered.square().mean_axes(&[0])?.add_scalar(BN_EPS).sqrt();
    centered.div(&sd)
}

/// `C_ij = (1/N) Σ_n ẑ_A[n,i] ẑ_B[n,j]` of batch-normalized features.
pub fn cross_correlation_var<T: Scalar>(za: &Var<T>, zb: &Var<T>) -> Result<Var<T>> {
    let (sa, sb) = (za.shape(), zb.shape());
    if sa.len() != 2 || sa != sb {
        return shape_err(format!("feature batches {sa:?} and {sb:?}"));
    }
    if sa[0] < 2 {
        return Err(Error::InvalidInput(format!("cross-correlation needs at least 2 samples, got {}", sa[0])));
    }
    let n = sa[0] as f64;
    Ok(batch_normalize(za)?.t()?.matmul(&batch_normalize(zb)?)?.scale(1.0 / n))
}

pub fn cross_correlation<T: Scalar>(za: &Tensor<T>, zb: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(cross_correlation_var(&Var::constant(za.clone()), &Var::constant(zb.clone()))?.value().clone())
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn barlow_twins_loss_var<T: Scalar>(c: &Var<T>, lambda_offdiag: f64) -> Result<Var<T>> {
    let s = c.shape();
    if s.len() != 2 || s[0] != s[1] {
        return shape_err(format!("cross-correlation must be square, got {s:?}"));
    }
    let d = s[0];
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = T::one();
    }
    let off_mask = Var::constant(eye.map(|v| T::one() - v));
    let eye = Var::constant(eye);
    let on = eye.sub(&c.mul(&eye)?)?.square().sum();
    let off = c.mul(&off_mask)?.square().sum().scale(lambda_offdiag);
    on.add(&off)
}

pub fn barlow_twins_loss<T: Scalar>(c: &Tensor<T>, lambda_offdiag: f64) -> Result<f64> {
    Ok(barlow_twins_loss_var(&Var::constant(c.clone()), lambda_offdiag)?.item().as_f64())
}

/// The invariance term `Σ_i (1 − C_ii)²` alone.
pub fn invariance_term<T: Scalar>(c: &Tensor<T>) -> Result<f64> {
    barlow_twins_loss(c, 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub lambda_offdiag: f64,
    pub lambda_contr: f64,
    pub augment: AugmentConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { lambda_offdiag: 5e-3, lambda_contr: 1e-3, augment: AugmentConfig::default() }
    }
}

impl ContrastiveConfig {
    /// Name of the representation the loss is computed on.
    pub const FEATURE_TAP: &'static str = "trunk_output_flattened";
}

/// Barlow-Twins loss on two augmented views of `x` through the trunk.
fn views_loss<T: Scalar, R: Rng + ?Sized>(
    d: &Discriminator<T>,
    ctx: &Ctx<T>,
    x: &Tensor<T>,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Var<T>> {
    let a = augment_batch(x, &cfg.augment, rng)?;
    let b = augment_batch(x, &cfg.augment, rng)?;
    let fa = d.features(ctx, &Var::constant(a))?;
    let fb = d.features(ctx, &Var::constant(b))?;
    barlow_twins_loss_var(&cross_correlation_var(&fa, &fb)?, cfg.lambda_offdiag)
}

/// `L_contr` over real and fake images (sum of the two Barlow-Twins losses).
/// The fake batch is a plain tensor, so no gradient can reach the generator.
pub fn contrastive_step<T: Scalar, R: Rng + ?Sized>(
    d: &Discriminator<T>,
    ctx: &Ctx<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Var<T>> {
    if real.shape()[0] < 2 || fake.shape()[0] < 2 {
        return Err(Error::InvalidInput("contrastive loss needs batches of at least 2".into()));
    }
    views_loss(d, ctx, real, cfg, rng)?.add(&views_loss(d, ctx, fake, cfg, rng)?)
}
