//! A small style-based generator whose convolutions are [`ModulatedLayer`]s.
//!
//! Block `l`: `[upsample] → conv3x3 → + noise → lrelu → AdaIN(w)`. The image
//! is `tanh(to_rgb(h))` with a modulated 1x1 `to_rgb`. The feature stack holds
//! the AdaIN outputs of every block except the last, whose entry is the
//! pre-tanh `to_rgb` projection, so every modulated layer is covered.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{shape_err, Error, Result};
use crate::hyper::{ClassConditioning, ClassInput, ConditioningConfig, Hypernetwork, PerClassTable};
use crate::modulation::{BatchModulation, ModulatedLayer, ModulationShape};
use crate::nn::{he_std, Conv2d, Ctx, Linear, Mlp, Module, Param, LRELU_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter-name prefix of the source generator.
pub const GEN_PREFIX: &str = "g.";
const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    WeightModulation,
    AdainFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub n_blocks: usize,
    pub base_channels: usize,
    pub output_resolution: usize,
    pub latent_dim: usize,
    pub conditioning_mode: ConditioningMode,
    pub mapping_layers: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            base_channels: 64,
            output_resolution: 32,
            latent_dim: 64,
            conditioning_mode: ConditioningMode::WeightModulation,
            mapping_layers: 4,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.base_channels == 0 || self.latent_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Config("synthesis sizes must be positive".into()));
        }
        let expect = 4usize
            .checked_shl(self.n_blocks as u32 - 1)
            .filter(|r| *r >> (self.n_blocks - 1) == 4)
            .ok_or_else(|| Error::Config(format!("{} blocks is too many", self.n_blocks)))?;
        if self.output_resolution != expect {
            return Err(Error::Config(format!(
                "output_resolution {} does not match {} blocks (expected {expect})",
                self.output_resolution, self.n_blocks
            )));
        }
        Ok(())
    }

    pub fn resolution_of_block(&self, l: usize) -> usize {
        4 << l
    }
}

/// Class-dependent AdaIN terms `g(v; Φ)` added to the style affine outputs.
#[derive(Clone, Debug)]
pub struct AdainFusion<T: Scalar> {
    pub class_net: ClassConditioning<T>,
    /// Per block: (scale term, shift term).
    pub injectors: Vec<(Linear<T>, Linear<T>)>,
}

impl<T: Scalar> AdainFusion<T> {
    /// Class network plus zero injectors, so the fused model starts at the
    /// source model.
    pub fn new<R: Rng + ?Sized>(cfg: &ConditioningConfig, syn: &SynthesisConfig, rng: &mut R) -> Result<Self> {
        let class_net = ClassConditioning::new(cfg, rng)?;
        let d = class_net.d_class();
        let c = syn.base_channels;
        let injectors = (0..syn.n_blocks)
            .map(|l| {
                (
                    Linear::with_std(&format!("cond.fuse.{l}.scale"), d, c, 0.0, rng),
                    Linear::with_std(&format!("cond.fuse.{l}.shift"), d, c, 0.0, rng),
                )
            })
            .collect();
        Ok(Self { class_net, injectors })
    }
}

impl<T: Scalar> Module<T> for AdainFusion<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.class_net.visit(f);
        for (a, b) in &self.injectors {
            a.visit(f);
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.class_net.visit_mut(f);
        for (a, b) in &mut self.injectors {
            a.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

/// How a generator receives class information.
#[derive(Clone, Debug)]
pub enum Conditioning<T: Scalar> {
    None,
    Hyper(Hypernetwork<T>),
    PerClass(PerClassTable<T>),
    AdainFusion(AdainFusion<T>),
}

impl<T: Scalar> Conditioning<T> {
    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Self::None => None,
            Self::Hyper(h) => Some(h.class_net.n_classes()),
            Self::PerClass(t) => Some(t.n_classes()),
            Self::AdainFusion(a) => Some(a.class_net.n_classes()),
        }
    }

    pub fn class_net(&self) -> Option<&ClassConditioning<T>> {
        match self {
            Self::Hyper(h) => Some(&h.class_net),
            Self::AdainFusion(a) => Some(&a.class_net),
            _ => None,
        }
    }
}

/// Class information for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ClassSpec<'a, T: Scalar> {
    /// The unconditional source path.
    None,
    Inputs(&'a [ClassInput]),
    /// Class vectors `[N, d_class]` given directly (class-space paths).
    Vectors(&'a Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct SynthesisBlock<T: Scalar> {
    pub conv: ModulatedLayer<T>,
    /// Per-channel noise strength.
    pub noise_strength: Param<T>,
    /// Fixed noise image `[1, 1, R, R]`, never trained.
    pub noise: Param<T>,
    pub style_scale: Linear<T>,
    pub style_shift: Linear<T>,
}

impl<T: Scalar> Module<T> for SynthesisBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
        f(&self.noise_strength);
        f(&self.noise);
        self.style_scale.visit(f);
        self.style_shift.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        f(&mut self.noise_strength);
        f(&mut self.noise);
        self.style_scale.visit_mut(f);
        self.style_shift.visit_mut(f);
    }
}

/// Per-block activations in block order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T: Scalar> {
    pub blocks: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Output of a graph forward pass.
pub struct SynthesisOutput<T: Scalar> {
    pub image: Var<T>,
    pub features: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub config: SynthesisConfig,
    pub mapping: Mlp<T>,
    pub const_input: Param<T>,
    pub blocks: Vec<SynthesisBlock<T>>,
    pub to_rgb: ModulatedLayer<T>,
    pub conditioning: Conditioning<T>,
}

impl<T: Scalar> Generator<T> {
    /// A fresh unconditional generator with every source parameter trainable
    /// (the noise images excepted).
    pub fn new<R: Rng + ?Sized>(config: SynthesisConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.base_channels, config.latent_dim);
        let mapping = Mlp::new("g.map", d, config.mapping_layers, rng);
        let const_input = Param::new("g.const", Tensor::randn(&[1, c, 4, 4], 1.0, rng));
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for l in 0..config.n_blocks {
            let r = config.resolution_of_block(l);
            let name = format!("g.syn.{l}");
            let mut conv = ModulatedLayer::new(Conv2d::new(&format!("{name}.conv"), c, c, 3, rng))?;
            conv.set_trainable(true);
            let mut style_scale = Linear::with_std(&format!("{name}.style.scale"), d, c, 0.1 * he_std(d), rng);
            style_scale.bias.value = Tensor::ones(&[c]);
            let mut noise = Param::new(format!("{name}.noisebuf"), Tensor::randn(&[1, 1, r, r], 1.0, rng));
            noise.frozen = true;
            blocks.push(SynthesisBlock {
                conv,
                noise_strength: Param::new(format!("{name}.noise"), Tensor::full(&[c], T::from_f64_lossy(0.1))),
                noise,
                style_scale,
                style_shift: Linear::with_std(&format!("{name}.style.shift"), d, c, 0.1 * he_std(d), rng),
            });
        }
        let mut to_rgb = ModulatedLayer::new(Conv2d::new("g.rgb", c, 3, 1, rng))?;
        to_rgb.set_trainable(true);
        Ok(Self { config, mapping, const_input, blocks, to_rgb, conditioning: Conditioning::None })
    }

    /// Freezes every source parameter and refreshes the cached filter
    /// statistics; call once pretraining is over.
    pub fn freeze_source(&mut self) -> Result<()> {
        self.visit_source_mut(&mut |p| p.frozen = true);
        for l in self.modulated_layers_mut() {
            l.refresh_stats()?;
        }
        Ok(())
    }

    /// Unfreezes the modulated layers' `W, b` only (finetuning variant).
    pub fn set_modulated_trainable(&mut self, trainable: bool) {
        for l in self.modulated_layers_mut() {
            l.set_trainable(trainable);
        }
    }

    pub fn refresh_stats(&mut self) -> Result<()> {
        self.modulated_layers_mut().into_iter().try_for_each(|l| l.refresh_stats())
    }

    /// Block convolutions followed by `to_rgb`.
    pub fn modulated_layers(&self) -> Vec<&ModulatedLayer<T>> {
        self.blocks.iter().map(|b| &b.conv).chain(std::iter::once(&self.to_rgb)).collect()
    }

    fn modulated_layers_mut(&mut self) -> Vec<&mut ModulatedLayer<T>> {
        self.blocks.iter_mut().map(|b| &mut b.conv).chain(std::iter::once(&mut self.to_rgb)).collect()
    }

    fn visit_source_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mapping.visit_mut(f);
        f(&mut self.const_input);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.to_rgb.visit_mut(f);
    }

    /// Source parameters only (no conditioning modules).
    pub fn source_state(&self) -> std::collections::BTreeMap<String, Tensor<T>> {
        self.state().into_iter().filter(|(k, _)| k.starts_with(GEN_PREFIX)).collect()
    }

    /// Attaches a cold-initialized hypernetwork.
    pub fn attach_hyper<R: Rng + ?Sized>(&mut self, cfg: &ConditioningConfig, rng: &mut R) -> Result<()> {
        self.require_mode(ConditioningMode::WeightModulation)?;
        let hn = Hypernetwork::new(cfg, &self.modulated_layers(), rng)?;
        self.conditioning = Conditioning::Hyper(hn);
        Ok(())
    }

    /// Attaches a per-class table starting at the source weights.
    pub fn attach_per_class(&mut self, n_classes: usize, shape: ModulationShape) -> Result<()> {
        self.require_mode(ConditioningMode::WeightModulation)?;
        self.conditioning = Conditioning::PerClass(PerClassTable::new(n_classes, &self.modulated_layers(), shape)?);
        Ok(())
    }

    pub fn attach_adain_fusion<R: Rng + ?Sized>(&mut self, cfg: &ConditioningConfig, rng: &mut R) -> Result<()> {
        self.require_mode(ConditioningMode::AdainFusion)?;
        self.conditioning = Conditioning::AdainFusion(AdainFusion::new(cfg, &self.config, rng)?);
        Ok(())
    }

    /// Sets the hypernetwork so that every class reproduces the source.
    pub fn exact_recovery_init(&mut self, shape: ModulationShape) -> Result<()> {
        let layers: Vec<ModulatedLayer<T>> = self.modulated_layers().into_iter().cloned().collect();
        match &mut self.conditioning {
            Conditioning::Hyper(h) => h.exact_recovery_init(&layers.iter().collect::<Vec<_>>(), shape),
            _ => Err(Error::InvalidInput("exact recovery needs a hypernetwork".into())),
        }
    }

    fn require_mode(&self, mode: ConditioningMode) -> Result<()> {
        if self.config.conditioning_mode != mode {
            return Err(Error::InvalidInput(format!(
                "generator configured for {:?}, operation needs {:?}",
                self.config.conditioning_mode, mode
            )));
        }
        Ok(())
    }

    /// `w = mapping(z / rms(z))`.
    fn map(&self, ctx: &Ctx<T>, z: &Var<T>) -> Result<Var<T>> {
        let rms = z.square().mean_axes(&[1])?.add_scalar(NORM_EPS).sqrt();
        self.mapping.forward(ctx, &z.div(&rms)?)
    }

    fn class_vectors(&self, ctx: &Ctx<T>, net: &ClassConditioning<T>, spec: &ClassSpec<T>, n: usize) -> Result<Var<T>> {
        let v = match spec {
            ClassSpec::Inputs(inp) => net.forward(ctx, inp)?,
            ClassSpec::Vectors(v) => Var::constant((*v).clone()),
            ClassSpec::None => unreachable!(),
        };
        if v.shape() != [n, net.d_class()] {
            return shape_err(format!("class vectors {:?} for batch {n} and d_class {}", v.shape(), net.d_class()));
        }
        Ok(v)
    }

    /// Graph forward pass for latents `z: [N, latent_dim]`.
    pub fn forward(&self, ctx: &Ctx<T>, z: &Var<T>, spec: &ClassSpec<T>) -> Result<SynthesisOutput<T>> {
        let n = z.shape()[0];
        if z.shape() != [n, self.config.latent_dim] {
            return shape_err(format!("latent {:?}, expected [N, {}]", z.shape(), self.config.latent_dim));
        }
        let mut mods: Option<Vec<BatchModulation<T>>> = None;
        let mut fusion: Option<(Var<T>, &AdainFusion<T>)> = None;
        match (&self.conditioning, spec) {
            (_, ClassSpec::None) => {}
            (Conditioning::None, _) => return Err(Error::InvalidInput("unconditional generator given a class".into())),
            (Conditioning::Hyper(h), s) => {
                let v = self.class_vectors(ctx, &h.class_net, s, n)?;
                mods = Some(h.modulations(ctx, &v)?);
            }
            (Conditioning::PerClass(t), ClassSpec::Inputs(inp)) => {
                let classes = inp
                    .iter()
                    .map(|i| match i {
                        ClassInput::Target(c) => Ok(*c),
                        ClassInput::Source => Err(Error::InvalidInput("per-class table has no source slot".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if classes.len() != n {
                    return shape_err(format!("{} classes for batch {n}", classes.len()));
                }
                mods = Some(t.modulations(ctx, &classes)?);
            }
            (Conditioning::PerClass(_), _) => {
                return Err(Error::InvalidInput("per-class table takes class indices, not vectors".into()))
            }
            (Conditioning::AdainFusion(a), s) => fusion = Some((self.class_vectors(ctx, &a.class_net, s, n)?, a)),
        }

        let w = self.map(ctx, z)?;
        let c = self.config.base_channels;
        let mut h = ctx.var(&self.const_input).broadcast_to(&[n, c, 4, 4])?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = h.upsample2x()?;
            }
            h = match &mods {
                Some(m) => b.conv.forward_modulated(ctx, &h, &m[l])?,
                None => b.conv.forward_plain(ctx, &h)?,
            };
            let noise = ctx.var(&b.noise).mul(&ctx.var(&b.noise_strength).reshape(&[1, c, 1, 1])?)?;
            h = h.add(&noise)?.leaky_relu(LRELU_SLOPE);
            let mu = h.mean_axes(&[2, 3])?;
            let centered = h.sub(&mu)?;
            let sd = centered.square().mean_axes(&[2, 3])?.add_scalar(NORM_EPS).sqrt();
            let normed = centered.div(&sd)?;
            let mut scale = b.style_scale.forward(ctx, &w)?;
            let mut shift = b.style_shift.forward(ctx, &w)?;
            if let Some((v, a)) = &fusion {
                let (gs, gb) = &a.injectors[l];
                scale = scale.add(&gs.forward(ctx, v)?)?;
                shift = shift.add(&gb.forward(ctx, v)?)?;
            }
            h = normed.mul(&scale.reshape(&[n, c, 1, 1])?)?.add(&shift.reshape(&[n, c, 1, 1])?)?;
            if l + 1 < self.blocks.len() {
                features.push(h.clone());
            }
        }
        let rgb = match &mods {
            Some(m) => self.to_rgb.forward_modulated(ctx, &h, &m[self.blocks.len()])?,
            None => self.to_rgb.forward_plain(ctx, &h)?,
        };
        features.push(rgb.clone());
        Ok(SynthesisOutput { image: rgb.tanh(), features })
    }

    /// Image `[N, 3, R, R]` in `[-1, 1]` and the feature stack, without
    /// building a graph.
    pub fn synthesize(&self, z: &Tensor<T>, spec: &ClassSpec<T>) -> Result<(Tensor<T>, FeatureStack<T>)> {
        no_grad(|| {
            let out = self.forward(&Ctx::inference(), &Var::constant(z.clone()), spec)?;
            let blocks = out.features.iter().map(|f| f.value().clone()).collect();
            Ok((out.image.value().clone(), FeatureStack { blocks }))
        })
    }

    pub fn sample(&self, z: &Tensor<T>, spec: &ClassSpec<T>) -> Result<Tensor<T>> {
        Ok(self.synthesize(z, spec)?.0)
    }

    /// Forward pass of the AdaIN-fusion ablation for class vectors `v`.
    pub fn adain_fusion_forward(&self, z: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_mode(ConditioningMode::AdainFusion)?;
        if !matches!(self.conditioning, Conditioning::AdainFusion(_)) {
            return Err(Error::InvalidInput("no AdaIN-fusion module attached".into()));
        }
        self.sample(z, &ClassSpec::Vectors(v))
    }

    /// `z ~ N(0, I)` of shape `[n, latent_dim]`.
    pub fn sample_latents<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        Tensor::randn(&[n, self.config.latent_dim], 1.0, rng)
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.mapping.visit(f);
        f(&self.const_input);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.to_rgb.visit(f);
        match &self.conditioning {
            Conditioning::None => {}
            Conditioning::Hyper(h) => h.visit(f),
            Conditioning::PerClass(t) => t.visit(f),
            Conditioning::AdainFusion(a) => a.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_source_mut(f);
        match &mut self.conditioning {
            Conditioning::None => {}
            Conditioning::Hyper(h) => h.visit_mut(f),
            Conditioning::PerClass(t) => t.visit_mut(f),
            Conditioning::AdainFusion(a) => a.visit_mut(f),
        }
    }
}
