//! Class embedding network and hypernetwork projectors that turn a class
//! vector into per-layer modulation coefficients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{shape_err, Error, Result};
use crate::modulation::{BatchModulation, ModulatedLayer, ModulationParams, ModulationShape};
use crate::nn::{one_hot, Ctx, Linear, Module, Param, LRELU_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter-name prefix of everything added on top of the source generator.
pub const COND_PREFIX: &str = "cond.";
/// Prefix of the class network's fully connected layers (reduced lr).
pub const CLASS_FC_PREFIX: &str = "cond.class.fc.";

/// What the class network receives while self-aligning to the source model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceClassInput {
    /// A reserved embedding row (slot 0); target classes use slots `1..=N_c`.
    #[default]
    DedicatedSlot,
    /// A vector of ones fed in place of an embedding row.
    OnesVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditioningConfig {
    pub n_classes: usize,
    pub d_embed: usize,
    pub d_class: usize,
    /// Fully connected layers after the embedding; 0 uses the learned
    /// embedding directly as the class vector.
    pub n_fc: usize,
    pub modulation_shape: ModulationShape,
    /// Learning-rate multiplier of the class network's FC layers.
    pub class_lr_scale: f64,
    /// Std of the projector weights under cold initialization.
    pub cold_init_std: f64,
    pub source_input: SourceClassInput,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            d_embed: 64,
            d_class: 64,
            n_fc: 4,
            modulation_shape: ModulationShape::PerFilter,
            class_lr_scale: 0.01,
            cold_init_std: 1e-4,
            source_input: SourceClassInput::DedicatedSlot,
        }
    }
}

/// Which conditioning input a sample gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassInput {
    /// Target class `i` in `0..N_c`.
    Target(usize),
    /// The source-domain input used during self-alignment.
    Source,
}

/// Embedding table plus class network `C`: class index → class vector `v`.
#[derive(Clone, Debug)]
pub struct ClassConditioning<T: Scalar> {
    pub embedding: Param<T>,
    pub fc: Vec<Linear<T>>,
    n_classes: usize,
    source_input: SourceClassInput,
}

impl<T: Scalar> ClassConditioning<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ConditioningConfig, rng: &mut R) -> Result<Self> {
        if cfg.n_classes == 0 || cfg.d_class == 0 || cfg.d_embed == 0 {
            return Err(Error::Config("class network needs positive sizes".into()));
        }
        if cfg.n_fc == 0 && cfg.d_embed != cfg.d_class {
            return Err(Error::Config("without FC layers the embedding width must equal d_class".into()));
        }
        let embedding = Param::new("cond.class.embed", Tensor::randn(&[cfg.n_classes + 1, cfg.d_embed], 1.0, rng));
        let fc = (0..cfg.n_fc)
            .map(|i| {
                let d_in = if i == 0 { cfg.d_embed } else { cfg.d_class };
                Linear::new(&format!("{CLASS_FC_PREFIX}{i}"), d_in, cfg.d_class, rng)
            })
            .collect();
        Ok(Self { embedding, fc, n_classes: cfg.n_classes, source_input: cfg.source_input })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn d_class(&self) -> usize {
        self.fc.last().map_or(self.embedding.value.shape()[1], |l| l.d_out())
    }

    fn slot(&self, input: ClassInput) -> Result<usize> {
        match input {
            ClassInput::Target(i) if i < self.n_classes => Ok(i + 1),
            ClassInput::Target(i) => Err(Error::OutOfRange { what: "class", index: i, len: self.n_classes }),
            ClassInput::Source => Ok(0),
        }
    }

    /// Class vectors `[N, d_class]` for a batch of inputs.
    pub fn forward(&self, ctx: &Ctx<T>, inputs: &[ClassInput]) -> Result<Var<T>> {
        let table = ctx.var(&self.embedding);
        let d_embed = table.shape()[1];
        let mut rows = Vec::with_capacity(inputs.len());
        let mut ones_rows = Vec::with_capacity(inputs.len());
        for &inp in inputs {
            let use_ones = inp == ClassInput::Source && self.source_input == SourceClassInput::OnesVector;
            rows.push(if use_ones { 0 } else { self.slot(inp)? });
            ones_rows.push(use_ones);
        }
        let mut sel = one_hot::<T>(&rows, self.n_classes + 1)?.value().clone();
        let mut ones = Tensor::zeros(&[inputs.len(), d_embed]);
        for (r, &u) in ones_rows.iter().enumerate() {
            if u {
                sel.data_mut()[r * (self.n_classes + 1)..(r + 1) * (self.n_classes + 1)].fill(T::zero());
                ones.data_mut()[r * d_embed..(r + 1) * d_embed].fill(T::one());
            }
        }
        let mut h = Var::constant(sel).matmul(&table)?;
        if ones_rows.iter().any(|&u| u) {
            h = h.add(&Var::constant(ones))?;
        }
        for (i, l) in self.fc.iter().enumerate() {
            h = l.forward(ctx, &h)?;
            if i + 1 < self.fc.len() {
                h = h.leaky_relu(LRELU_SLOPE);
            }
        }
        Ok(h)
    }

    /// `v = C(i)` for target class `i`.
    pub fn embed_class(&self, i: usize) -> Result<Tensor<T>> {
        self.embed(ClassInput::Target(i))
    }

    pub fn embed(&self, input: ClassInput) -> Result<Tensor<T>> {
        let v = no_grad(|| self.forward(&Ctx::inference(), &[input]))?;
        v.value().reshape(&[self.d_class()])
    }
}

impl<T: Scalar> Module<T> for ClassConditioning<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.embedding);
        self.fc.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.embedding);
        self.fc.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Affine projectors `g(v; Φ_a)` → (γ, β) and `g_b(v; Φ_b)` → Δb for one
/// modulated layer.
#[derive(Clone, Debug)]
pub struct LayerModulator<T: Scalar> {
    pub gamma: Linear<T>,
    pub beta: Linear<T>,
    pub delta_bias: Linear<T>,
}

impl<T: Scalar> LayerModulator<T> {
    /// Cold initialization: identity on the normalized weight
    /// (γ bias 1, β bias 0) and tiny random weights.
    pub fn new<R: Rng + ?Sized>(name: &str, d_class: usize, width: usize, out: usize, std: f64, rng: &mut R) -> Self {
        let mut gamma = Linear::with_std(&format!("{name}.gamma"), d_class, width, std, rng);
        gamma.bias.value = Tensor::ones(&[width]);
        Self {
            gamma,
            beta: Linear::with_std(&format!("{name}.beta"), d_class, width, std, rng),
            delta_bias: Linear::with_std(&format!("{name}.dbias"), d_class, out, std, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.d_out()
    }

    pub fn d_class(&self) -> usize {
        self.gamma.d_in()
    }

    /// Coefficients for a batch of class vectors `[N, d_class]`.
    pub fn forward(&self, ctx: &Ctx<T>, v: &Var<T>) -> Result<BatchModulation<T>> {
        Ok(BatchModulation {
            gamma: self.gamma.forward(ctx, v)?,
            beta: self.beta.forward(ctx, v)?,
            delta_bias: self.delta_bias.forward(ctx, v)?,
        })
    }

    /// Coefficients for a single class vector.
    pub fn generate_modulation(&self, v: &Tensor<T>) -> Result<ModulationParams<T>> {
        if v.numel() != self.d_class() {
            return shape_err(format!("class vector of length {} for projector input {}", v.numel(), self.d_class()));
        }
        let m = no_grad(|| self.forward(&Ctx::inference(), &Var::constant(v.reshape(&[1, v.numel()])?)))?;
        let flat = |x: &Var<T>| x.value().reshape(&[x.value().numel()]);
        Ok(ModulationParams { gamma: flat(&m.gamma)?, beta: flat(&m.beta)?, delta_bias: flat(&m.delta_bias)? })
    }

    /// Zero weights and biases reproducing `layer` exactly for every `v`.
    pub fn exact_recovery_init(&mut self, layer: &ModulatedLayer<T>, shape: ModulationShape) -> Result<()> {
        let p = layer.recovery_modulation(shape);
        if p.gamma.numel() != self.width() {
            return shape_err(format!("projector width {} for layer width {}", self.width(), p.gamma.numel()));
        }
        for l in [&mut self.gamma, &mut self.beta, &mut self.delta_bias] {
            l.weight.value = Tensor::zeros(l.weight.value.shape());
        }
        self.gamma.bias.value = p.gamma;
        self.beta.bias.value = p.beta;
        self.delta_bias.bias.value = p.delta_bias;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for LayerModulator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.gamma.visit(f);
        self.beta.visit(f);
        self.delta_bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.gamma.visit_mut(f);
        self.beta.visit_mut(f);
        self.delta_bias.visit_mut(f);
    }
}

/// Class network plus one projector per modulated layer.
#[derive(Clone, Debug)]
pub struct Hypernetwork<T: Scalar> {
    pub class_net: ClassConditioning<T>,
    pub modulators: Vec<LayerModulator<T>>,
}

impl<T: Scalar> Hypernetwork<T> {
    /// Cold-initialized hypernetwork for the given layers.
    pub fn new<R: Rng + ?Sized>(cfg: &ConditioningConfig, layers: &[&ModulatedLayer<T>], rng: &mut R) -> Result<Self> {
        let class_net = ClassConditioning::new(cfg, rng)?;
        let d = class_net.d_class();
        let modulators = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                LayerModulator::new(
                    &format!("cond.mod.{i}"),
                    d,
                    l.modulation_width(cfg.modulation_shape),
                    l.out_channels(),
                    cfg.cold_init_std,
                    rng,
                )
            })
            .collect();
        Ok(Self { class_net, modulators })
    }

    /// Analytic warm start: every class reproduces the source layers.
    pub fn exact_recovery_init(&mut self, layers: &[&ModulatedLayer<T>], shape: ModulationShape) -> Result<()> {
        exact_recovery_init(&mut self.modulators, layers, shape)
    }

    pub fn modulations(&self, ctx: &Ctx<T>, v: &Var<T>) -> Result<Vec<BatchModulation<T>>> {
        self.modulators.iter().map(|m| m.forward(ctx, v)).collect()
    }
}

impl<T: Scalar> Module<T> for Hypernetwork<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.class_net.visit(f);
        self.modulators.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.class_net.visit_mut(f);
        self.modulators.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

/// Sets every projector so the modulated layers equal their sources.
pub fn exact_recovery_init<T: Scalar>(
    mods: &mut [LayerModulator<T>],
    layers: &[&ModulatedLayer<T>],
    shape: ModulationShape,
) -> Result<()> {
    if mods.len() != layers.len() {
        return shape_err(format!("{} projectors for {} layers", mods.len(), layers.len()));
    }
    mods.iter_mut().zip(layers).try_for_each(|(m, l)| m.exact_recovery_init(l, shape))
}

/// Independent (γ, β, Δb) per class and layer; no sharing between classes.
#[derive(Clone, Debug)]
pub struct PerClassTable<T: Scalar> {
    pub layers: Vec<[Param<T>; 3]>,
    n_classes: usize,
}

impl<T: Scalar> PerClassTable<T> {
    /// Every class starts at the exact recovery of the source layers.
    pub fn new(n_classes: usize, layers: &[&ModulatedLayer<T>], shape: ModulationShape) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("per-class table needs at least one class".into()));
        }
        let rep = |t: &Tensor<T>| -> Result<Tensor<T>> {
            t.reshape(&[1, t.numel()])?.broadcast_to(&[n_classes, t.numel()])
        };
        let layers = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = l.recovery_modulation(shape);
                Ok([
                    Param::new(format!("cond.table.{i}.gamma"), rep(&p.gamma)?),
                    Param::new(format!("cond.table.{i}.beta"), rep(&p.beta)?),
                    Param::new(format!("cond.table.{i}.dbias"), rep(&p.delta_bias)?),
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn modulations(&self, ctx: &Ctx<T>, classes: &[usize]) -> Result<Vec<BatchModulation<T>>> {
        let sel = one_hot::<T>(classes, self.n_classes)?;
        self.layers
            .iter()
            .map(|[g, b, d]| {
                Ok(BatchModulation {
                    gamma: sel.matmul(&ctx.var(g))?,
                    beta: sel.matmul(&ctx.var(b))?,
                    delta_bias: sel.matmul(&ctx.var(d))?,
                })
            })
            .collect()
    }

    /// Coefficients of class `i` for layer `layer`.
    pub fn params_for(&self, layer: usize, i: usize) -> Result<ModulationParams<T>> {
        if i >= self.n_classes {
            return Err(Error::OutOfRange { what: "class", index: i, len: self.n_classes });
        }
        let row = |p: &Param<T>| p.value.select_rows(&[i]).and_then(|t| t.reshape(&[t.numel()]));
        let [g, b, d] = &self.layers[layer];
        Ok(ModulationParams { gamma: row(g)?, beta: row(b)?, delta_bias: row(d)? })
    }
}

impl<T: Scalar> Module<T> for PerClassTable<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.layers.iter().flatten().for_each(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().flatten().for_each(f);
    }
}

/// `(1 - t) v1 + t v2` for `t ∈ [0, 1]`.
pub fn interpolate_class<T: Scalar>(v1: &Tensor<T>, v2: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("interpolation weight {t} outside [0, 1]")));
    }
    lerp(v1, v2, t)
}

/// Unrestricted linear interpolation (also used for path-length probes that
/// step slightly past an endpoint).
pub fn lerp<T: Scalar>(v1: &Tensor<T>, v2: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let tt = T::from_f64_lossy(t);
    v1.zip_map(v2, |a, b| a + (b - a) * tt)
}
