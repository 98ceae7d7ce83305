//! Data-free self-alignment: fit the conditioning modules so that the source
//! input reproduces the pretrained generator's per-block features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{shape_err, Error, Result};
use crate::hyper::{ClassInput, CLASS_FC_PREFIX, COND_PREFIX};
use crate::nn::{Ctx, Module};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::synthesis::{ClassSpec, Conditioning, FeatureStack, Generator};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub class_lr_scale: f64,
    /// Latents used to report the loss before and after alignment.
    pub eval_batch: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 8, learning_rate: 1e-3, class_lr_scale: 0.01, eval_batch: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Training loss of every step, measured before its update.
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// `Σ_l mean |a_l − b_l|`.
pub fn alignment_loss<T: Scalar>(a: &FeatureStack<T>, b: &FeatureStack<T>) -> Result<f64> {
    check_stacks(a.blocks.iter().map(|t| t.shape()), b.blocks.iter().map(|t| t.shape()))?;
    Ok(a.blocks
        .iter()
        .zip(&b.blocks)
        .map(|(x, y)| {
            let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).sum();
            s / x.numel() as f64
        })
        .sum())
}

/// Residuals below this magnitude carry no training gradient. Plain `|d|`
/// has a unit subgradient at rounding-level residuals, which Adam turns into
/// full-size steps away from an exact fit.
pub const ALIGN_DEAD_ZONE: f64 = 1e-5;

/// Graph version of [`alignment_loss`].
pub fn alignment_loss_var<T: Scalar>(a: &[Var<T>], b: &[Var<T>]) -> Result<Var<T>> {
    alignment_objective(a, b, 0.0)
}

/// `Σ_l mean max(|d| − τ, 0)`; equals the L1 loss for `τ = 0`.
pub fn alignment_objective<T: Scalar>(a: &[Var<T>], b: &[Var<T>], tau: f64) -> Result<Var<T>> {
    check_stacks(a.iter().map(|t| t.shape()), b.iter().map(|t| t.shape()))?;
    let mut total = Var::scalar(T::zero());
    for (x, y) in a.iter().zip(b) {
        let d = x.sub(y)?;
        let per = if tau == 0.0 { d.abs() } else { d.abs().add_scalar(-tau).clamp_min(0.0) };
        total = total.add(&per.mean())?;
    }
    Ok(total)
}

fn check_stacks<'a>(
    a: impl ExactSizeIterator<Item = &'a [usize]>,
    b: impl ExactSizeIterator<Item = &'a [usize]>,
) -> Result<()> {
    if a.len() != b.len() {
        return shape_err(format!("feature stacks of length {} and {}", a.len(), b.len()));
    }
    for (l, (x, y)) in a.zip(b).enumerate() {
        if x != y {
            return shape_err(format!("block {l}: {x:?} vs {y:?}"));
        }
    }
    Ok(())
}

fn source_batch(n: usize) -> Vec<ClassInput> {
    vec![ClassInput::Source; n]
}

/// Loss between the two generators on the latents `z`.
pub fn evaluate_alignment<T: Scalar>(pretrained: &Generator<T>, model: &Generator<T>, z: &Tensor<T>) -> Result<f64> {
    let (_, f_pt) = pretrained.synthesize(z, &ClassSpec::None)?;
    let inputs = source_batch(z.shape()[0]);
    let (_, f_hyp) = model.synthesize(z, &ClassSpec::Inputs(&inputs))?;
    alignment_loss(&f_pt, &f_hyp)
}

/// Optimizes only the conditioning parameters of `model` against the frozen
/// `pretrained` generator. Latents are drawn from `rng` each step; no images
/// are involved.
pub fn self_align<T: Scalar, R: Rng + ?Sized>(
    pretrained: &Generator<T>,
    model: &mut Generator<T>,
    cfg: &AlignmentConfig,
    rng: &mut R,
) -> Result<AlignmentReport> {
    if matches!(model.conditioning, Conditioning::None | Conditioning::PerClass(_)) {
        return Err(Error::InvalidInput("self-alignment needs a class network (hyper or AdaIN-fusion)".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config("alignment needs positive steps, batch size and learning rate".into()));
    }
    if pretrained.source_state() != model.source_state() {
        return Err(Error::InvalidInput("models do not share the pretrained weights".into()));
    }
    let eval_z = pretrained.sample_latents(cfg.eval_batch.max(1), rng);
    let initial_loss = evaluate_alignment(pretrained, model, &eval_z)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() })
        .with_lr_scale(CLASS_FC_PREFIX, cfg.class_lr_scale);
    let inputs = source_batch(cfg.batch_size);
    let prefixes = [COND_PREFIX];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let z = pretrained.sample_latents(cfg.batch_size, rng);
        let target = no_grad(|| pretrained.forward(&Ctx::inference(), &Var::constant(z.clone()), &ClassSpec::None))?;
        let ctx = Ctx::prefixes(&prefixes);
        let out = model.forward(&ctx, &Var::constant(z), &ClassSpec::Inputs(&inputs))?;
        let loss = alignment_objective(&target.features, &out.features, ALIGN_DEAD_ZONE)?;
        let value = alignment_loss_var(&target.features, &out.features)?.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("alignment loss is {value} at step {step}")));
        }
        trace.push(value);
        let grads = ctx.grads(&loss.backward(false));
        opt.step(model, &grads)?;
    }
    let final_loss = evaluate_alignment(pretrained, model, &eval_z)?;
    Ok(AlignmentReport { trace, initial_loss, final_loss })
}

/// Names of parameters that alignment may change.
pub fn alignable_params<T: Scalar>(model: &Generator<T>) -> Vec<String> {
    model.params().iter().filter(|p| p.name().starts_with(COND_PREFIX)).map(|p| p.name().to_string()).collect()
}
