//! Source pretraining and conditional transfer training.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    contrastive_step, d_gan_loss, g_gan_loss, r1_penalty, ContrastiveConfig, Discriminator, Head, DISC_PREFIX,
};
use crate::alignment::{self_align, AlignmentConfig, AlignmentReport};
use crate::autograd::{no_grad, Var};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::hyper::{ClassInput, ConditioningConfig, CLASS_FC_PREFIX};
use crate::nn::{Ctx, Module};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::synthesis::{ClassSpec, ConditioningMode, Generator, SynthesisConfig, GEN_PREFIX};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Independent modulation table per class, no hypernetwork.
    PerClass,
    /// Hypernetwork fed by the learned embedding only.
    Hyper,
    /// Hypernetwork with the class network.
    #[default]
    HyperV,
    HyperVContrastive,
    /// `HyperVContrastive` with the source `W, b` finetuned as well.
    HyperFt,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] =
        [Self::PerClass, Self::Hyper, Self::HyperV, Self::HyperVContrastive, Self::HyperFt];

    pub fn name(self) -> &'static str {
        match self {
            Self::PerClass => "per_class",
            Self::Hyper => "hyper",
            Self::HyperV => "hyper_v",
            Self::HyperVContrastive => "hyper_v_contrastive",
            Self::HyperFt => "hyper_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Self::HyperVContrastive | Self::HyperFt)
    }

    pub fn finetunes_source(self) -> bool {
        self == Self::HyperFt
    }

    pub fn uses_class_network(self) -> bool {
        !matches!(self, Self::PerClass | Self::Hyper)
    }
}

/// How the conditioning modules start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Cold init followed by data-free self-alignment.
    #[default]
    SelfAligned,
    /// Analytic init reproducing the source for every class.
    ExactRecovery,
    Cold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub init: InitKind,
    pub steps: usize,
    pub batch_size: usize,
    pub g_opt: AdamConfig,
    pub d_opt: AdamConfig,
    pub r1_gamma: f64,
    /// R1 is evaluated every this many steps and scaled by it.
    pub r1_interval: usize,
    pub conditioning: ConditioningConfig,
    pub contrastive: ContrastiveConfig,
    pub alignment: AlignmentConfig,
    pub eval_interval: usize,
    pub ema: EmaConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::HyperV,
            init: InitKind::SelfAligned,
            steps: 2000,
            batch_size: 16,
            g_opt: AdamConfig::default(),
            d_opt: AdamConfig::default(),
            r1_gamma: 10.0,
            r1_interval: 16,
            conditioning: ConditioningConfig::default(),
            contrastive: ContrastiveConfig::default(),
            alignment: AlignmentConfig::default(),
            eval_interval: 500,
            ema: EmaConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Conditioning settings after the mode's overrides.
    pub fn effective_conditioning(&self) -> ConditioningConfig {
        let mut c = self.conditioning.clone();
        if self.mode == TrainingMode::Hyper {
            c.n_fc = 0;
            c.d_embed = c.d_class;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub synthesis: SynthesisConfig,
    pub d_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub g_opt: AdamConfig,
    pub d_opt: AdamConfig,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub ema: EmaConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            synthesis: SynthesisConfig::default(),
            d_channels: 64,
            steps: 2000,
            batch_size: 16,
            g_opt: AdamConfig::default(),
            d_opt: AdamConfig::default(),
            r1_gamma: 10.0,
            r1_interval: 16,
            ema: EmaConfig::default(),
            seed: 0,
        }
    }
}

/// Generator weight averaging used for evaluation and sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaConfig {
    pub enabled: bool,
    /// Half-life in thousands of images; `None` uses `batch · 10 / 32`.
    pub half_life_kimg: Option<f64>,
    /// The half-life is capped at this fraction of the images seen so far.
    pub rampup: Option<f64>,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { enabled: true, half_life_kimg: None, rampup: Some(0.05) }
    }
}

impl EmaConfig {
    /// Decay for the update after `images_seen` images.
    pub fn beta(&self, batch: usize, images_seen: f64) -> f64 {
        let mut half = self.half_life_kimg.unwrap_or(batch as f64 * 10.0 / 32.0) * 1000.0;
        if let Some(r) = self.rampup {
            half = half.min(images_seen * r);
        }
        if half <= 0.0 {
            return 0.0;
        }
        0.5f64.powf(batch as f64 / half)
    }
}

/// `ema ← p + β (ema − p)` for every trainable parameter of `g`.
pub fn ema_update<T: Scalar>(ema: &mut Generator<T>, g: &Generator<T>, beta: f64) -> Result<()> {
    let mut live = BTreeMap::new();
    g.visit(&mut |p| {
        if !p.frozen {
            live.insert(p.name().to_string(), &p.value);
        }
    });
    let b = T::from_f64_lossy(beta);
    let mut err = None;
    ema.visit_mut(&mut |p| {
        if let Some(v) = live.get(p.name()) {
            match p.value.zip_map(v, |e, x| x + b * (e - x)) {
                Ok(t) => p.value = t,
                Err(e) => err = Some(e),
            }
        }
    });
    err.map_or(Ok(()), Err)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub d_gan: f64,
    pub g_gan: f64,
    pub r1: Option<f64>,
    pub contrastive: Option<f64>,
    /// `d_gan + r1_interval · r1 + λ_contr · contrastive`.
    pub d_total: f64,
}

/// Key prefix of the averaged generator in [`Trainer::arrays`].
pub const EMA_PREFIX: &str = "ema.";

/// Everything that evolves during training; enough to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub g: Generator<T>,
    /// Averaged copy of `g`; equal to `g` when averaging is disabled.
    pub g_ema: Generator<T>,
    pub ema: EmaConfig,
    pub d: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// `None` while pretraining the unconditional source.
    pub mode: Option<TrainingMode>,
    pub batch_size: usize,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub contrastive: Option<ContrastiveConfig>,
}

/// Generator and discriminator for an unconditional run from scratch.
pub fn new_source<T: Scalar>(cfg: &PretrainConfig) -> Result<Trainer<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = Generator::new(cfg.synthesis.clone(), &mut rng)?;
    let d = Discriminator::new(cfg.synthesis.output_resolution, cfg.d_channels, &mut rng)?;
    Ok(Trainer {
        g_ema: g.clone(),
        g,
        ema: cfg.ema.clone(),
        d,
        opt_g: Adam::new(cfg.g_opt.clone()),
        opt_d: Adam::new(cfg.d_opt.clone()),
        rng,
        step: 0,
        mode: None,
        batch_size: cfg.batch_size,
        r1_gamma: cfg.r1_gamma,
        r1_interval: cfg.r1_interval,
        contrastive: None,
    })
}

/// Trains the unconditional source model and freezes its generator.
pub fn pretrain_source<T: Scalar>(
    cfg: &PretrainConfig,
    data: &ImageSet<T>,
) -> Result<(Generator<T>, Discriminator<T>, Vec<StepLosses>)> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if data.resolution() != cfg.synthesis.output_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from generator resolution {}",
            data.resolution(),
            cfg.synthesis.output_resolution
        )));
    }
    let mut t = new_source(cfg)?;
    let history = t.run(data, cfg.steps, 0, &mut |_, _| Ok(()))?;
    let mut g = t.g_ema;
    g.freeze_source()?;
    Ok((g, t.d, history))
}

/// Result of setting up a transfer run.
pub struct TransferSetup<T: Scalar> {
    pub trainer: Trainer<T>,
    pub alignment: Option<AlignmentReport>,
}

/// Builds the conditional model for `cfg.mode` on top of a frozen source.
/// With `run_init = false` only the structure is created (for resuming).
pub fn new_transfer<T: Scalar>(
    source_g: &Generator<T>,
    source_d: &Discriminator<T>,
    n_classes: usize,
    cfg: &TrainConfig,
    run_init: bool,
) -> Result<TransferSetup<T>> {
    if source_g.params().iter().any(|p| p.name().starts_with(GEN_PREFIX) && !p.frozen) {
        return Err(Error::InvalidInput("source generator is not frozen".into()));
    }
    if !matches!(source_g.conditioning, crate::synthesis::Conditioning::None) {
        return Err(Error::InvalidInput("source generator already has conditioning modules".into()));
    }
    if !matches!(source_d.head, Head::Source(_)) {
        return Err(Error::InvalidInput("source discriminator already has a class head".into()));
    }
    if cfg.batch_size == 0 || cfg.r1_interval == 0 {
        return Err(Error::Config("batch size and R1 interval must be positive".into()));
    }
    let cond = ConditioningConfig { n_classes, ..cfg.effective_conditioning() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = source_g.clone();
    let d = source_d.clone().with_class_head(n_classes, &mut rng)?;
    let adain = g.config.conditioning_mode == ConditioningMode::AdainFusion;
    match (cfg.mode, adain) {
        (TrainingMode::PerClass, false) => g.attach_per_class(n_classes, cond.modulation_shape)?,
        (TrainingMode::PerClass, true) => {
            return Err(Error::Config("per_class mode needs weight modulation".into()));
        }
        (_, false) => g.attach_hyper(&cond, &mut rng)?,
        (_, true) => g.attach_adain_fusion(&cond, &mut rng)?,
    }
    let mut alignment = None;
    if run_init && cfg.mode != TrainingMode::PerClass {
        match cfg.init {
            InitKind::Cold => {}
            InitKind::ExactRecovery => {
                if !adain {
                    g.exact_recovery_init(cond.modulation_shape)?;
                }
            }
            InitKind::SelfAligned => alignment = Some(self_align(source_g, &mut g, &cfg.alignment, &mut rng)?),
        }
    }
    if cfg.mode.finetunes_source() {
        g.set_modulated_trainable(true);
    }
    let opt_g = Adam::new(cfg.g_opt.clone()).with_lr_scale(CLASS_FC_PREFIX, cond.class_lr_scale);
    Ok(TransferSetup {
        trainer: Trainer {
            g_ema: g.clone(),
            g,
            ema: cfg.ema.clone(),
            d,
            opt_g,
            opt_d: Adam::new(cfg.d_opt.clone()),
            rng,
            step: 0,
            mode: Some(cfg.mode),
            batch_size: cfg.batch_size,
            r1_gamma: cfg.r1_gamma,
            r1_interval: cfg.r1_interval,
            contrastive: cfg.mode.uses_contrastive().then(|| cfg.contrastive.clone()),
        },
        alignment,
    })
}

fn finite(v: f64, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} is {v} at step {step}")))
    }
}

impl<T: Scalar> Trainer<T> {
    fn conditional(&self) -> bool {
        self.mode.is_some()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &ImageSet<T>) -> Result<StepLosses> {
        if self.conditional() && Some(data.n_classes()) != self.g.conditioning.n_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {:?}",
                data.n_classes(),
                self.g.conditioning.n_classes()
            )));
        }
        let idx = data.sample_indices(self.batch_size, &mut self.rng);
        let (real, labels) = data.batch(&idx)?;
        let mut losses = self.d_step(&real, &labels)?;
        losses.g_gan = self.g_step(&labels)?;
        self.step += 1;
        self.update_ema()?;
        Ok(losses)
    }

    fn class_spec<'a>(&self, inputs: &'a [ClassInput]) -> ClassSpec<'a, T> {
        if self.conditional() {
            ClassSpec::Inputs(inputs)
        } else {
            ClassSpec::None
        }
    }

    /// Discriminator update on `real` against fakes of the same classes.
    /// The fakes enter as constants, so no loss here reaches the generator.
    pub fn d_step(&mut self, real: &Tensor<T>, labels: &[usize]) -> Result<StepLosses> {
        let inputs: Vec<ClassInput> = labels.iter().map(|&c| ClassInput::Target(c)).collect();
        let cls = self.conditional().then_some(labels);
        let step = self.step;
        let z = self.g.sample_latents(labels.len(), &mut self.rng);
        let spec = self.class_spec(&inputs);
        let fake = no_grad(|| self.g.forward(&Ctx::inference(), &Var::constant(z), &spec))?.image.value().clone();
        let prefixes = [DISC_PREFIX];
        let ctx_d = Ctx::prefixes(&prefixes);
        let real_logits = self.d.logit(&ctx_d, &Var::constant(real.clone()), cls)?;
        let fake_logits = self.d.logit(&ctx_d, &Var::constant(fake.clone()), cls)?;
        let gan = d_gan_loss(&real_logits, &fake_logits)?;
        let mut losses = StepLosses { step, d_gan: finite(gan.item().as_f64(), "discriminator loss", step)?, ..Default::default() };
        let mut total = gan;
        if let Some(cc) = &self.contrastive {
            let lc = contrastive_step(&self.d, &ctx_d, real, &fake, cc, &mut self.rng)?;
            losses.contrastive = Some(finite(lc.item().as_f64(), "contrastive loss", step)?);
            total = total.add(&lc.scale(cc.lambda_contr))?;
        }
        if self.r1_gamma > 0.0 && step.is_multiple_of(self.r1_interval as u64) {
            let r1 = r1_penalty(&self.d, &ctx_d, real, cls, self.r1_gamma)?;
            losses.r1 = Some(finite(r1.item().as_f64(), "R1 penalty", step)?);
            total = total.add(&r1.scale(self.r1_interval as f64))?;
        }
        losses.d_total = finite(total.item().as_f64(), "discriminator objective", step)?;
        let grads = ctx_d.grads(&total.backward(false));
        self.opt_d.step(&mut self.d, &grads)?;
        Ok(losses)
    }

    /// Non-saturating generator update; returns the loss.
    pub fn g_step(&mut self, labels: &[usize]) -> Result<f64> {
        let inputs: Vec<ClassInput> = labels.iter().map(|&c| ClassInput::Target(c)).collect();
        let cls = self.conditional().then_some(labels);
        let z = self.g.sample_latents(labels.len(), &mut self.rng);
        let ctx_g = Ctx::tracking(|p| !p.name().starts_with(DISC_PREFIX));
        let out = self.g.forward(&ctx_g, &Var::constant(z), &self.class_spec(&inputs))?;
        let logits = self.d.logit(&Ctx::inference(), &out.image, cls)?;
        let g_loss = g_gan_loss(&logits);
        let v = finite(g_loss.item().as_f64(), "generator loss", self.step)?;
        let grads = ctx_g.grads(&g_loss.backward(false));
        self.opt_g.step(&mut self.g, &grads)?;
        if self.finetuning() {
            self.g.refresh_stats()?;
        }
        Ok(v)
    }

    fn finetuning(&self) -> bool {
        self.conditional() && self.g.blocks.iter().any(|b| b.conv.is_trainable())
    }

    fn update_ema(&mut self) -> Result<()> {
        if !self.ema.enabled {
            self.g_ema = self.g.clone();
            return Ok(());
        }
        let b = self.batch_size;
        let beta = self.ema.beta(b, self.step as f64 * b as f64);
        ema_update(&mut self.g_ema, &self.g, beta)?;
        if self.finetuning() {
            self.g_ema.refresh_stats()?;
        }
        Ok(())
    }

    /// Runs `n` steps; `on_interval` is called after every `interval`-th step
    /// (never when `interval` is 0).
    pub fn run(
        &mut self,
        data: &ImageSet<T>,
        n: usize,
        interval: usize,
        on_interval: &mut dyn FnMut(&Self, &StepLosses) -> Result<()>,
    ) -> Result<Vec<StepLosses>> {
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            let l = self.train_step(data)?;
            if interval > 0 && self.step.is_multiple_of(interval as u64) {
                on_interval(self, &l)?;
            }
            history.push(l);
        }
        Ok(history)
    }

    /// All arrays needed to resume: model parameters, the averaged generator
    /// (`ema.*`) and optimizer moments (`opt_g.*`, `opt_d.*`).
    pub fn arrays(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = self.g.state();
        out.extend(self.d.state());
        for (k, v) in self.g_ema.state() {
            out.insert(format!("{EMA_PREFIX}{k}"), v);
        }
        for (prefix, opt) in [("opt_g.", &self.opt_g), ("opt_d.", &self.opt_d)] {
            for (k, v) in opt.state().1 {
                out.insert(format!("{prefix}{k}"), v);
            }
        }
        out
    }

    /// Restores arrays written by [`Trainer::arrays`] plus the counters.
    pub fn restore(&mut self, arrays: &BTreeMap<String, Tensor<T>>, step: u64, rng: ChaCha8Rng, opt_steps: (u64, u64)) -> Result<()> {
        self.g.load_state(arrays)?;
        self.d.load_state(arrays)?;
        self.g.refresh_stats()?;
        let ema: BTreeMap<String, Tensor<T>> = arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(EMA_PREFIX).map(|s| (s.to_string(), v.clone())))
            .collect();
        if ema.is_empty() {
            self.g_ema = self.g.clone();
        } else {
            self.g_ema.load_state(&ema)?;
            self.g_ema.refresh_stats()?;
        }
        let sub = |prefix: &str| -> BTreeMap<String, Tensor<T>> {
            arrays.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone()))).collect()
        };
        self.opt_g.load_state(opt_steps.0, &sub("opt_g."))?;
        self.opt_d.load_state(opt_steps.1, &sub("opt_d."))?;
        self.step = step;
        self.rng = rng;
        Ok(())
    }
}

/// Names of frozen parameters of a module.
pub fn frozen_names<T: Scalar>(m: &dyn Module<T>) -> Vec<String> {
    m.params().iter().filter(|p| p.frozen).map(|p| p.name().to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy_source, toy_target};

    fn small_pretrain() -> PretrainConfig {
        PretrainConfig {
            synthesis: SynthesisConfig {
                n_blocks: 2,
                base_channels: 4,
                output_resolution: 8,
                latent_dim: 8,
                mapping_layers: 2,
                ..Default::default()
            },
            d_channels: 4,
            steps: 4,
            batch_size: 4,
            r1_interval: 2,
            ..Default::default()
        }
    }

    fn small_train(mode: TrainingMode) -> TrainConfig {
        TrainConfig {
            mode,
            init: InitKind::ExactRecovery,
            batch_size: 4,
            r1_interval: 2,
            conditioning: ConditioningConfig { d_embed: 8, d_class: 8, n_fc: 2, ..Default::default() },
            ..Default::default()
        }
    }

    fn source() -> (Generator<f64>, Discriminator<f64>) {
        let data = toy_source::<f64>(8, 8, 0).unwrap();
        let (g, d, hist) = pretrain_source(&small_pretrain(), &data).unwrap();
        assert_eq!(hist.len(), 4);
        assert!(hist.iter().all(|h| h.g_gan.is_finite()));
        (g, d)
    }

    #[test]
    fn pretraining_is_deterministic_and_frozen() {
        let (g1, d1) = source();
        let (g2, d2) = source();
        assert_eq!(g1.state(), g2.state());
        assert_eq!(d1.state(), d2.state());
        assert!(g1.params().iter().all(|p| p.frozen));
        let z = g1.sample_latents(3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(g1.sample(&z, &ClassSpec::None).unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_or_mismatched_dataset_is_rejected() {
        let data = toy_source::<f64>(2, 16, 0).unwrap();
        assert!(matches!(pretrain_source(&small_pretrain(), &data), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_source_survives_every_mode_but_ft() {
        let (g, d) = source();
        let data = toy_target::<f64>(4, 8, 1).unwrap();
        for mode in TrainingMode::ALL {
            let mut t = new_transfer(&g, &d, 3, &small_train(mode), true).unwrap().trainer;
            let before = t.g.source_state();
            t.run(&data, 3, 0, &mut |_, _| Ok(())).unwrap();
            let same = before == t.g.source_state();
            assert_eq!(same, !mode.finetunes_source(), "{mode:?}");
        }
    }

    #[test]
    fn per_class_rows_of_absent_classes_do_not_move() {
        let (g, d) = source();
        // only class 0 and 2 present
        let full = toy_target::<f64>(4, 8, 2).unwrap();
        let keep: Vec<usize> = (0..full.len()).filter(|&i| full.labels()[i] != 1).collect();
        let (imgs, labels) = full.batch(&keep).unwrap();
        let data = ImageSet::new(imgs, labels, full.class_names().to_vec()).unwrap();
        let mut t = new_transfer(&g, &d, 3, &small_train(TrainingMode::PerClass), true).unwrap().trainer;
        let row = |t: &Trainer<f64>, name: &str| t.g.state()[name].select_rows(&[1]).unwrap();
        let before = row(&t, "cond.table.0.gamma");
        let before0 = t.g.state()["cond.table.0.gamma"].select_rows(&[0]).unwrap();
        t.run(&data, 3, 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(before, row(&t, "cond.table.0.gamma"));
        assert_ne!(before0, t.g.state()["cond.table.0.gamma"].select_rows(&[0]).unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (g, d) = source();
        let data = toy_target::<f64>(4, 8, 3).unwrap();
        let cfg = small_train(TrainingMode::HyperVContrastive);
        let mut full = new_transfer(&g, &d, 3, &cfg, true).unwrap().trainer;
        full.run(&data, 4, 0, &mut |_, _| Ok(())).unwrap();

        let mut first = new_transfer(&g, &d, 3, &cfg, true).unwrap().trainer;
        first.run(&data, 2, 0, &mut |_, _| Ok(())).unwrap();
        let arrays = first.arrays();
        let rng = first.rng.clone();
        let opt_steps = (first.opt_g.steps(), first.opt_d.steps());
        let mut resumed = new_transfer(&g, &d, 3, &cfg, false).unwrap().trainer;
        resumed.restore(&arrays, 2, rng, opt_steps).unwrap();
        resumed.run(&data, 2, 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(full.arrays(), resumed.arrays());
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let (g, d) = source();
        let data = toy_target::<f64>(2, 8, 4).unwrap();
        let mut t = new_transfer(&g, &d, 2, &small_train(TrainingMode::HyperV), true).unwrap().trainer;
        assert!(matches!(t.train_step(&data), Err(Error::Config(_))));
    }

    #[test]
    fn interval_callback_fires() {
        let (g, d) = source();
        let data = toy_target::<f64>(2, 8, 5).unwrap();
        let mut t = new_transfer(&g, &d, 3, &small_train(TrainingMode::Hyper), true).unwrap().trainer;
        let mut hits = vec![];
        t.run(&data, 5, 2, &mut |t, _| {
            hits.push(t.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(hits, vec![2, 4]);
    }

    #[test]
    fn discriminator_objective_is_the_weighted_sum() {
        let (g, d) = source();
        let data = toy_target::<f64>(4, 8, 6).unwrap();
        let cfg = small_train(TrainingMode::HyperVContrastive);
        let mut t = new_transfer(&g, &d, 3, &cfg, true).unwrap().trainer;
        let l = t.train_step(&data).unwrap();
        let want = l.d_gan + 2.0 * l.r1.unwrap() + cfg.contrastive.lambda_contr * l.contrastive.unwrap();
        assert!((l.d_total - want).abs() < 1e-6);
        let l = t.train_step(&data).unwrap();
        assert!(l.r1.is_none());
        assert!((l.d_total - l.d_gan - cfg.contrastive.lambda_contr * l.contrastive.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn ema_decay_follows_half_life_and_rampup() {
        let e = EmaConfig { rampup: None, ..Default::default() };
        // 32 images per step, 10k image half-life
        assert!((e.beta(32, 1e9).powf(10_000.0 / 32.0) - 0.5).abs() < 1e-12);
        let e = EmaConfig::default();
        assert!((e.beta(16, 1600.0) - 0.5f64.powf(16.0 / 80.0)).abs() < 1e-12);
        assert_eq!(e.beta(16, 0.0), 0.0);
    }

    #[test]
    fn ema_tracks_trainable_parameters_only() {
        let (g, d) = source();
        let data = toy_target::<f64>(4, 8, 7).unwrap();
        let mut t = new_transfer(&g, &d, 3, &small_train(TrainingMode::HyperV), true).unwrap().trainer;
        t.run(&data, 3, 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(t.g_ema.source_state(), g.source_state());
        assert_ne!(t.g_ema.state(), t.g.state());
        let cfg = TrainConfig { ema: EmaConfig { enabled: false, ..Default::default() }, ..small_train(TrainingMode::HyperV) };
        let mut t = new_transfer(&g, &d, 3, &cfg, true).unwrap().trainer;
        t.run(&data, 2, 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(t.g_ema.state(), t.g.state());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainingMode::ALL {
            assert_eq!(TrainingMode::parse(m.name()).unwrap(), m);
        }
        assert!(TrainingMode::parse("nope").is_err());
    }
}
