use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with per-parameter-prefix learning-rate multipliers.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    lr_scales: Vec<(String, f64)>,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, lr_scales: Vec::new(), moments: BTreeMap::new(), steps: 0 }
    }

    /// Parameters whose name starts with `prefix` use `lr * scale`.
    pub fn with_lr_scale(mut self, prefix: impl Into<String>, scale: f64) -> Self {
        self.lr_scales.push((prefix.into(), scale));
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn lr_for(&self, name: &str) -> f64 {
        let scale = self
            .lr_scales
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .map(|(_, s)| *s)
            .next_back()
            .unwrap_or(1.0);
        self.config.lr * scale
    }

    /// Applies one update to every parameter of `module` that has an entry in
    /// `grads`. Frozen parameters are refused.
    pub fn step(&mut self, module: &mut dyn Module<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.steps += 1;
        let t = self.steps as f64;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let mut err = None;
        let lrs: BTreeMap<&String, f64> = grads.keys().map(|k| (k, self.lr_for(k))).collect();
        let moments = &mut self.moments;
        module.visit_mut(&mut |p| {
            let Some(g) = grads.get(p.name()) else { return };
            if p.frozen {
                err = Some(Error::InvalidInput(format!("optimizer step on frozen parameter {}", p.name())));
                return;
            }
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let step = T::from_f64_lossy(lrs[&p.name().to_string()] / bc1);
            let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
            let (ib1, ib2) = (T::one() - b1, T::one() - b2);
            let sq_bc2 = T::from_f64_lossy(bc2.sqrt());
            let e = T::from_f64_lossy(eps);
            let pv = p.value.data_mut();
            for i in 0..pv.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + ib1 * gi;
                let vi = b2 * v.data()[i] + ib2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pv[i] -= step * mi / (vi.sqrt() / sq_bc2 + e);
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Optimizer state as named arrays (`<param>.m`, `<param>.v`) plus the
    /// step counter.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor<T>>) {
        let mut out = BTreeMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("{k}.m"), m.clone());
            out.insert(format!("{k}.v"), v.clone());
        }
        (self.steps, out)
    }

    pub fn load_state(&mut self, steps: u64, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (k, m) in state {
            if let Some(name) = k.strip_suffix(".m") {
                let v = state
                    .get(&format!("{name}.v"))
                    .ok_or_else(|| Error::InvalidInput(format!("optimizer state lacks {name}.v")))?;
                moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        self.moments = moments;
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param<f64>);
    impl Module<f64> for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut m = One(Param::new("x", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 0.0 });
        let g = BTreeMap::from([("x".to_string(), Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap())]);
        opt.step(&mut m, &g).unwrap();
        let v = m.0.value.data();
        assert!((v[0] - 0.9).abs() < 1e-12 && (v[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn lr_scale_and_frozen_refusal() {
        let mut m = One(Param::new("cls.x", Tensor::from_f64(&[1], &[0.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig { lr: 1.0, beta1: 0.0, beta2: 0.0, eps: 0.0 }).with_lr_scale("cls.", 0.01);
        let g = BTreeMap::from([("cls.x".to_string(), Tensor::from_f64(&[1], &[2.0]).unwrap())]);
        opt.step(&mut m, &g).unwrap();
        assert!((m.0.value.data()[0] + 0.01).abs() < 1e-12);
        m.0.frozen = true;
        assert!(opt.step(&mut m, &g).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut m = One(Param::new("x", Tensor::from_f64(&[1], &[5.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..500 {
            let x = m.0.value.data()[0];
            let g = BTreeMap::from([("x".to_string(), Tensor::from_f64(&[1], &[2.0 * (x - 1.0)]).unwrap())]);
            opt.step(&mut m, &g).unwrap();
        }
        assert!((m.0.value.data()[0] - 1.0).abs() < 0.05);
    }
}
