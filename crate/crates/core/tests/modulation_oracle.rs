mod common;

use std::collections::BTreeMap;

use common::{naive_conv, naive_modulate, numeric_grad, random_case, rel_err};
use hypermod::modulation::{BatchModulation, ModulatedLayer, ModulationParams, ModulationShape, STAT_EPS};
use hypermod::nn::{Ctx, Module};
use hypermod::{Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn apply_and_forward_match_naive_oracles_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cs = random_case(&mut rng);
        let (n, c, h, wd, o, k) = cs.dims;
        let w_hat = naive_modulate(&cs.w, o, cs.p.gamma.data(), cs.p.beta.data(), STAT_EPS);
        let b_hat: Vec<f64> = cs.b.iter().zip(cs.p.delta_bias.data()).map(|(a, d)| a + d).collect();
        let (w_got, b_got) = cs.layer.apply_modulation(&cs.p).unwrap();
        for (a, e) in w_got.data().iter().zip(&w_hat) {
            worst = worst.max((a - e).abs());
        }
        for (a, e) in b_got.data().iter().zip(&b_hat) {
            worst = worst.max((a - e).abs());
        }
        let want = naive_conv(cs.x.data(), n, c, h, wd, &w_hat, o, k, &b_hat);
        let got = cs.layer.modulated_forward(&cs.p, &cs.x).unwrap();
        for (a, e) in got.data().iter().zip(&want) {
            worst = worst.max((a - e).abs());
        }
        // the graph path used in training
        let m = BatchModulation::repeat(&cs.p, n).unwrap();
        let g = cs.layer.forward_modulated(&Ctx::inference(), &Var::constant(cs.x.clone()), &m).unwrap();
        for (a, e) in g.value().data().iter().zip(&want) {
            worst = worst.max((a - e).abs());
        }
    }
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn coefficient_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let cs = random_case(&mut rng);
        let n = cs.dims.0;
        let o = cs.dims.4;
        let width = cs.p.gamma.numel();
        let row = |t: &Tensor<f64>, len: usize| t.reshape(&[1, len]).unwrap().broadcast_to(&[n, len]).unwrap();
        let (g0, b0, d0) = (row(&cs.p.gamma, width), row(&cs.p.beta, width), row(&cs.p.delta_bias, o));
        let probe: Tensor<f64> = {
            let y = cs.layer.modulated_forward(&cs.p, &cs.x).unwrap();
            Tensor::randn(y.shape(), 1.0, &mut rng)
        };
        let objective = |g: &Tensor<f64>, b: &Tensor<f64>, d: &Tensor<f64>| -> f64 {
            let m = BatchModulation { gamma: Var::constant(g.clone()), beta: Var::constant(b.clone()), delta_bias: Var::constant(d.clone()) };
            let y = cs.layer.forward_modulated(&Ctx::inference(), &Var::constant(cs.x.clone()), &m).unwrap();
            y.value().data().iter().zip(probe.data()).map(|(a, r)| a * r).sum()
        };
        let (gl, bl, dl) = (Var::leaf(g0.clone(), true), Var::leaf(b0.clone(), true), Var::leaf(d0.clone(), true));
        let m = BatchModulation { gamma: gl.clone(), beta: bl.clone(), delta_bias: dl.clone() };
        let y = cs.layer.forward_modulated(&Ctx::inference(), &Var::constant(cs.x.clone()), &m).unwrap();
        let loss = y.mul(&Var::constant(probe.clone())).unwrap().sum();
        let grads = loss.backward(false);
        let ana = |v: &Var<f64>| grads.value_or_zeros(v).data().to_vec();
        let num_g = numeric_grad(&g0, &mut |t| objective(t, &b0, &d0));
        let num_b = numeric_grad(&b0, &mut |t| objective(&g0, t, &d0));
        let num_d = numeric_grad(&d0, &mut |t| objective(&g0, &b0, t));
        assert!(rel_err(&ana(&gl), &num_g) < 1e-4, "gamma");
        assert!(rel_err(&ana(&bl), &num_b) < 1e-4, "beta");
        assert!(rel_err(&ana(&dl), &num_d) < 1e-4, "delta bias");
    }
}

#[test]
fn weight_gradient_through_normalization_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let mut cs = random_case(&mut rng);
        cs.layer.set_trainable(true);
        let n = cs.dims.0;
        let m = BatchModulation::repeat(&cs.p, n).unwrap();
        let probe = Tensor::randn(cs.layer.modulated_forward(&cs.p, &cs.x).unwrap().shape(), 1.0, &mut rng);
        let ctx = Ctx::tracking(|_| true);
        let y = cs.layer.forward_modulated(&ctx, &Var::constant(cs.x.clone()), &m).unwrap();
        let grads = ctx.grads(&y.mul(&Var::constant(probe.clone())).unwrap().sum().backward(false));
        let wname = cs.layer.params().iter().find(|p| p.value.shape().len() == 4).unwrap().name().to_string();
        let state = cs.layer.state();
        let w0 = state[&wname].clone();
        let layer = cs.layer.clone();
        let num = numeric_grad(&w0, &mut |w| {
            let mut l = layer.clone();
            let mut s: BTreeMap<String, Tensor<f64>> = state.clone();
            s.insert(wname.clone(), w.clone());
            l.load_state(&s).unwrap();
            l.refresh_stats().unwrap();
            let y = l.modulated_forward(&cs.p, &cs.x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, r)| a * r).sum()
        });
        // constant filters sit on the σ clamp where the derivative is not smooth
        let fan = w0.numel() / cs.dims.4;
        let flat = w0.data().chunks(fan).any(|r| r.iter().all(|&v| v == r[0]));
        if !flat {
            assert!(rel_err(grads[&wname].data(), &num) < 1e-4, "{:?} {:?} {:?}", cs.dims, grads[&wname].data(), num);
        }
    }
}

#[test]
fn modulation_shape_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = ModulatedLayer::from_parts("l", Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng), Tensor::zeros(&[4])).unwrap();
    assert_eq!(l.modulation_width(ModulationShape::PerFilter), 4);
    assert_eq!(l.modulation_width(ModulationShape::Full), 4 * 27);
}

fn layer_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..4, 1usize..10).prop_flat_map(|(o, fan)| (prop::collection::vec(-3.0f64..3.0, o * fan), Just(o)))
}

proptest! {
    #[test]
    fn recovery_modulation_reproduces_the_source((w, o) in layer_strategy(), full in any::<bool>()) {
        let fan = w.len() / o;
        let layer = ModulatedLayer::<f64>::from_parts("l", Tensor::from_f64(&[o, fan, 1, 1], &w).unwrap(), Tensor::zeros(&[o])).unwrap();
        let shape = if full { ModulationShape::Full } else { ModulationShape::PerFilter };
        let (w_hat, b_hat) = layer.apply_modulation(&layer.recovery_modulation(shape)).unwrap();
        for (&a, &e) in w_hat.data().iter().zip(&w) {
            let d: f64 = a - e;
            prop_assert!(d.abs() <= 1e-9 * (1.0 + e.abs()));
        }
        prop_assert!(b_hat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_filters_are_standardized((w, o) in layer_strategy()) {
        let fan = w.len() / o;
        let layer = ModulatedLayer::<f64>::from_parts("l", Tensor::from_f64(&[o, fan, 1, 1], &w).unwrap(), Tensor::zeros(&[o])).unwrap();
        let wn = layer.normalize_weight();
        for (row, src) in wn.data().chunks(fan).zip(w.chunks(fan)) {
            let mean = row.iter().sum::<f64>() / fan as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan as f64;
            prop_assert!(mean.abs() < 1e-9);
            let spread = src.iter().map(|v| (v - src[0]).abs()).fold(0.0, f64::max);
            if spread > 1e-6 {
                prop_assert!((var - 1.0).abs() < 1e-8);
            } else {
                prop_assert!(row.iter().all(|v| v.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn modulation_is_affine_in_gamma_and_beta((w, o) in layer_strategy(), a in -2.0f64..2.0, c in -2.0f64..2.0) {
        let fan = w.len() / o;
        let layer = ModulatedLayer::<f64>::from_parts("l", Tensor::from_f64(&[o, fan, 1, 1], &w).unwrap(), Tensor::zeros(&[o])).unwrap();
        let p = ModulationParams { gamma: Tensor::full(&[o], a), beta: Tensor::full(&[o], c), delta_bias: Tensor::zeros(&[o]) };
        let (w_hat, _) = layer.apply_modulation(&p).unwrap();
        let wn = layer.normalize_weight();
        for (h, n) in w_hat.data().iter().zip(wn.data()) {
            prop_assert!((h - (a * n + c)).abs() < 1e-9);
        }
    }
}
