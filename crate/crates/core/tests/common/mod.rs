//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use hypermod::modulation::{ModulatedLayer, ModulationParams};
use hypermod::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub layer: ModulatedLayer<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub p: ModulationParams<f64>,
    pub x: Tensor<f64>,
    /// `(n, c, h, w, o, k)`
    pub dims: (usize, usize, usize, usize, usize, usize),
}

/// A random small layer, coefficients (per filter or full) and input.
pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let (o, c) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let (n, h, wd) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5));
    let fan = c * k * k;
    let w: Vec<f64> = (0..o * fan).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let width = if rng.gen_bool(0.5) { o } else { o * fan };
    let coef_shape: Vec<usize> = if width == o { vec![o] } else { vec![o, c, k, k] };
    let mut draw = |len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(lo..hi)).collect() };
    let gamma = draw(width, -2.0, 2.0);
    let beta = draw(width, -1.0, 1.0);
    let db = draw(o, -1.0, 1.0);
    let xs = draw(n * c * h * wd, -1.0, 1.0);
    let layer = ModulatedLayer::from_parts(
        "l",
        Tensor::from_f64(&[o, c, k, k], &w).unwrap(),
        Tensor::from_f64(&[o], &b).unwrap(),
    )
    .unwrap();
    let p = ModulationParams {
        gamma: Tensor::from_f64(&coef_shape, &gamma).unwrap(),
        beta: Tensor::from_f64(&coef_shape, &beta).unwrap(),
        delta_bias: Tensor::from_f64(&[o], &db).unwrap(),
    };
    Case { layer, w, b, p, x: Tensor::from_f64(&[n, c, h, wd], &xs).unwrap(), dims: (n, c, h, wd, o, k) }
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &Tensor<f64>, f: &mut dyn FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    const H: f64 = 1e-5;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[i] += H;
        let mut dn = x.clone();
        dn.data_mut()[i] -= H;
        out.push((f(&up) - f(&dn)) / (2.0 * H));
    }
    out
}

/// Largest relative error; differences below 1e-8 count as round-off.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d < 1e-8 {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}


/// Zero-padded "same" convolution with plain loops.
/// `x: [n][c][h][w]` flattened, `w: [o][c][k][k]` flattened.
pub fn naive_conv(x: &[f64], n: usize, c: usize, h: usize, wd: usize, w: &[f64], o: usize, k: usize, b: &[f64]) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * o * h * wd];
    for s in 0..n {
        for oi in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for a in 0..k {
                            for bb in 0..k {
                                let si = i as isize + a as isize - p;
                                let sj = j as isize + bb as isize - p;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                acc += w[((oi * c + ci) * k + a) * k + bb] * x[((s * c + ci) * h + si as usize) * wd + sj as usize];
                            }
                        }
                    }
                    out[((s * o + oi) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

/// `ŵ = γ (W − μ) / max(σ, eps) + β` per output filter; `gamma`/`beta` have
/// either one entry per filter or one per weight.
pub fn naive_modulate(w: &[f64], o: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let fan = w.len() / o;
    let mut out = vec![0.0; w.len()];
    for f in 0..o {
        let row = &w[f * fan..(f + 1) * fan];
        let mut mu = 0.0;
        for v in row {
            mu += v;
        }
        mu /= fan as f64;
        let mut var = 0.0;
        for v in row {
            var += (v - mu) * (v - mu);
        }
        let sd = (var / fan as f64).sqrt().max(eps);
        for e in 0..fan {
            let idx = if gamma.len() == o { f } else { f * fan + e };
            out[f * fan + e] = gamma[idx] * (row[e] - mu) / sd + beta[idx];
        }
    }
    out
}

fn sqd(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

fn kth_radius(set: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for (j, y) in set.iter().enumerate() {
        if j != i {
            d.push(sqd(&set[i], y));
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[k - 1]
}

/// Improved precision and recall, literal definition.
pub fn oracle_pr(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let rr: Vec<f64> = (0..real.len()).map(|i| kth_radius(real, i, k)).collect();
    let rf: Vec<f64> = (0..fake.len()).map(|i| kth_radius(fake, i, k)).collect();
    let mut p = 0;
    for y in fake {
        if real.iter().zip(&rr).any(|(x, r)| sqd(x, y) <= *r) {
            p += 1;
        }
    }
    let mut rc = 0;
    for x in real {
        if fake.iter().zip(&rf).any(|(y, r)| sqd(x, y) <= *r) {
            rc += 1;
        }
    }
    (p as f64 / fake.len() as f64, rc as f64 / real.len() as f64)
}

/// Density and coverage, literal definition.
pub fn oracle_dc(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let rr: Vec<f64> = (0..real.len()).map(|i| kth_radius(real, i, k)).collect();
    let mut count = 0usize;
    for y in fake {
        for (x, r) in real.iter().zip(&rr) {
            if sqd(x, y) <= *r {
                count += 1;
            }
        }
    }
    let mut cov = 0;
    for (x, r) in real.iter().zip(&rr) {
        if fake.iter().any(|y| sqd(x, y) <= *r) {
            cov += 1;
        }
    }
    (count as f64 / (k * fake.len()) as f64, cov as f64 / real.len() as f64)
}

fn cubic(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    for i in 0..x.len() {
        dot += x[i] * y[i];
    }
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic kernel.
pub fn oracle_mmd2(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += cubic(&x[i], &x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += cubic(&y[i], &y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += cubic(a, b);
        }
    }
    kxx / (n * (n - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (n * m)
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}
