//! FID, KID, precision/recall, density/coverage and perceptual path length.
//!
//! All metric arithmetic is done in f64 on feature matrices `[N, d]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{shape_err, Error, Result};
use crate::hyper::{lerp, ClassInput};
use crate::nn::he_std;
use crate::scalar::Scalar;
use crate::synthesis::{ClassSpec, Generator};
use crate::tensor::{self, Tensor};

/// Diagonal regularizer added to both covariances.
pub const EPS_COV: f64 = 1e-6;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_PPL_EPS: f64 = 1e-4;

fn check_features(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return shape_err(format!("feature sets {sa:?} and {sb:?}"));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::InvalidInput("non-finite features".into()));
    }
    Ok((sa[0], sb[0], sa[1]))
}

fn to_matrix(x: &Tensor<f64>) -> DMatrix<f64> {
    let s = x.shape();
    DMatrix::from_row_slice(s[0], s[1], x.data())
}

/// Mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &Tensor<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = to_matrix(x);
    let n = m.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!("moments need at least 2 samples, got {n}")));
    }
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between `N(μ1, Σ1)` and `N(μ2, Σ2)`, with `ε_cov I` added
/// to both covariances.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return shape_err("moment dimensions differ");
    }
    let reg = DMatrix::<f64>::identity(d, d) * EPS_COV;
    let (s1, s2) = (s1 + &reg, s2 + &reg);
    let r = sym_sqrt(&s1);
    let prod = &r * &s2 * &r;
    let sym = (&prod + prod.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn fid(real: &Tensor<f64>, fake: &Tensor<f64>) -> Result<f64> {
    check_features(real, fake)?;
    let (m1, s1) = moments(real)?;
    let (m2, s2) = moments(fake)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// `(x·y / d + 1)³`.
pub fn kid_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel on the full sets.
pub fn mmd2_unbiased(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (n, m, d) = check_features(x, y)?;
    if n < 2 || m < 2 {
        return Err(Error::InvalidInput("MMD needs at least 2 samples per set".into()));
    }
    fn row(t: &Tensor<f64>, i: usize, d: usize) -> &[f64] {
        &t.data()[i * d..(i + 1) * d]
    }
    let within = |t: &Tensor<f64>, k: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += kid_kernel(row(t, i, d), row(t, j, d));
                }
            }
        }
        s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += kid_kernel(row(x, i, d), row(y, j, d));
        }
    }
    Ok(within(x, n) + within(y, m) - 2.0 * cross / (n * m) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KidConfig {
    /// Subset size; `0` uses the full sets once.
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self { subset_size: 0, n_subsets: 10, seed: 0 }
    }
}

/// KID as `(mean, standard error)` of MMD² over random subsets.
pub fn kid(real: &Tensor<f64>, fake: &Tensor<f64>, cfg: &KidConfig) -> Result<(f64, f64)> {
    let (n, m, _) = check_features(real, fake)?;
    if cfg.subset_size == 0 {
        return Ok((mmd2_unbiased(real, fake)?, 0.0));
    }
    if cfg.subset_size > n.min(m) {
        return Err(Error::InvalidInput(format!("KID subset size {} exceeds sample count {}", cfg.subset_size, n.min(m))));
    }
    if cfg.n_subsets == 0 {
        return Err(Error::InvalidInput("KID needs at least one subset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = |t: &Tensor<f64>, idx: &[usize]| t.select_rows(idx);
    let mut vals = Vec::with_capacity(cfg.n_subsets);
    for _ in 0..cfg.n_subsets {
        let ia: Vec<usize> = rand::seq::index::sample(&mut rng, n, cfg.subset_size).into_vec();
        let ib: Vec<usize> = rand::seq::index::sample(&mut rng, m, cfg.subset_size).into_vec();
        vals.push(mmd2_unbiased(&rows(real, &ia)?, &rows(fake, &ib)?)?);
    }
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let se = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// Squared Euclidean distances `[n_a × n_b]`.
pub fn pairwise_sq_dists(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = a.shape()[1];
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    (0..na)
        .map(|i| {
            let x = &a.data()[i * d..(i + 1) * d];
            (0..nb)
                .map(|j| x.iter().zip(&b.data()[j * d..(j + 1) * d]).map(|(p, q)| (p - q) * (p - q)).sum())
                .collect()
        })
        .collect()
}

/// Squared distance of every row to its `k`-th nearest other row.
pub fn knn_radii_sq(x: &Tensor<f64>, k: usize) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("k = {k} needs 1 ≤ k < sample count {n}")));
    }
    let d = pairwise_sq_dists(x, x);
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect())
}

/// Improved precision and recall from `k`-NN manifolds. A ball of radius 0
/// contains only points at distance 0.
pub fn precision_recall(real: &Tensor<f64>, fake: &Tensor<f64>, k: usize) -> Result<(f64, f64)> {
    let (n, m, _) = check_features(real, fake)?;
    let (rr, rf) = (knn_radii_sq(real, k)?, knn_radii_sq(fake, k)?);
    let d = pairwise_sq_dists(real, fake);
    let p = (0..m).filter(|&j| (0..n).any(|i| d[i][j] <= rr[i])).count() as f64 / m as f64;
    let r = (0..n).filter(|&i| (0..m).any(|j| d[i][j] <= rf[j])).count() as f64 / n as f64;
    Ok((p, r))
}

pub fn density_coverage(real: &Tensor<f64>, fake: &Tensor<f64>, k: usize) -> Result<(f64, f64)> {
    let (n, m, _) = check_features(real, fake)?;
    let rr = knn_radii_sq(real, k)?;
    let d = pairwise_sq_dists(real, fake);
    let inside: usize = (0..n).map(|i| (0..m).filter(|&j| d[i][j] <= rr[i]).count()).sum();
    let density = inside as f64 / (k * m) as f64;
    let coverage = (0..n).filter(|&i| (0..m).any(|j| d[i][j] <= rr[i])).count() as f64 / n as f64;
    Ok((density, coverage))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplMode {
    /// `t ~ U(0, 1)`.
    Full,
    /// `t ∈ {0, 1}`.
    End,
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `E[d(F(lerp(t)), F(lerp(t + ε))) / ε²]` over the paths `starts[i] → ends[i]`.
/// `render` maps a batch of path points `[N, p]` to outputs `[N, q]`.
pub fn perceptual_path_length<R: Rng + ?Sized>(
    render: &mut dyn FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    starts: &Tensor<f64>,
    ends: &Tensor<f64>,
    mode: PplMode,
    eps: f64,
    distance: &dyn Fn(&[f64], &[f64]) -> f64,
    rng: &mut R,
) -> Result<f64> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidInput(format!("PPL step ε must be positive, got {eps}")));
    }
    if starts.shape() != ends.shape() || starts.shape().len() != 2 || starts.shape()[0] == 0 {
        return shape_err(format!("path endpoints {:?} and {:?}", starts.shape(), ends.shape()));
    }
    let (n, p) = (starts.shape()[0], starts.shape()[1]);
    let mut a = Vec::with_capacity(n * p);
    let mut b = Vec::with_capacity(n * p);
    for i in 0..n {
        let t = match mode {
            PplMode::Full => rng.gen::<f64>(),
            PplMode::End => f64::from(u8::from(rng.gen_bool(0.5))),
        };
        let (s, e) = (starts.select_rows(&[i])?, ends.select_rows(&[i])?);
        a.extend_from_slice(lerp(&s, &e, t)?.data());
        b.extend_from_slice(lerp(&s, &e, t + eps)?.data());
    }
    let fa = render(&Tensor::from_vec(&[n, p], a)?)?;
    let fb = render(&Tensor::from_vec(&[n, p], b)?)?;
    if fa.shape() != fb.shape() || fa.shape()[0] != n {
        return shape_err(format!("render produced {:?} for {n} points", fa.shape()));
    }
    let q = fa.numel() / n;
    let total: f64 = (0..n).map(|i| distance(&fa.data()[i * q..(i + 1) * q], &fb.data()[i * q..(i + 1) * q])).sum();
    Ok(total / n as f64 / (eps * eps))
}

/// Deterministic map from images to feature vectors.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    /// Features `[N, d]` of images `[N, 3, R, R]` in `[-1, 1]`.
    fn extract(&self, images: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Flattened pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> String {
        "identity".into()
    }
    fn extract(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = images.shape()[0];
        images.reshape(&[n, images.numel() / n.max(1)])
    }
}

/// Fixed, seeded random convolutional network: two conv3x3 + lrelu + pool
/// stages, then the spatial mean and std of each of 32 channels.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    layers: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl RandomConvExtractor {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (ci, co) in [(3, 16), (16, 32)] {
            let w = Tensor::randn(&[co, ci, 3, 3], he_std(ci * 9), &mut rng);
            let b = Tensor::randn(&[co], 0.1, &mut rng);
            layers.push((w, b));
        }
        Self { seed, layers }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        format!("randconv{}-s{}", Self::DIM, self.seed)
    }

    fn extract(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < 4 {
            return shape_err(format!("extractor expects [N, 3, R, R] with R ≥ 4, got {s:?}"));
        }
        let n = s[0];
        let mut out = Vec::with_capacity(n * Self::DIM);
        for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
            let per = images.numel() / n;
            let data = images.data()[chunk[0] * per..(chunk[chunk.len() - 1] + 1) * per].to_vec();
            let mut h = Tensor::from_vec(&[chunk.len(), s[1], s[2], s[3]], data)?;
            for (w, b) in &self.layers {
                let o = w.shape()[0];
                h = tensor::conv2d(&h, w, false)?;
                let plane = h.shape()[2] * h.shape()[3];
                for (i, v) in h.data_mut().iter_mut().enumerate() {
                    let x = *v + b.data()[(i / plane) % o];
                    *v = if x > 0.0 { x } else { 0.2 * x };
                }
                h = tensor::avgpool2x(&h)?;
            }
            let (c, plane) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
            for i in 0..chunk.len() {
                let mut means = Vec::with_capacity(c);
                let mut sds = Vec::with_capacity(c);
                for ch in 0..c {
                    let v = &h.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    let m = v.iter().sum::<f64>() / plane as f64;
                    means.push(m);
                    sds.push((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane as f64).sqrt());
                }
                out.extend(means);
                out.extend(sds);
            }
        }
        Tensor::from_vec(&[n, Self::DIM], out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Generated samples per class; `0` matches the real count.
    pub n_fake_per_class: usize,
    pub k: usize,
    pub kid: KidConfig,
    pub fid: bool,
    pub kid_enabled: bool,
    pub precision_recall: bool,
    pub density_coverage: bool,
    pub ppl: bool,
    pub ppl_paths: usize,
    pub ppl_eps: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_fake_per_class: 0,
            k: DEFAULT_K,
            kid: KidConfig::default(),
            fid: true,
            kid_enabled: true,
            precision_recall: true,
            density_coverage: true,
            ppl: false,
            ppl_paths: 64,
            ppl_eps: DEFAULT_PPL_EPS,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// FID only, the cheap setting used inside training loops.
    pub fn fid_only() -> Self {
        Self { kid_enabled: false, precision_recall: false, density_coverage: false, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub fid: Option<f64>,
    /// ×100
    pub kid: Option<f64>,
    /// ×100
    pub kid_stderr: Option<f64>,
    /// Percent.
    pub precision: Option<f64>,
    /// Percent.
    pub recall: Option<f64>,
    /// ×100
    pub density: Option<f64>,
    /// ×100
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor: String,
    pub k: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Mean of the per-class FIDs.
    pub mfid: Option<f64>,
    pub kid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub density: Option<f64>,
    pub coverage: Option<f64>,
    pub ppl_full: Option<f64>,
    pub ppl_end: Option<f64>,
}

impl MetricReport {
    /// `(name, value)` for every populated mean metric.
    pub fn summary(&self) -> Vec<(&'static str, f64)> {
        [
            ("mFID", self.mfid),
            ("KIDx100", self.kid),
            ("Precision%", self.precision),
            ("Recall%", self.recall),
            ("Densityx100", self.density),
            ("Coveragex100", self.coverage),
            ("PPL_full", self.ppl_full),
            ("PPL_end", self.ppl_end),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("extractor={} k={}\n", self.extractor, self.k);
        s.push_str("class        n_real n_fake      FID   KIDx100   P%     R%     Dx100  Cx100\n");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for c in &self.per_class {
            s.push_str(&format!(
                "{:<12} {:>6} {:>6} {:>8} {:>9} {:>6} {:>6} {:>6} {:>6}\n",
                c.name,
                c.n_real,
                c.n_fake,
                f(c.fid),
                f(c.kid),
                f(c.precision),
                f(c.recall),
                f(c.density),
                f(c.coverage)
            ));
        }
        for (k, v) in self.summary() {
            s.push_str(&format!("{k} = {v:.4}\n"));
        }
        s
    }
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.collect::<Option<Vec<_>>>()?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Generated images of one class, in batches.
pub fn generate_class<T: Scalar>(g: &Generator<T>, input: ClassInput, z: &Tensor<T>) -> Result<Tensor<f64>> {
    let n = z.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let zb = z.select_rows(&idx)?;
        let spec_inputs = vec![input; idx.len()];
        let spec = if g.conditioning.n_classes().is_some() { ClassSpec::Inputs(&spec_inputs) } else { ClassSpec::None };
        parts.push(g.sample(&zb, &spec)?.cast::<f64>());
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Per-class evaluation of a conditional generator against `data`; an
/// unconditional generator is compared with every class.
pub fn evaluate_generator<T: Scalar>(
    g: &Generator<T>,
    data: &ImageSet<T>,
    extractor: &dyn FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if let Some(nc) = g.conditioning.n_classes() {
        if nc != data.n_classes() {
            return Err(Error::Config(format!("generator has {nc} classes, dataset {}", data.n_classes())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_class = Vec::with_capacity(data.n_classes());
    for c in 0..data.n_classes() {
        let real_img = data.class_images(c)?.cast::<f64>();
        let n_real = real_img.shape()[0];
        let n_fake = if cfg.n_fake_per_class == 0 { n_real } else { cfg.n_fake_per_class };
        if (cfg.precision_recall || cfg.density_coverage) && (n_real <= cfg.k || n_fake <= cfg.k) {
            return Err(Error::InvalidInput(format!(
                "class {c} has {n_real} real / {n_fake} generated samples, kNN metrics need more than k = {}",
                cfg.k
            )));
        }
        let z = g.sample_latents(n_fake, &mut rng);
        let fake_img = generate_class(g, ClassInput::Target(c), &z)?;
        let (real, fake) = (extractor.extract(&real_img)?, extractor.extract(&fake_img)?);
        let mut m = ClassMetrics { class: c, name: data.class_names()[c].clone(), n_real, n_fake, ..Default::default() };
        if cfg.fid {
            m.fid = Some(fid(&real, &fake)?);
        }
        if cfg.kid_enabled {
            let (v, se) = kid(&real, &fake, &cfg.kid)?;
            m.kid = Some(100.0 * v);
            m.kid_stderr = Some(100.0 * se);
        }
        if cfg.precision_recall {
            let (p, r) = precision_recall(&real, &fake, cfg.k)?;
            m.precision = Some(100.0 * p);
            m.recall = Some(100.0 * r);
        }
        if cfg.density_coverage {
            let (d, cv) = density_coverage(&real, &fake, cfg.k)?;
            m.density = Some(100.0 * d);
            m.coverage = Some(100.0 * cv);
        }
        per_class.push(m);
    }
    let mut report = MetricReport {
        extractor: extractor.id(),
        k: cfg.k,
        mfid: mean_of(per_class.iter().map(|c| c.fid)),
        kid: mean_of(per_class.iter().map(|c| c.kid)),
        precision: mean_of(per_class.iter().map(|c| c.precision)),
        recall: mean_of(per_class.iter().map(|c| c.recall)),
        density: mean_of(per_class.iter().map(|c| c.density)),
        coverage: mean_of(per_class.iter().map(|c| c.coverage)),
        per_class,
        ..Default::default()
    };
    if cfg.ppl {
        report.ppl_full = Some(class_ppl(g, extractor, PplMode::Full, cfg.ppl_paths, cfg.ppl_eps, &mut rng)?);
        report.ppl_end = Some(class_ppl(g, extractor, PplMode::End, cfg.ppl_paths, cfg.ppl_eps, &mut rng)?);
    }
    Ok(report)
}

/// PPL along class-space lines between two distinct random classes, with one
/// fixed latent per path and squared Euclidean distance on extractor
/// features.
pub fn class_ppl<T: Scalar, R: Rng + ?Sized>(
    g: &Generator<T>,
    extractor: &dyn FeatureExtractor,
    mode: PplMode,
    n_paths: usize,
    eps: f64,
    rng: &mut R,
) -> Result<f64> {
    let net = g
        .conditioning
        .class_net()
        .ok_or_else(|| Error::InvalidInput("class PPL needs a generator with a class space".into()))?;
    let nc = net.n_classes();
    if nc < 2 {
        return Err(Error::InvalidInput("class PPL needs at least two classes".into()));
    }
    let vecs: Vec<Tensor<f64>> = (0..nc).map(|c| net.embed_class(c).map(|v| v.cast())).collect::<Result<_>>()?;
    let d = vecs[0].numel();
    let mut starts = Vec::with_capacity(n_paths * d);
    let mut ends = Vec::with_capacity(n_paths * d);
    for _ in 0..n_paths {
        let pair: Vec<usize> = rand::seq::index::sample(rng, nc, 2).into_vec();
        starts.extend_from_slice(vecs[pair[0]].data());
        ends.extend_from_slice(vecs[pair[1]].data());
    }
    let z = g.sample_latents(n_paths, rng);
    let mut render = |v: &Tensor<f64>| -> Result<Tensor<f64>> {
        let img = g.sample(&z, &ClassSpec::Vectors(&v.cast::<T>()))?;
        extractor.extract(&img.cast())
    };
    perceptual_path_length(
        &mut render,
        &Tensor::from_vec(&[n_paths, d], starts)?,
        &Tensor::from_vec(&[n_paths, d], ends)?,
        mode,
        eps,
        &squared_euclidean,
        rng,
    )
}

/// Shuffles rows (used by invariance tests and tools).
pub fn shuffle_rows<R: Rng + ?Sized>(x: &Tensor<f64>, rng: &mut R) -> Result<Tensor<f64>> {
    let mut idx: Vec<usize> = (0..x.shape()[0]).collect();
    idx.shuffle(rng);
    x.select_rows(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn fid_closed_forms() {
        let mu = |v: &[f64]| DVector::from_row_slice(v);
        let cov = |d: usize, v: &[f64]| DMatrix::from_row_slice(d, d, v);
        let one_d = frechet_distance(&mu(&[0.0]), &cov(1, &[1.0]), &mu(&[1.0]), &cov(1, &[4.0])).unwrap();
        assert!((one_d - 2.0).abs() < 1e-5);
        let eye = DMatrix::identity(3, 3);
        let m = mu(&[1.0, -2.0, 0.5]);
        let d = frechet_distance(&DVector::zeros(3), &eye, &m, &eye).unwrap();
        assert!((d - m.dot(&m)).abs() < 1e-5);
    }

    #[test]
    fn fid_of_identical_sets_is_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::randn(&[40, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[40, 4], 1.5, &mut rng);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        let sa = shuffle_rows(&a, &mut rng).unwrap();
        assert!((fid(&sa, &b).unwrap() - fid(&a, &b).unwrap()).abs() < 1e-9);
        assert!(fid(&a, &t(1, 3, &[0.0; 3])).is_err());
    }

    #[test]
    fn kid_kernel_value() {
        assert_eq!(kid_kernel(&[1.0, 1.0], &[1.0, 1.0]), 8.0);
    }

    #[test]
    fn kid_subset_validation() {
        let a = t(3, 1, &[0.0, 1.0, 2.0]);
        assert!(kid(&a, &a, &KidConfig { subset_size: 4, n_subsets: 1, seed: 0 }).is_err());
        assert!(kid(&a, &a, &KidConfig { subset_size: 2, n_subsets: 3, seed: 0 }).is_ok());
    }

    #[test]
    fn knn_metrics_simple_cases() {
        let a = t(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(precision_recall(&a, &a, 1).unwrap(), (1.0, 1.0));
        assert_eq!(density_coverage(&a, &a, 1).unwrap().1, 1.0);
        let far = t(4, 1, &[100.0, 101.0, 102.0, 103.0]);
        assert_eq!(precision_recall(&a, &far, 1).unwrap(), (0.0, 0.0));
        assert_eq!(density_coverage(&a, &far, 1).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&a, &a, 4).is_err());
        assert!(precision_recall(&a, &a, 0).is_err());
    }

    #[test]
    fn zero_radius_balls_hold_only_exact_copies() {
        let real = t(3, 1, &[0.0, 0.0, 5.0]);
        assert_eq!(knn_radii_sq(&real, 1).unwrap(), vec![0.0, 0.0, 25.0]);
        let (_, c) = density_coverage(&real, &t(2, 1, &[1e-9, 9.0]), 1).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ppl_of_identity_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let e = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let expect: f64 = (0..5)
            .map(|i| (0..3).map(|j| (e.data()[i * 3 + j] - s.data()[i * 3 + j]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 5.0;
        for mode in [PplMode::Full, PplMode::End] {
            let v = perceptual_path_length(&mut |x| Ok(x.clone()), &s, &e, mode, 1e-4, &squared_euclidean, &mut rng).unwrap();
            assert!((v - expect).abs() < 1e-6 * expect.max(1.0), "{v} vs {expect}");
        }
        let c = perceptual_path_length(&mut |x| Ok(Tensor::zeros(x.shape())), &s, &e, PplMode::Full, 1e-4, &squared_euclidean, &mut rng).unwrap();
        assert_eq!(c, 0.0);
        assert!(perceptual_path_length(&mut |x| Ok(x.clone()), &s, &e, PplMode::Full, 0.0, &squared_euclidean, &mut rng).is_err());
    }

    #[test]
    fn random_conv_extractor_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[3, 3, 16, 16], 0.5, &mut rng);
        let e = RandomConvExtractor::new(7);
        let f = e.extract(&x).unwrap();
        assert_eq!(f.shape(), &[3, 64]);
        assert_eq!(f, RandomConvExtractor::new(7).extract(&x).unwrap());
        assert_ne!(f, RandomConvExtractor::new(8).extract(&x).unwrap());
        assert_eq!(e.id(), "randconv64-s7");
        // batch composition does not change per-image features
        let f0 = e.extract(&x.reshape(&[3, 768]).unwrap().select_rows(&[0]).unwrap().reshape(&[1, 3, 16, 16]).unwrap()).unwrap();
        assert!(f0.max_abs_diff(&f.select_rows(&[0]).unwrap()) < 1e-12);
    }
}
