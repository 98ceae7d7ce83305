//! In-memory labeled image sets and the synthetic toy domains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images `[N, 3, R, R]` in `[-1, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet<T: Scalar> {
    images: Tensor<T>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl<T: Scalar> ImageSet<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Dataset(format!("images must be [N, 3, R, R], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if labels.len() != s[0] {
            return Err(Error::Dataset(format!("{} labels for {} images", labels.len(), s[0])));
        }
        if class_names.is_empty() {
            return Err(Error::Dataset("dataset has no classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Dataset(format!("label {bad} with {} classes", class_names.len())));
        }
        Ok(Self { images, labels, class_names })
    }

    /// A single-class set.
    pub fn unlabeled(images: Tensor<T>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        Self::new(images, vec![0; n], vec!["all".into()])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Images and labels at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.select_rows(idx)?;
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn class_images(&self, class: usize) -> Result<Tensor<T>> {
        Ok(self.batch(&self.indices_of(class))?.0)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.len())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ImageSet<U> {
        ImageSet { images: self.images.cast(), labels: self.labels.clone(), class_names: self.class_names.clone() }
    }
}

/// Names of the toy target classes in label order.
pub const TOY_CLASSES: [&str; 3] = ["discs", "squares", "triangles"];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Blob,
    Disc,
    Square,
    Triangle,
}

struct Canvas {
    r: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(r: usize, bg: [f64; 3]) -> Self {
        Self { r, px: vec![bg; r * r] }
    }

    /// Paints `color` with coverage estimated on a 4x4 subpixel grid.
    fn paint(&mut self, color: [f64; 3], inside: impl Fn(f64, f64) -> f64) {
        const SS: usize = 4;
        for y in 0..self.r {
            for x in 0..self.r {
                let mut cov = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / self.r as f64;
                        let v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / self.r as f64;
                        cov += inside(u, v);
                    }
                }
                cov /= (SS * SS) as f64;
                let p = &mut self.px[y * self.r + x];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - cov) + color[c] * cov;
                }
            }
        }
    }

    fn write_into(&self, out: &mut [f64]) {
        let rr = self.r * self.r;
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                out[c * rr + i] = (p[c].clamp(0.0, 1.0)) * 2.0 - 1.0;
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw(shape: Shape, r: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let bg = rng.gen_range(0.05..0.3);
    let mut cv = Canvas::new(r, [bg, bg, bg * rng.gen_range(0.8..1.2)]);
    let cx = rng.gen_range(0.3..0.7);
    let cy = rng.gen_range(0.3..0.7);
    let size = rng.gen_range(0.18..0.3);
    match shape {
        Shape::Blob => {
            for _ in 0..rng.gen_range(1..=2) {
                let col = hsv(rng.gen(), rng.gen_range(0.2..0.9), rng.gen_range(0.5..1.0));
                let (bx, by) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
                let (sx, sy) = (rng.gen_range(0.08..0.25), rng.gen_range(0.08..0.25));
                cv.paint(col, |u, v| (-0.5 * (((u - bx) / sx).powi(2) + ((v - by) / sy).powi(2))).exp());
            }
        }
        Shape::Disc => {
            let col = hsv(rng.gen_range(-0.05..0.1), rng.gen_range(0.7..1.0), rng.gen_range(0.8..1.0));
            cv.paint(col, |u, v| f64::from(((u - cx).powi(2) + (v - cy).powi(2)).sqrt() < size));
        }
        Shape::Square => {
            let col = hsv(rng.gen_range(0.28..0.4), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0));
            cv.paint(col, |u, v| f64::from((u - cx).abs() < size * 0.9 && (v - cy).abs() < size * 0.9));
        }
        Shape::Triangle => {
            let col = hsv(rng.gen_range(0.55..0.68), rng.gen_range(0.7..1.0), rng.gen_range(0.8..1.0));
            let h = size * 1.8;
            cv.paint(col, |u, v| {
                let dy = v - (cy - h / 2.0);
                f64::from((0.0..h).contains(&dy) && (u - cx).abs() < dy * 0.6)
            });
        }
    }
    cv.write_into(out);
}

fn render<T: Scalar>(shapes: &[Shape], r: usize, seed: u64) -> Result<Tensor<T>> {
    let per = 3 * r * r;
    let mut data = vec![0.0; shapes.len() * per];
    for (i, &s) in shapes.iter().enumerate() {
        // one stream per image keeps images independent of dataset size
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        draw(s, r, &mut rng, &mut data[i * per..(i + 1) * per]);
    }
    Tensor::from_f64(&[shapes.len(), 3, r, r], &data)
}

/// Unconditional source domain: one or two soft blobs of arbitrary color.
pub fn toy_source<T: Scalar>(n: usize, resolution: usize, seed: u64) -> Result<ImageSet<T>> {
    ImageSet::unlabeled(render(&vec![Shape::Blob; n], resolution, seed)?)
}

/// Three-class target domain: warm discs, green squares, blue triangles.
/// Labels are interleaved, `per_class` images each.
pub fn toy_target<T: Scalar>(per_class: usize, resolution: usize, seed: u64) -> Result<ImageSet<T>> {
    let kinds = [Shape::Disc, Shape::Square, Shape::Triangle];
    let mut labels: Vec<usize> = (0..per_class * 3).map(|i| i % 3).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let shapes: Vec<Shape> = labels.iter().map(|&l| kinds[l]).collect();
    ImageSet::new(render(&shapes, resolution, seed)?, labels, TOY_CLASSES.iter().map(|s| s.to_string()).collect())
}
