//! View augmentations shared by real and fake images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Area fraction range of the random square crop.
    pub crop_scale: (f64, f64),
    pub hflip: bool,
    /// Max brightness offset, in units of the `[0, 1]` intensity range.
    pub brightness: f64,
    /// Max relative contrast change.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop_scale: (0.6, 1.0), hflip: true, brightness: 0.2, contrast: 0.2 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), hflip: false, brightness: 0.0, contrast: 0.0 }
    }

    pub fn describe(&self) -> String {
        format!(
            "resized_crop(scale={}..{}),hflip={},brightness=±{},contrast=±{}",
            self.crop_scale.0, self.crop_scale.1, self.hflip, self.brightness, self.contrast
        )
    }
}

fn bilinear(src: &[f64], r: usize, y: f64, x: f64) -> f64 {
    let clampi = |v: f64| (v.max(0.0) as usize).min(r - 1);
    let (y0, x0) = (clampi(y.floor()), clampi(x.floor()));
    let (y1, x1) = ((y0 + 1).min(r - 1), (x0 + 1).min(r - 1));
    let (fy, fx) = ((y - y0 as f64).clamp(0.0, 1.0), (x - x0 as f64).clamp(0.0, 1.0));
    let at = |yy: usize, xx: usize| src[yy * r + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Independent random augmentation of every image in `[N, C, R, R]`.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] {
        return shape_err(format!("augmentation expects [N, C, R, R], got {s:?}"));
    }
    let (n, c, r) = (s[0], s[1], s[2]);
    let plane = r * r;
    let mut out = Vec::with_capacity(x.numel());
    let mut chan = vec![0.0; plane];
    for i in 0..n {
        let scale = if cfg.crop_scale.0 < cfg.crop_scale.1 { rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1) } else { cfg.crop_scale.1 };
        let side = scale.sqrt() * r as f64;
        let oy = rng.gen_range(0.0..=(r as f64 - side).max(0.0));
        let ox = rng.gen_range(0.0..=(r as f64 - side).max(0.0));
        let flip = cfg.hflip && rng.gen_bool(0.5);
        let bright = if cfg.brightness > 0.0 { rng.gen_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
        let contrast = if cfg.contrast > 0.0 { 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast) } else { 1.0 };
        let identity_geom = side == r as f64 && !flip;
        let mut img = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for (k, v) in chan.iter_mut().enumerate() {
                *v = x.data()[base + k].as_f64();
            }
            for yy in 0..r {
                for xx in 0..r {
                    let xs = if flip { r - 1 - xx } else { xx };
                    img.push(if identity_geom {
                        chan[yy * r + xs]
                    } else {
                        // pixel centers of the output grid mapped into the crop
                        let sy = oy + (yy as f64 + 0.5) * side / r as f64 - 0.5;
                        let sx = ox + (xs as f64 + 0.5) * side / r as f64 - 0.5;
                        bilinear(&chan, r, sy, sx)
                    });
                }
            }
        }
        if bright != 0.0 || contrast != 1.0 {
            // jitter in [0, 1] intensity units; images live in [-1, 1]
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            for v in &mut img {
                *v = (*v - mean) * contrast + mean + 2.0 * bright;
            }
        }
        out.extend(img.into_iter().map(T::from_f64_lossy));
    }
    Tensor::from_vec(s, out)
}
