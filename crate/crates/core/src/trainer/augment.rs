//! Desk-scale view augmentations for vector and small-image samples.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleShape {
    Vector,
    Image { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Vector data: additive Gaussian noise.
    pub gaussian_noise_sigma: f64,
    /// Vector data: fraction of coordinates zeroed per view.
    pub mask_fraction: f64,
    /// Vector data: scale drawn uniformly from `[1 − r, 1 + r]`.
    pub scale_jitter_range: f64,
    /// Image data: zero padding before the random crop.
    pub crop_padding: usize,
    pub flip_enabled: bool,
    /// Image data: additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gaussian_noise_sigma: 0.5,
            mask_fraction: 0.1,
            scale_jitter_range: 0.2,
            crop_padding: 2,
            flip_enabled: false,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            gaussian_noise_sigma: 0.0,
            mask_fraction: 0.0,
            scale_jitter_range: 0.0,
            crop_padding: 0,
            flip_enabled: false,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config(format!("mask_fraction {} outside [0, 1)", self.mask_fraction)));
        }
        if !(self.gaussian_noise_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigmas must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.scale_jitter_range) {
            return Err(Error::config(format!(
                "scale_jitter_range {} outside [0, 1)",
                self.scale_jitter_range
            )));
        }
        Ok(())
    }
}

/// One augmented view of `sample`.
pub fn augment(sample: &[f32], shape: SampleShape, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    match shape {
        SampleShape::Vector => augment_vector(sample, cfg, rng),
        SampleShape::Image { rows, cols } => augment_image(sample, rows, cols, cfg, rng),
    }
}

/// The view for `(seed, instance, epoch, view)`; independent of call order.
pub fn augment_view(
    sample: &[f32],
    shape: SampleShape,
    cfg: &AugmentConfig,
    seed: u64,
    instance: usize,
    epoch: usize,
    view: usize,
) -> Vec<f32> {
    let mut rng = substream(seed, Stream::Augment, instance as u64, ((epoch as u64) << 8) | view as u64);
    augment(sample, shape, cfg, &mut rng)
}

fn add_noise(x: &mut [f32], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        for v in x.iter_mut() {
            *v += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
}

fn augment_vector(sample: &[f32], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    let mut x = sample.to_vec();
    add_noise(&mut x, cfg.gaussian_noise_sigma, rng);
    let masked = (cfg.mask_fraction * x.len() as f64).round() as usize;
    if masked > 0 {
        for i in index::sample(rng, x.len(), masked.min(x.len())) {
            x[i] = 0.0;
        }
    }
    if cfg.scale_jitter_range > 0.0 {
        let r = cfg.scale_jitter_range;
        let s = rng.random_range(1.0 - r..=1.0 + r) as f32;
        x.iter_mut().for_each(|v| *v *= s);
    }
    x
}

fn augment_image(sample: &[f32], rows: usize, cols: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    debug_assert_eq!(sample.len(), rows * cols);
    let pad = cfg.crop_padding as i64;
    let (dy, dx) = if pad > 0 {
        (rng.random_range(-pad..=pad) as isize, rng.random_range(-pad..=pad) as isize)
    } else {
        (0, 0)
    };
    let flip = cfg.flip_enabled && rng.random_bool(0.5);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let src_c = if flip { cols - 1 - c } else { c } as isize + dx;
            let src_r = r as isize + dy;
            if (0..rows as isize).contains(&src_r) && (0..cols as isize).contains(&src_c) {
                out[r * cols + c] = sample[src_r as usize * cols + src_c as usize];
            }
        }
    }
    add_noise(&mut out, cfg.noise_sigma, rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_knobs_are_identity() {
        let x = [0.5f32, -1.25, 3.0, 0.0];
        let id = AugmentConfig::identity();
        assert_eq!(augment(&x, SampleShape::Vector, &id, &mut seeded(1)), x);
        assert_eq!(augment(&x, SampleShape::Image { rows: 2, cols: 2 }, &id, &mut seeded(1)), x);
    }

    #[test]
    fn full_mask_rejected() {
        let cfg = AugmentConfig { mask_fraction: 1.0, ..AugmentConfig::identity() };
        assert!(cfg.validate().is_err());
        AugmentConfig::default().validate().unwrap();
    }

    #[test]
    fn mask_zeroes_the_requested_share() {
        let x = vec![1.0f32; 20];
        let cfg = AugmentConfig { mask_fraction: 0.25, ..AugmentConfig::identity() };
        let v = augment(&x, SampleShape::Vector, &cfg, &mut seeded(3));
        assert_eq!(v.iter().filter(|&&t| t == 0.0).count(), 5);
    }

    #[test]
    fn scale_jitter_stays_in_range() {
        let x = [1.0f32, 2.0];
        let cfg = AugmentConfig { scale_jitter_range: 0.2, ..AugmentConfig::identity() };
        for seed in 0..50 {
            let v = augment(&x, SampleShape::Vector, &cfg, &mut seeded(seed));
            assert!((0.8 - 1e-6..=1.2 + 1e-6).contains(&v[0]));
            assert!((v[1] - 2.0 * v[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_views_average_to_the_sample() {
        let x = [0.7f32, -0.2, 1.5];
        let sigma = 0.5;
        let cfg = AugmentConfig { gaussian_noise_sigma: sigma, ..AugmentConfig::identity() };
        let views = 10_000;
        let mut mean = [0.0f64; 3];
        for v in 0..views {
            let a = augment_view(&x, SampleShape::Vector, &cfg, 5, 0, v, 0);
            for (m, t) in mean.iter_mut().zip(a) {
                *m += t as f64 / views as f64;
            }
        }
        let bound = 3.0 * sigma / (views as f64).sqrt();
        for (m, &t) in mean.iter().zip(&x) {
            assert!((m - t as f64).abs() <= bound, "{m} vs {t}");
        }
    }

    #[test]
    fn views_are_keyed_by_instance_epoch_and_view() {
        let x = [1.0f32; 8];
        let cfg = AugmentConfig::default();
        let a = augment_view(&x, SampleShape::Vector, &cfg, 1, 2, 3, 0);
        assert_eq!(a, augment_view(&x, SampleShape::Vector, &cfg, 1, 2, 3, 0));
        assert_ne!(a, augment_view(&x, SampleShape::Vector, &cfg, 1, 2, 4, 0));
        assert_ne!(a, augment_view(&x, SampleShape::Vector, &cfg, 1, 3, 3, 0));
        assert_ne!(a, augment_view(&x, SampleShape::Vector, &cfg, 1, 2, 3, 1));
    }

    #[test]
    fn image_crop_and_flip() {
        // 2x3 image; flip only.
        let img = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let cfg = AugmentConfig { flip_enabled: true, ..AugmentConfig::identity() };
        let mut seen_flip = false;
        for seed in 0..20 {
            let v = augment(&img, SampleShape::Image { rows: 2, cols: 3 }, &cfg, &mut seeded(seed));
            if v == [3.0, 2.0, 1.0, 6.0, 5.0, 4.0] {
                seen_flip = true;
            } else {
                assert_eq!(v, img);
            }
        }
        assert!(seen_flip);

        let cfg = AugmentConfig { crop_padding: 1, ..AugmentConfig::identity() };
        for seed in 0..20 {
            let v = augment(&img, SampleShape::Image { rows: 2, cols: 3 }, &cfg, &mut seeded(seed));
            // Every kept pixel is an original pixel; the rest are padding zeros.
            assert!(v.iter().all(|p| *p == 0.0 || img.contains(p)));
        }
    }
}
