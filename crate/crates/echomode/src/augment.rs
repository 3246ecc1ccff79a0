//! Training-time image augmentations: random time-axis flip and additive
//! Gaussian noise, applied to M-mode images on the [0,1] intensity scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmode::MModeImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, noise_sigma: 0.05 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::argument(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::argument(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Reverse the time axis of an M-mode image.
pub fn flip_time(image: &MModeImage) -> MModeImage {
    let mut out = image.clone();
    for k in 0..image.s {
        for f in 0..image.t_clip {
            out.pixels[k * image.t_clip + f] = image.at(k, image.t_clip - 1 - f);
        }
    }
    out
}

/// With probability `flip_prob`, reverse the time axis; then add i.i.d.
/// Gaussian noise with std `noise_sigma` and clamp intensities to [0, 1].
pub fn augment(image: &MModeImage, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<MModeImage> {
    config.validate()?;
    let mut out = if rng.gen_range(0.0..1.0) < config.flip_prob {
        flip_time(image)
    } else {
        image.clone()
    };
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, config.noise_sigma).expect("sigma validated");
        for p in &mut out.pixels {
            let v = *p as f64 + normal.sample(rng);
            *p = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image(s: usize, t: usize) -> MModeImage {
        MModeImage {
            patient_id: "p0".into(),
            theta_deg: 0.0,
            mode_index: 0,
            s,
            t_clip: t,
            pixels: (0..s * t).map(|i| (i % 97) as f32 / 96.0).collect(),
        }
    }

    #[test]
    fn identity_when_disabled() {
        let img = image(8, 11);
        let cfg = AugmentConfig { flip_prob: 0.0, noise_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn flip_is_involution() {
        let img = image(5, 9);
        let cfg = AugmentConfig { flip_prob: 1.0, noise_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&img, &cfg, &mut rng).unwrap();
        assert_ne!(once.pixels, img.pixels);
        let twice = augment(&once, &cfg, &mut rng).unwrap();
        assert_eq!(twice.pixels, img.pixels);
    }

    #[test]
    fn flip_reverses_time_axis() {
        let img = image(3, 4);
        let flipped = flip_time(&img);
        for k in 0..3 {
            for f in 0..4 {
                assert_eq!(flipped.at(k, f), img.at(k, 3 - f));
            }
        }
    }

    #[test]
    fn noise_statistics_and_clamping() {
        let mut img = image(40, 40);
        img.pixels.fill(0.5);
        let cfg = AugmentConfig { flip_prob: 0.0, noise_sigma: 0.05 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        let n = out.pixels.len() as f64;
        let mean = out.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.05).abs() < 0.01, "std {}", var.sqrt());
        // clamping: start near the ceiling with large noise
        img.pixels.fill(0.99);
        let loud = AugmentConfig { flip_prob: 0.0, noise_sigma: 0.5 };
        let out = augment(&img, &loud, &mut rng).unwrap();
        assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.pixels.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let img = image(6, 6);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn invalid_config_rejected() {
        let img = image(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentConfig { flip_prob: 1.5, noise_sigma: 0.05 };
        assert!(augment(&img, &bad, &mut rng).is_err());
        let bad = AugmentConfig { flip_prob: 0.5, noise_sigma: -1.0 };
        assert!(augment(&img, &bad, &mut rng).is_err());
    }
}
