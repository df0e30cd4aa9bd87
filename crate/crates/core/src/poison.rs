//! Class-correlated data-poisoning attacks: a single background pixel whose
//! value encodes the label, and multiplicative background speckle with one
//! fixed noise pattern per class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::Dataset;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("pixel index {pixel} out of bounds for {n_features} features")]
    PixelOutOfBounds { pixel: usize, n_features: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask pixel {pixel} out of bounds for {n_features} features")]
    MaskOutOfBounds { pixel: usize, n_features: usize },
    #[error("expected variant {expected}, got {got}")]
    VariantMismatch { expected: &'static str, got: &'static str },
    #[error("noise variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("target half-extent {extent} out of range for {h}x{w}")]
    ExtentOutOfRange { extent: usize, h: usize, w: usize },
    #[error("class count mismatch: spec says {spec}, dataset has {dataset}")]
    ClassMismatch { spec: usize, dataset: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PoisonVariant {
    /// Replace one pixel by ((C - y) / (C + 2)) * X, X ~ N(1, variance),
    /// drawn independently per sample.
    SinglePixel {
        pixel_index: usize,
        noise_variance: f64,
    },
    /// Multiply every masked pixel by a per-class noise pattern
    /// n_{y,k} ~ N(1, variance), drawn once per class and shared by all of
    /// that class's samples.
    BackgroundSpeckle {
        mask: Vec<usize>,
        noise_variance: f64,
    },
}

impl PoisonVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PoisonVariant::SinglePixel { .. } => "single-pixel",
            PoisonVariant::BackgroundSpeckle { .. } => "background-speckle",
        }
    }
}

pub const DEFAULT_PIXEL_VARIANCE: f64 = 1e-4;
pub const DEFAULT_SPECKLE_VARIANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub variant: PoisonVariant,
    pub seed: u64,
    pub n_classes: usize,
}

impl PoisonSpec {
    pub fn single_pixel(pixel_index: usize, noise_variance: f64, seed: u64, n_classes: usize) -> Self {
        PoisonSpec {
            variant: PoisonVariant::SinglePixel { pixel_index, noise_variance },
            seed,
            n_classes,
        }
    }

    pub fn background_speckle(mask: Vec<usize>, noise_variance: f64, seed: u64, n_classes: usize) -> Self {
        PoisonSpec {
            variant: PoisonVariant::BackgroundSpeckle { mask, noise_variance },
            seed,
            n_classes,
        }
    }

    fn check_common(&self, ds: &Dataset) -> Result<(), PoisonError> {
        if self.n_classes != ds.n_classes {
            return Err(PoisonError::ClassMismatch {
                spec: self.n_classes,
                dataset: ds.n_classes,
            });
        }
        Ok(())
    }
}

fn poisoned_copy(ds: &Dataset, spec: &PoisonSpec) -> Dataset {
    let mut out = ds.clone();
    out.metadata.poison = Some(spec.clone());
    out
}

/// Apply the single-pixel attack: in every image, pixel `k` becomes
/// ((C - y) / (C + 2)) * X with X ~ N(1, variance) fresh per sample, clamped
/// to [0, 1]. All other pixels are untouched.
pub fn poison_single_pixel(ds: &Dataset, spec: &PoisonSpec) -> Result<Dataset, PoisonError> {
    spec.check_common(ds)?;
    let (pixel, variance) = match spec.variant {
        PoisonVariant::SinglePixel { pixel_index, noise_variance } => (pixel_index, noise_variance),
        ref other => {
            return Err(PoisonError::VariantMismatch {
                expected: "single-pixel",
                got: other.name(),
            })
        }
    };
    if pixel >= ds.n_features() {
        return Err(PoisonError::PixelOutOfBounds {
            pixel,
            n_features: ds.n_features(),
        });
    }
    if variance < 0.0 {
        return Err(PoisonError::NegativeVariance(variance));
    }
    let noise = Normal::new(1.0, variance.sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = ds.n_classes as f64;
    let mut out = poisoned_copy(ds, spec);
    for (img, &y) in out.images.iter_mut().zip(&out.labels) {
        let x: f64 = noise.sample(&mut rng);
        img[pixel] = ((c - f64::from(y)) / (c + 2.0) * x).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Apply the background-speckle attack: draw one multiplicative noise pattern
/// per class over the mask (patterns fixed across samples), multiply masked
/// pixels by the class pattern, clamp to [0, 1].
pub fn poison_background(ds: &Dataset, spec: &PoisonSpec) -> Result<Dataset, PoisonError> {
    spec.check_common(ds)?;
    let (mask, variance) = match spec.variant {
        PoisonVariant::BackgroundSpeckle { ref mask, noise_variance } => (mask, noise_variance),
        ref other => {
            return Err(PoisonError::VariantMismatch {
                expected: "background-speckle",
                got: other.name(),
            })
        }
    };
    if mask.is_empty() {
        return Err(PoisonError::EmptyMask);
    }
    if let Some(&pixel) = mask.iter().find(|&&p| p >= ds.n_features()) {
        return Err(PoisonError::MaskOutOfBounds {
            pixel,
            n_features: ds.n_features(),
        });
    }
    if variance < 0.0 {
        return Err(PoisonError::NegativeVariance(variance));
    }
    let noise = Normal::new(1.0, variance.sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // one pattern per class, in class order, independent of sample order
    let patterns: Vec<Vec<f64>> = (0..ds.n_classes)
        .map(|_| mask.iter().map(|_| noise.sample(&mut rng)).collect())
        .collect();
    let mut out = poisoned_copy(ds, spec);
    for (img, &y) in out.images.iter_mut().zip(&out.labels) {
        let pattern = &patterns[usize::from(y)];
        for (&k, &n) in mask.iter().zip(pattern) {
            img[k] = (img[k] * n).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// All pixel indices outside the centered square of side `2 * extent` — the
/// clutter region a centered target does not occupy.
pub fn default_background_mask(h: usize, w: usize, extent: usize) -> Result<Vec<usize>, PoisonError> {
    if extent == 0 || 2 * extent >= h.min(w) {
        return Err(PoisonError::ExtentOutOfRange { extent, h, w });
    }
    let r0 = h / 2 - extent;
    let r1 = h / 2 + extent;
    let c0 = w / 2 - extent;
    let c1 = w / 2 + extent;
    Ok((0..h * w)
        .filter(|&k| {
            let (r, c) = (k / w, k % w);
            !(r0..r1).contains(&r) || !(c0..c1).contains(&c)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::generate_synthetic;
    use approx::assert_relative_eq;

    fn toy(n: usize, c: usize, seed: u64) -> Dataset {
        generate_synthetic(n, c, 8, 8, 0.1, seed).unwrap()
    }

    #[test]
    fn single_pixel_noise_free_values() {
        let ds = toy(16, 8, 1);
        let spec = PoisonSpec::single_pixel(3, 0.0, 7, 8);
        let out = poison_single_pixel(&ds, &spec).unwrap();
        for (img, &y) in out.images.iter().zip(&out.labels) {
            assert_relative_eq!(img[3], (8.0 - f64::from(y)) / 10.0, epsilon = 1e-15);
        }
        // y = 0 -> 0.8, y = 7 -> 0.1
        let y0 = out.labels.iter().position(|&l| l == 0).unwrap();
        let y7 = out.labels.iter().position(|&l| l == 7).unwrap();
        assert_relative_eq!(out.images[y0][3], 0.8, epsilon = 1e-15);
        assert_relative_eq!(out.images[y7][3], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn single_pixel_locality_and_determinism() {
        let ds = toy(12, 4, 2);
        let spec = PoisonSpec::single_pixel(40, 1e-4, 9, 4);
        let a = poison_single_pixel(&ds, &spec).unwrap();
        let b = poison_single_pixel(&ds, &spec).unwrap();
        assert_eq!(a, b);
        for (orig, new) in ds.images.iter().zip(&a.images) {
            for k in 0..orig.len() {
                if k != 40 {
                    assert_eq!(orig[k].to_bits(), new[k].to_bits());
                }
            }
        }
        a.validate().unwrap();
        assert_eq!(a.metadata.poison.as_ref(), Some(&spec));
    }

    #[test]
    fn single_pixel_noise_is_per_sample() {
        let mut ds = toy(32, 8, 3);
        // force a shared label so per-sample draws are visible
        ds.labels = vec![0; 32];
        let spec = PoisonSpec::single_pixel(0, 1e-4, 11, 8);
        let out = poison_single_pixel(&ds, &spec).unwrap();
        let vals: Vec<f64> = out.images.iter().map(|i| i[0]).collect();
        assert!(vals.windows(2).any(|w| w[0] != w[1]));
        // sigma = 0.01 keeps every draw near 0.8
        assert!(vals.iter().all(|v| (v - 0.8).abs() < 0.1));
    }

    #[test]
    fn single_pixel_errors() {
        let ds = toy(4, 4, 0);
        let bad = PoisonSpec::single_pixel(64, 0.0, 0, 4);
        assert!(matches!(
            poison_single_pixel(&ds, &bad),
            Err(PoisonError::PixelOutOfBounds { .. })
        ));
        let wrong = PoisonSpec::background_speckle(vec![0], 0.0, 0, 4);
        assert!(matches!(
            poison_single_pixel(&ds, &wrong),
            Err(PoisonError::VariantMismatch { .. })
        ));
        let mismatch = PoisonSpec::single_pixel(0, 0.0, 0, 8);
        assert!(matches!(
            poison_single_pixel(&ds, &mismatch),
            Err(PoisonError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn speckle_degenerate_noise_is_identity() {
        let ds = toy(8, 4, 5);
        let mask = default_background_mask(8, 8, 2).unwrap();
        let spec = PoisonSpec::background_speckle(mask, 0.0, 3, 4);
        let out = poison_background(&ds, &spec).unwrap();
        assert_eq!(ds.images, out.images);
    }

    #[test]
    fn speckle_class_patterns_are_shared_and_local() {
        let ds = toy(24, 4, 6);
        let mask = default_background_mask(8, 8, 2).unwrap();
        let spec = PoisonSpec::background_speckle(mask.clone(), 0.02, 13, 4);
        let out = poison_background(&ds, &spec).unwrap();
        // same class, same multiplicative pattern
        let idx: Vec<usize> = (0..24).filter(|&i| ds.labels[i] == 1).collect();
        assert!(idx.len() >= 2);
        for pair in idx.windows(2) {
            let (i, j) = (pair[0], pair[1]);
            for &k in &mask {
                let ri = out.images[i][k] / ds.images[i][k].max(1e-12);
                let rj = out.images[j][k] / ds.images[j][k].max(1e-12);
                // ratios agree unless clamping interfered
                if out.images[i][k] < 1.0 && out.images[j][k] < 1.0 {
                    assert_relative_eq!(ri, rj, epsilon = 1e-9);
                }
            }
        }
        // pixels outside D bit-identical
        let in_mask: std::collections::HashSet<usize> = mask.iter().copied().collect();
        for (orig, new) in ds.images.iter().zip(&out.images) {
            for k in 0..orig.len() {
                if !in_mask.contains(&k) {
                    assert_eq!(orig[k].to_bits(), new[k].to_bits());
                }
            }
        }
        // determinism
        assert_eq!(out, poison_background(&ds, &spec).unwrap());
        out.validate().unwrap();
    }

    #[test]
    fn speckle_patterns_differ_across_classes() {
        let mut ds = toy(2, 2, 8);
        ds.images = vec![vec![0.5; 64]; 2];
        ds.labels = vec![0, 1];
        let mask = default_background_mask(8, 8, 1).unwrap();
        let spec = PoisonSpec::background_speckle(mask, 0.02, 21, 2);
        let out = poison_background(&ds, &spec).unwrap();
        assert_ne!(out.images[0], out.images[1]);
    }

    #[test]
    fn speckle_errors() {
        let ds = toy(4, 4, 0);
        assert!(matches!(
            poison_background(&ds, &PoisonSpec::background_speckle(vec![], 0.0, 0, 4)),
            Err(PoisonError::EmptyMask)
        ));
        assert!(matches!(
            poison_background(&ds, &PoisonSpec::background_speckle(vec![999], 0.0, 0, 4)),
            Err(PoisonError::MaskOutOfBounds { .. })
        ));
        assert!(matches!(
            poison_background(&ds, &PoisonSpec::single_pixel(0, 0.0, 0, 4)),
            Err(PoisonError::VariantMismatch { .. })
        ));
    }

    #[test]
    fn background_mask_partition() {
        let mask = default_background_mask(4, 4, 1).unwrap();
        assert_eq!(mask.len(), 12);
        assert!(!mask.contains(&5) && !mask.contains(&6) && !mask.contains(&9) && !mask.contains(&10));
        let big = default_background_mask(16, 16, 7).unwrap();
        assert_eq!(big.len(), 256 - 196);
        assert!(default_background_mask(8, 8, 0).is_err());
        assert!(default_background_mask(8, 8, 4).is_err());
        // partition: mask plus the excluded square covers everything once
        let mask = default_background_mask(8, 8, 2).unwrap();
        let set: std::collections::HashSet<usize> = mask.iter().copied().collect();
        assert_eq!(set.len(), mask.len());
        assert_eq!(mask.len(), 64 - 16);
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = PoisonSpec::single_pixel(40, 1e-4, 5, 8);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<PoisonSpec>(&json).unwrap(), spec);
    }
}
