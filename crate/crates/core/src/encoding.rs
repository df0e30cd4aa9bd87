//! Image-to-product-state encoding and dataset management: the spin feature
//! map, block resizing, deterministic splits, a synthetic target-on-clutter
//! generator, leaf orderings, and the TNDS binary dataset format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poison::PoisonSpec;

pub const DATASET_MAGIC: &[u8; 4] = b"TNDS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("pixel value {0} outside [0, 1]")]
    PixelOutOfRange(f64),
    #[error("image shape {h}x{w} not divisible by target {th}x{tw}")]
    NonDivisibleResize { h: usize, w: usize, th: usize, tw: usize },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("quadtree ordering requires power-of-two dimensions, got {h}x{w}")]
    BadQuadtreeShape { h: usize, w: usize },
    #[error("synthetic images must be at least 8x8, got {h}x{w}")]
    TooSmall { h: usize, w: usize },
    #[error("synthetic generator supports 2..=8 classes, got {0}")]
    BadClassCount(usize),
    #[error("bad magic: expected \"TNDS\"")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u16),
    #[error("truncated payload")]
    Truncated,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelRange { label: u16, n_classes: u16 },
    #[error("malformed metadata block: {0}")]
    BadMetadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Provenance carried alongside a dataset and stored in the TNDS trailer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: Option<u64>,
    pub poison: Option<PoisonSpec>,
}

/// A labeled image dataset; every pixel lies in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub n_classes: usize,
    pub metadata: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for img in &self.images {
            for &p in img {
                if !(0.0..=1.0).contains(&p) {
                    return Err(DataError::PixelOutOfRange(p));
                }
            }
        }
        for &l in &self.labels {
            if usize::from(l) >= self.n_classes {
                return Err(DataError::LabelRange {
                    label: l,
                    n_classes: self.n_classes as u16,
                });
            }
        }
        Ok(())
    }
}

/// One encoded sample: a unit local vector per feature, in leaf order.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub locals: Vec<[f64; 2]>,
    /// `permutation[leaf] = pixel index`; the ordering applied at encode time.
    pub permutation: Vec<usize>,
}

/// The spin map: x in [0, 1] to (cos(x pi/2), sin(x pi/2)).
pub fn spin_map(x: f64) -> Result<[f64; 2], DataError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DataError::PixelOutOfRange(x));
    }
    let a = x * std::f64::consts::FRAC_PI_2;
    Ok([a.cos(), a.sin()])
}

/// Encode an image as a product state, one local vector per feature, arranged
/// in leaf order: `locals[leaf] = spin_map(image[permutation[leaf]])`.
pub fn encode_sample(image: &[f64], permutation: &[usize]) -> Result<EncodedSample, DataError> {
    let locals = permutation
        .iter()
        .map(|&p| spin_map(image[p]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedSample {
        locals,
        permutation: permutation.to_vec(),
    })
}

/// Block-mean downsampling; source dimensions must divide evenly.
pub fn resize_image(
    image: &[f64],
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Result<Vec<f64>, DataError> {
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(DataError::NonDivisibleResize { h, w, th, tw });
    }
    let bh = h / th;
    let bw = w / tw;
    let mut out = Vec::with_capacity(th * tw);
    for r in 0..th {
        for c in 0..tw {
            let mut total = 0.0;
            for dr in 0..bh {
                for dc in 0..bw {
                    total += image[(r * bh + dr) * w + (c * bw + dc)];
                }
            }
            out.push(total / (bh * bw) as f64);
        }
    }
    Ok(out)
}

/// Deterministic random split; train gets `round(fraction * N)` samples
/// (ties to even).
pub fn split_dataset(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let n = ds.len();
    let n_train = (train_fraction * n as f64).round_ties_even() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let take = |ids: &[usize], tag: &str| Dataset {
        images: ids.iter().map(|&i| ds.images[i].clone()).collect(),
        height: ds.height,
        width: ds.width,
        labels: ids.iter().map(|&i| ds.labels[i]).collect(),
        n_classes: ds.n_classes,
        metadata: DatasetMeta {
            source: format!("{}/{}", ds.metadata.source, tag),
            seed: Some(seed),
            poison: ds.metadata.poison.clone(),
        },
    };
    Ok((take(&idx[..n_train], "train"), take(&idx[n_train..], "test")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafOrdering {
    Raster,
    Quadtree,
}

/// Feature-to-leaf ordering: `perm[leaf] = pixel index`. The quadtree scheme
/// interleaves row/column bits (Morton order) so 2x2 pixel blocks land on
/// adjacent leaves.
pub fn leaf_permutation(h: usize, w: usize, scheme: LeafOrdering) -> Result<Vec<usize>, DataError> {
    match scheme {
        LeafOrdering::Raster => Ok((0..h * w).collect()),
        LeafOrdering::Quadtree => {
            if !h.is_power_of_two() || !w.is_power_of_two() {
                return Err(DataError::BadQuadtreeShape { h, w });
            }
            let hb = h.trailing_zeros() as usize;
            let wb = w.trailing_zeros() as usize;
            let common = hb.min(wb);
            let n = h * w;
            let mut perm = Vec::with_capacity(n);
            for m in 0..n {
                let mut row = 0usize;
                let mut col = 0usize;
                // low bits: interleaved (col bit 0 is the fastest)
                for b in 0..common {
                    col |= ((m >> (2 * b)) & 1) << b;
                    row |= ((m >> (2 * b + 1)) & 1) << b;
                }
                // remaining high bits belong to the longer dimension
                let rest = m >> (2 * common);
                if hb > wb {
                    row |= rest << common;
                } else {
                    col |= rest << common;
                }
                perm.push(row * w + col);
            }
            Ok(perm)
        }
    }
}

// class templates for the synthetic generator, drawn on the central square
fn template_mask(class: usize, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let top = h / 4;
    let left = w / 4;
    let sh = h / 2;
    let sw = w / 2;
    let cy = (sh as f64 - 1.0) / 2.0;
    let cx = (sw as f64 - 1.0) / 2.0;
    for r in 0..sh {
        for c in 0..sw {
            let y = r as f64;
            let x = c as f64;
            let on = match class {
                // filled square
                0 => r >= sh / 6 && r < sh - sh / 6 && c >= sw / 6 && c < sw - sw / 6,
                // hollow ring
                1 => {
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    d <= sh as f64 * 0.45 && d >= sh as f64 * 0.25
                }
                // plus
                2 => (y - cy).abs() <= sh as f64 / 8.0 || (x - cx).abs() <= sw as f64 / 8.0,
                // diagonal cross
                3 => {
                    ((y - cy) - (x - cx)).abs() <= sh as f64 / 7.0
                        || ((y - cy) + (x - cx)).abs() <= sh as f64 / 7.0
                }
                // two horizontal bars
                4 => {
                    (y - sh as f64 * 0.25).abs() <= sh as f64 / 9.0
                        || (y - sh as f64 * 0.75).abs() <= sh as f64 / 9.0
                }
                // two vertical bars
                5 => {
                    (x - sw as f64 * 0.25).abs() <= sw as f64 / 9.0
                        || (x - sw as f64 * 0.75).abs() <= sw as f64 / 9.0
                }
                // filled diamond
                6 => (y - cy).abs() + (x - cx).abs() <= sh as f64 * 0.45,
                // checkerboard blocks
                7 => ((r * 4 / sh) + (c * 4 / sw)) % 2 == 0,
                _ => unreachable!("class count checked by caller"),
            };
            if on {
                mask[(top + r) * w + (left + c)] = true;
            }
        }
    }
    mask
}

const BACKGROUND_MEAN: f64 = 0.15;
const TARGET_BRIGHTNESS: f64 = 0.85;
const TARGET_JITTER_STD: f64 = 0.06;
const TARGET_DROPOUT: f64 = 0.10;
/// Maximum per-sample target translation (pixels, each axis). Shifted
/// targets keep the clean task genuinely hard for a raw-pixel classifier —
/// like real imagery, where targets are never perfectly registered. Only
/// applies when clutter noise is on.
const TARGET_MAX_SHIFT: i64 = 1;
/// Fraction of samples whose target is translated at all; the rest stay
/// centered. Tunes how hard the registration problem is.
const TARGET_SHIFT_PROB: f64 = 0.3;

/// Synthetic stand-in for a center-target-on-clutter SAR dataset: each class
/// is a fixed bright geometric template centered in the image, on top of
/// per-pixel multiplicative speckle clutter. Class-balanced (`label = i mod
/// C`) and deterministic under the seed.
pub fn generate_synthetic(
    n_samples: usize,
    n_classes: usize,
    h: usize,
    w: usize,
    clutter_variance: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if h < 8 || w < 8 {
        return Err(DataError::TooSmall { h, w });
    }
    if !(2..=8).contains(&n_classes) {
        return Err(DataError::BadClassCount(n_classes));
    }
    let masks: Vec<Vec<bool>> = (0..n_classes).map(|c| template_mask(c, h, w)).collect();
    let sigma = clutter_variance.max(0.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let y = i % n_classes;
        let gain = if sigma > 0.0 {
            1.0 + TARGET_JITTER_STD * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        } else {
            1.0
        };
        let (dy, dx) = if sigma > 0.0 && rng.gen_bool(TARGET_SHIFT_PROB) {
            (
                rng.gen_range(-TARGET_MAX_SHIFT..=TARGET_MAX_SHIFT),
                rng.gen_range(-TARGET_MAX_SHIFT..=TARGET_MAX_SHIFT),
            )
        } else {
            (0, 0)
        };
        let mut img = Vec::with_capacity(h * w);
        for k in 0..h * w {
            let speckle: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let dropout: f64 = rng.gen();
            let (r0, c0) = ((k / w) as i64 - dy, (k % w) as i64 - dx);
            let on_target = r0 >= 0
                && r0 < h as i64
                && c0 >= 0
                && c0 < w as i64
                && masks[y][r0 as usize * w + c0 as usize];
            let v = if on_target && (sigma == 0.0 || dropout >= TARGET_DROPOUT) {
                TARGET_BRIGHTNESS * gain
            } else {
                BACKGROUND_MEAN * (1.0 + sigma * speckle)
            };
            img.push(v.clamp(0.0, 1.0));
        }
        images.push(img);
        labels.push(y as u16);
    }
    Ok(Dataset {
        images,
        height: h,
        width: w,
        labels,
        n_classes,
        metadata: DatasetMeta {
            source: "synthetic".into(),
            seed: Some(seed),
            poison: None,
        },
    })
}

/// Write a dataset in the TNDS binary format (little-endian): magic "TNDS",
/// version u16, n_samples u32, height u16, width u16, n_classes u16, then per
/// sample a u16 label followed by h*w row-major f32 pixels. A length-prefixed
/// JSON metadata trailer follows the samples.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    ds.validate()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.height as u16).to_le_bytes());
    buf.extend_from_slice(&(ds.width as u16).to_le_bytes());
    buf.extend_from_slice(&(ds.n_classes as u16).to_le_bytes());
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        buf.extend_from_slice(&label.to_le_bytes());
        for &p in img {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&ds.metadata)
        .map_err(|e| DataError::BadMetadata(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    atomic_write(path, &buf)?;
    Ok(())
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != &DATASET_MAGIC[..] {
        return Err(DataError::BadMagic);
    }
    let version = cur.u16()?;
    if version != DATASET_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let n_samples = cur.u32()? as usize;
    let height = cur.u16()? as usize;
    let width = cur.u16()? as usize;
    let n_classes = cur.u16()?;
    let mut images = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let label = cur.u16()?;
        if label >= n_classes {
            return Err(DataError::LabelRange { label, n_classes });
        }
        let mut img = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            img.push(cur.f32()? as f64);
        }
        images.push(img);
        labels.push(label);
    }
    let metadata = if cur.remaining() > 0 {
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        serde_json::from_slice(raw).map_err(|e| DataError::BadMetadata(e.to_string()))?
    } else {
        DatasetMeta::default()
    };
    Ok(Dataset {
        images,
        height,
        width,
        labels,
        n_classes: n_classes as usize,
        metadata,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;
    use approx::assert_relative_eq;

    #[test]
    fn spin_map_endpoints_and_midpoint() {
        assert_eq!(spin_map(0.0).unwrap(), [1.0, 0.0]);
        let one = spin_map(1.0).unwrap();
        assert!(one[0].abs() < 1e-15);
        assert_relative_eq!(one[1], 1.0, epsilon = 1e-15);
        let half = spin_map(0.5).unwrap();
        assert_relative_eq!(half[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(half[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(spin_map(1.5).is_err());
        assert!(spin_map(-0.1).is_err());
    }

    #[test]
    fn spin_map_is_normalized() {
        for i in 0..1000 {
            let x = i as f64 / 999.0;
            let [c, s] = spin_map(x).unwrap();
            assert_relative_eq!(c * c + s * s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_constant_images() {
        let perm: Vec<usize> = (0..4).collect();
        let zero = encode_sample(&[0.0; 4], &perm).unwrap();
        assert!(zero.locals.iter().all(|&l| l == [1.0, 0.0]));
        let one = encode_sample(&[1.0; 4], &perm).unwrap();
        assert!(one.locals.iter().all(|&l| l[0].abs() < 1e-15 && (l[1] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn encode_matches_outer_product_oracle() {
        let image = [0.2, 0.7, 0.4, 0.9];
        let perm: Vec<usize> = (0..4).collect();
        let enc = encode_sample(&image, &perm).unwrap();
        // nested-loop full product state
        let full = DenseTensor::from_fn(vec![2; 4], |idx| {
            idx.iter()
                .enumerate()
                .map(|(f, &i)| enc.locals[f][i])
                .product()
        });
        // outer product of locals, built pairwise
        let mut outer = DenseTensor::new(vec![2], enc.locals[0].to_vec()).unwrap();
        for l in &enc.locals[1..] {
            outer = crate::tensor::contract(
                &outer,
                &DenseTensor::new(vec![2], l.to_vec()).unwrap(),
                &[],
            )
            .unwrap();
        }
        for (a, b) in full.data().iter().zip(outer.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn resize_block_mean() {
        assert_eq!(resize_image(&[0.4; 4], 2, 2, 1, 1).unwrap(), vec![0.4]);
        assert_eq!(
            resize_image(&[0.0, 1.0, 1.0, 0.0], 2, 2, 1, 1).unwrap(),
            vec![0.5]
        );
        assert!(resize_image(&[0.0; 6], 2, 3, 1, 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..64 * 64).map(|_| rng.gen::<f64>()).collect();
        let small = resize_image(&img, 64, 64, 32, 32).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let mut want = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        want += img[(2 * r + dr) * 64 + 2 * c + dc];
                    }
                }
                want /= 4.0;
                assert_relative_eq!(small[r * 32 + c], want, epsilon = 1e-12);
                assert!((0.0..=1.0).contains(&small[r * 32 + c]));
            }
        }
    }

    #[test]
    fn split_seventy_thirty_counts() {
        let ds = generate_synthetic(9466, 8, 8, 8, 0.0, 1).unwrap();
        let (train, test) = split_dataset(&ds, 0.7, 42).unwrap();
        assert_eq!(train.len(), 6626);
        assert_eq!(test.len(), 2840);
    }

    #[test]
    fn split_determinism_disjoint_exhaustive() {
        let ds = generate_synthetic(64, 4, 8, 8, 0.1, 9).unwrap();
        for seed in 0..100u64 {
            let (a_train, a_test) = split_dataset(&ds, 0.7, seed).unwrap();
            let (b_train, _) = split_dataset(&ds, 0.7, seed).unwrap();
            assert_eq!(a_train.images, b_train.images);
            assert_eq!(a_train.len() + a_test.len(), ds.len());
            // disjoint + exhaustive: every original image accounted for exactly once
            let mut all: Vec<&Vec<f64>> = a_train.images.iter().chain(&a_test.images).collect();
            let mut orig: Vec<&Vec<f64>> = ds.images.iter().collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(all, orig);
        }
        let (t1, t2) = split_dataset(&generate_synthetic(2, 2, 8, 8, 0.0, 0).unwrap(), 0.5, 7).unwrap();
        assert_eq!((t1.len(), t2.len()), (1, 1));
        assert_ne!(t1.labels, t2.labels);
    }

    #[test]
    fn leaf_permutations_are_bijections() {
        assert_eq!(leaf_permutation(1, 2, LeafOrdering::Raster).unwrap(), vec![0, 1]);
        assert_eq!(
            leaf_permutation(2, 2, LeafOrdering::Quadtree).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(leaf_permutation(3, 4, LeafOrdering::Quadtree).is_err());
        for (h, w) in [(4, 4), (8, 8), (16, 16), (4, 8)] {
            for scheme in [LeafOrdering::Raster, LeafOrdering::Quadtree] {
                let mut p = leaf_permutation(h, w, scheme).unwrap();
                p.sort_unstable();
                assert_eq!(p, (0..h * w).collect::<Vec<_>>());
            }
        }
        // quadtree keeps a 2x2 block contiguous
        let p = leaf_permutation(4, 4, LeafOrdering::Quadtree).unwrap();
        assert_eq!(&p[..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn synthetic_generator_properties() {
        let ds = generate_synthetic(8, 8, 16, 16, 0.05, 11).unwrap();
        let mut counts = [0usize; 8];
        for &l in &ds.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1));
        ds.validate().unwrap();

        // determinism
        let again = generate_synthetic(8, 8, 16, 16, 0.05, 11).unwrap();
        assert_eq!(ds, again);

        // noise-free limit: constant background, distinguishable templates
        let clean = generate_synthetic(8, 8, 16, 16, 0.0, 1).unwrap();
        let clean2 = generate_synthetic(8, 8, 16, 16, 0.0, 99).unwrap();
        assert_eq!(clean.images, clean2.images);
        for a in 0..8 {
            for b in (a + 1)..8 {
                let dist: f64 = clean.images[a]
                    .iter()
                    .zip(&clean.images[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(dist > 0.0, "templates {a} and {b} coincide");
            }
        }
        assert!(matches!(
            generate_synthetic(4, 8, 4, 4, 0.0, 0),
            Err(DataError::TooSmall { .. })
        ));
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.tnds");
        let mut ds = generate_synthetic(3, 3, 8, 8, 0.2, 5).unwrap();
        // f32 storage: quantize first so the round trip is bitwise
        for img in &mut ds.images {
            for p in img.iter_mut() {
                *p = *p as f32 as f64;
            }
        }
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);

        // wrong magic
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.tnds");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_dataset(&bad), Err(DataError::BadMagic)));

        // label out of range
        let mut bytes = fs::read(&path).unwrap();
        bytes[16] = 200; // first label byte (header is 16 bytes)
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_dataset(&bad), Err(DataError::LabelRange { .. })));

        // truncated payload
        let bytes = fs::read(&path).unwrap();
        fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dataset(&bad), Err(DataError::Truncated)));
    }
}
