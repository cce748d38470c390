//! Hermetic synthetic images with translation jitter and per-sample Gaussian
//! pixel noise.
//!
//! Each sample draws its own noise level uniformly from `[0, noise]`, so a
//! split mixes clean "easy" samples with heavily corrupted "hard" ones.
//!
//! Two families are available. [`Family::Shapes`] renders one filled shape per
//! image. [`Family::Pairs`] renders two identical blobs whose relative direction
//! is the class; their separation varies per sample, and widely separated pairs
//! can only be told apart by features with a large receptive field.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::seeded_rng;

pub const SHAPES: [&str; 8] = [
    "disk",
    "square",
    "cross",
    "diagonal-stripe",
    "ring",
    "triangle",
    "horizontal-bars",
    "vertical-bars",
];

/// Blob-pair directions, one per class of [`Family::Pairs`].
pub const DIRECTIONS: [&str; 4] = ["horizontal", "vertical", "diagonal", "anti-diagonal"];

/// Range of blob-centre separations along the pair's axis, in pixels at size 16.
pub const PAIR_SEPARATION: (i64, i64) = (4, 10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Shapes,
    Pairs,
}

impl Family {
    pub fn max_classes(self) -> usize {
        match self {
            Family::Shapes => SHAPES.len(),
            Family::Pairs => DIRECTIONS.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    /// Upper end of the per-sample pixel-noise standard deviation.
    pub noise: f64,
    /// Maximum translation in pixels along each axis.
    pub jitter: usize,
    #[serde(default)]
    pub family: Family,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            size: 16,
            classes: 4,
            noise: 0.0,
            jitter: 0,
            family: Family::Shapes,
        }
    }
}

/// Whether pixel `(x, y)` lies inside shape `class` centred at `(cx, cy)`;
/// `s` scales the shape to the image size.
fn inside(class: usize, x: f64, y: f64, cx: f64, cy: f64, s: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let r2 = dx * dx + dy * dy;
    let boxed = dx.abs() <= 6.0 * s && dy.abs() <= 6.0 * s;
    match class {
        0 => r2 <= (5.0 * s).powi(2),
        1 => dx.abs() <= 4.0 * s && dy.abs() <= 4.0 * s,
        2 => boxed && (dx.abs() <= 1.0 * s || dy.abs() <= 1.0 * s),
        3 => boxed && (dx - dy).abs() <= 1.5 * s,
        4 => r2 >= (3.0 * s).powi(2) && r2 <= (5.5 * s).powi(2),
        5 => dy.abs() <= 5.0 * s && dx.abs() <= (dy + 5.0 * s) / 2.0,
        6 => boxed && (((dy + 6.0 * s) / (2.0 * s)).floor() as i64) % 2 == 0,
        7 => boxed && (((dx + 6.0 * s) / (2.0 * s)).floor() as i64) % 2 == 0,
        _ => unreachable!("class checked by caller"),
    }
}

/// Noise-free rendering of `class` shifted by `(ox, oy)` pixels.
pub fn template(class: usize, size: usize, ox: i64, oy: i64) -> Vec<f64> {
    let s = size as f64 / 16.0;
    let c = (size as f64 - 1.0) / 2.0;
    let (cx, cy) = (c + ox as f64, c + oy as f64);
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            if inside(class, x as f64, y as f64, cx, cy, s) {
                img[y * size + x] = 1.0;
            }
        }
    }
    img
}

/// Two 3x3 blobs separated by `sep` pixels along direction `class`, with the
/// pair centred on the image and shifted by `(ox, oy)`.
pub fn pair_template(class: usize, size: usize, sep: i64, ox: i64, oy: i64) -> Vec<f64> {
    let diag = (sep as f64 / std::f64::consts::SQRT_2).round() as i64;
    let (dx, dy) = match class {
        0 => (sep, 0),
        1 => (0, sep),
        2 => (diag, diag),
        3 => (diag, -diag),
        _ => unreachable!("class checked by caller"),
    };
    let c = size as i64 / 2;
    let (x1, y1) = (c - dx.div_euclid(2) + ox, c - dy.div_euclid(2) + oy);
    let mut img = vec![0.0; size * size];
    for (bx, by) in [(x1, y1), (x1 + dx, y1 + dy)] {
        for y in by - 1..=by + 1 {
            for x in bx - 1..=bx + 1 {
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img[y as usize * size + x as usize] = 1.0;
                }
            }
        }
    }
    img
}

/// Renders a balanced, shuffled dataset.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let max = cfg.family.max_classes();
    if !(2..=max).contains(&cfg.classes) {
        return Err(Error::Config(format!("classes must be in 2..={max}, got {}", cfg.classes)));
    }
    if cfg.n == 0 || cfg.size < 8 {
        return Err(Error::Config(format!("need n >= 1 and size >= 8, got n={} size={}", cfg.n, cfg.size)));
    }
    if !(cfg.noise >= 0.0) || !cfg.noise.is_finite() {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {}", cfg.noise)));
    }
    let mut rng = seeded_rng(seed);
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let px = cfg.size * cfg.size;
    let mut data = Vec::with_capacity(cfg.n * px);
    let mut noise = Vec::with_capacity(cfg.n);
    let j = cfg.jitter as i64;
    for &label in &labels {
        let ox = rng.random_range(-j..=j);
        let oy = rng.random_range(-j..=j);
        let sigma = if cfg.noise > 0.0 { rng.random_range(0.0..cfg.noise) } else { 0.0 };
        let img = match cfg.family {
            Family::Shapes => template(label, cfg.size, ox, oy),
            Family::Pairs => {
                let scale = cfg.size as f64 / 16.0;
                let lo = (PAIR_SEPARATION.0 as f64 * scale).round() as i64;
                let hi = (PAIR_SEPARATION.1 as f64 * scale).round() as i64;
                pair_template(label, cfg.size, rng.random_range(lo..=hi), ox, oy)
            }
        };
        for v in img {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(v + sigma * eps);
        }
        noise.push(sigma);
    }
    let images = Tensor::new(vec![cfg.n, 1, cfg.size, cfg.size], data)?;
    Dataset::new(images, labels, cfg.classes, noise)
}

/// Independent train/val/test draws from one configuration.
pub fn synthetic_splits(cfg: &SyntheticConfig, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Splits> {
    let part = |n: usize, s: u64| gen_synthetic(&SyntheticConfig { n, ..cfg.clone() }, s);
    Ok(Splits {
        train: part(n_train, seed.wrapping_mul(3).wrapping_add(1))?,
        val: part(n_val, seed.wrapping_mul(3).wrapping_add(2))?,
        test: part(n_test, seed.wrapping_mul(3).wrapping_add(3))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct_and_nonempty() {
        let ts: Vec<Vec<f64>> = (0..8).map(|c| template(c, 16, 0, 0)).collect();
        for (i, a) in ts.iter().enumerate() {
            assert!(a.iter().sum::<f64>() >= 10.0, "class {i} too small");
            for b in &ts[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn clean_samples_equal_templates() {
        let cfg = SyntheticConfig { n: 16, classes: 8, ..Default::default() };
        let d = gen_synthetic(&cfg, 1).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.images.sample(i), template(d.labels[i], 16, 0, 0).as_slice());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticConfig { n: 50, noise: 0.5, jitter: 2, ..Default::default() };
        assert_eq!(gen_synthetic(&cfg, 9).unwrap(), gen_synthetic(&cfg, 9).unwrap());
        assert_ne!(gen_synthetic(&cfg, 9).unwrap(), gen_synthetic(&cfg, 10).unwrap());
    }

    #[test]
    fn rejects_class_counts() {
        for classes in [0, 1, 9] {
            let cfg = SyntheticConfig { classes, ..Default::default() };
            assert!(gen_synthetic(&cfg, 0).is_err());
        }
    }

    #[test]
    fn pairs_have_two_blobs_in_the_right_direction() {
        for sep in PAIR_SEPARATION.0..=PAIR_SEPARATION.1 {
            for class in 0..4 {
                let img = pair_template(class, 16, sep, 1, -1);
                let lit: Vec<(usize, usize)> = (0..256).filter(|&i| img[i] == 1.0).map(|i| (i % 16, i / 16)).collect();
                assert_eq!(lit.len(), 18, "class {class} sep {sep}");
                let (xs, ys): (Vec<usize>, Vec<usize>) = lit.iter().copied().unzip();
                let w = xs.iter().max().unwrap() - xs.iter().min().unwrap();
                let h = ys.iter().max().unwrap() - ys.iter().min().unwrap();
                match class {
                    0 => assert_eq!((w, h), (sep as usize + 2, 2)),
                    1 => assert_eq!((w, h), (2, sep as usize + 2)),
                    _ => assert_eq!(w, h),
                }
            }
        }
        // Diagonal and anti-diagonal differ in where the top blob sits.
        assert_ne!(pair_template(2, 16, 8, 0, 0), pair_template(3, 16, 8, 0, 0));
    }

    #[test]
    fn pairs_reject_more_than_four_classes() {
        let cfg = SyntheticConfig { classes: 5, family: Family::Pairs, ..Default::default() };
        assert!(gen_synthetic(&cfg, 0).is_err());
        let d = gen_synthetic(&SyntheticConfig { n: 40, classes: 4, family: Family::Pairs, ..Default::default() }, 0).unwrap();
        assert_eq!(d.len(), 40);
    }

    #[test]
    fn per_sample_noise_bounded() {
        let cfg = SyntheticConfig { n: 200, noise: 0.8, ..Default::default() };
        let d = gen_synthetic(&cfg, 3).unwrap();
        assert!(d.noise.iter().all(|&s| (0.0..0.8).contains(&s)));
    }
}
