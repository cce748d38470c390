//! CIFAR binary batches and the standard augmentation pipeline.
//!
//! CIFAR-10 records are one label byte then 3072 pixel bytes (1024 R, 1024 G,
//! 1024 B, each row-major 32x32). CIFAR-100 records carry a coarse and a fine
//! label byte; the fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
/// Environment variable naming the directory that holds the batch files.
pub const DATA_DIR_ENV: &str = "TOCOMM_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn label_bytes(&self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    fn train_files(&self) -> Vec<&'static str> {
        match self {
            Variant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Variant::Cifar100 => vec!["train.bin"],
        }
    }

    fn test_file(&self) -> &'static str {
        match self {
            Variant::Cifar10 => "test_batch.bin",
            Variant::Cifar100 => "test.bin",
        }
    }
}

/// Parses the records in `bytes`; pixel values map to `[0, 1]`.
pub fn parse_cifar(bytes: &[u8], variant: Variant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            detail: "empty file".into(),
        });
    }
    if bytes.len() % rec != 0 {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Parse {
            offset,
            detail: format!("truncated record: {} trailing bytes, records are {rec} bytes", bytes.len() % rec),
        });
    }
    let n = bytes.len() / rec;
    let m = variant.num_classes();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= m {
            return Err(Error::Parse {
                offset: (i * rec + variant.label_bytes() - 1) as u64,
                detail: format!("label {label} out of range for {m} classes"),
            });
        }
        labels.push(label);
        data.extend(r[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, SIDE, SIDE], data)?;
    Dataset::new(images, labels, m, vec![0.0; n])
}

pub fn read_cifar_file(path: &Path, variant: Variant) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let m = parts[0].num_classes;
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend(p.labels);
        data.extend(p.images.into_data());
    }
    Dataset::new(Tensor::new(vec![n, 3, SIDE, SIDE], data)?, labels, m, vec![0.0; n])
}

/// Data directory from `dir` or the environment.
pub fn data_dir(dir: Option<&Path>) -> Result<PathBuf> {
    match dir {
        Some(d) => Ok(d.to_path_buf()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("set {DATA_DIR_ENV} or dataset.root to the CIFAR directory"))),
    }
}

/// Loads train and test batches; the last `val_size` training images form the
/// validation split.
pub fn load_cifar(dir: &Path, variant: Variant, val_size: usize) -> Result<Splits> {
    let train = variant
        .train_files()
        .into_iter()
        .map(|f| read_cifar_file(&dir.join(f), variant))
        .collect::<Result<Vec<_>>>()?;
    let train = concat(train)?;
    let test = read_cifar_file(&dir.join(variant.test_file()), variant)?;
    let (train, val) = train.split_tail(val_size)?;
    Ok(Splits { train, val, test })
}

/// Per-channel mean and standard deviation of `[N, C, H, W]` images.
pub fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = images.shape()[1];
    let hw = images.sample_len() / c;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..images.batch() {
        for (ch, plane) in images.sample(i).chunks(hw).enumerate() {
            sum[ch] += plane.iter().sum::<f64>();
            sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let n = (images.batch() * hw) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-12).sqrt()).collect();
    (mean, std)
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize(images: &mut Tensor, mean: &[f64], std: &[f64]) {
    let c = images.shape()[1];
    let hw = images.sample_len() / c;
    for (i, plane) in images.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        for v in plane {
            *v = (*v - mean[ch]) / std[ch];
        }
    }
}

/// Zero-pads by `pad`, takes a random crop of the original size and flips
/// horizontally with probability 1/2, independently per image.
pub fn augment(images: &Tensor, pad: usize, rng: &mut SeededRng) -> Tensor {
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let mut out = Tensor::zeros(images.shape());
    let len = images.sample_len();
    for i in 0..images.batch() {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let src = images.sample(i);
        let dst = &mut out.data_mut()[i * len..(i + 1) * len];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn records(variant: Variant, labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if variant == Variant::Cifar100 {
                out.push(0);
            }
            out.push(l);
            out.extend((0..PIXELS).map(|p| ((p + i) % 256) as u8));
        }
        out
    }

    #[test]
    fn record_lengths() {
        assert_eq!(Variant::Cifar10.record_len(), 3073);
        assert_eq!(Variant::Cifar100.record_len(), 3074);
        assert_eq!(10_000 * Variant::Cifar10.record_len(), 30_730_000);
    }

    #[test]
    fn parses_both_variants() {
        let d = parse_cifar(&records(Variant::Cifar10, &[3, 9]), Variant::Cifar10).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(d.images.sample(0)[255], 1.0);
        let d = parse_cifar(&records(Variant::Cifar100, &[42, 99]), Variant::Cifar100).unwrap();
        assert_eq!(d.labels, vec![42, 99]);
    }

    #[test]
    fn bad_label_reports_offset() {
        let bytes = records(Variant::Cifar10, &[1, 10]);
        match parse_cifar(&bytes, Variant::Cifar10) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = records(Variant::Cifar10, &[1, 2]);
        match parse_cifar(&bytes[..5000], Variant::Cifar10) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn augmentation_without_padding_only_flips() {
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut rng = seeded_rng(0);
        for _ in 0..10 {
            let y = augment(&x, 0, &mut rng);
            assert!(y == x || y.data() == [3., 2., 1., 6., 5., 4.]);
        }
    }

    #[test]
    fn normalization_centers_channels() {
        let mut x = Tensor::new(vec![2, 2, 1, 2], vec![1., 3., 10., 10., 3., 1., 20., 20.]).unwrap();
        let (mean, std) = channel_stats(&x);
        assert_eq!(mean, vec![2.0, 15.0]);
        normalize(&mut x, &mean, &std);
        let (m2, _) = channel_stats(&x);
        assert!(m2.iter().all(|m| m.abs() < 1e-12));
    }
}
