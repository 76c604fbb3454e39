//! Datasets: IDX files and a seeded synthetic pattern task.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_U8_3D: u32 = 0x0000_0803;
const IDX_U8_4D: u32 = 0x0000_0804;
const IDX_U8_1D: u32 = 0x0000_0801;

/// Standard deviation of the additive noise in [`make_synthetic`].
pub const SYNTHETIC_NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, C, H, W]` with values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub source: DataSource,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, source: DataSource) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Consistency(format!(
                "images must be [n, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Image `i` as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_outer(i).expect("index in range")
    }

    pub fn batch(&self, indices: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
        (
            indices.iter().map(|&i| self.image(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an unsigned-byte IDX file into its extents and payload.
fn read_idx(path: &Path, allowed: &[u32]) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(format_err(path, "truncated before the magic number"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if !allowed.contains(&magic) {
        return Err(format_err(path, format!("bad magic 0x{magic:08x}")));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, "truncated inside the header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!(
                "header {dims:?} needs {expected} bytes of data, found {}",
                payload.len()
            ),
        ));
    }
    Ok((dims, payload.to_vec()))
}

/// Loads an IDX image file (`0x803` for `[n, H, W]`, or `0x804` for
/// `[n, C, H, W]`) and an IDX label file (`0x801`). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, &[IDX_U8_3D, IDX_U8_4D])?;
    let (label_dims, raw_labels) = read_idx(labels_path, &[IDX_U8_1D])?;
    let shape = match dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => unreachable!("rank fixed by the magic number"),
    };
    if shape[0] != label_dims[0] {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            shape[0],
            labels_path.display(),
            label_dims[0]
        )));
    }
    if shape.contains(&0) {
        return Err(format_err(images_path, format!("empty extents {shape:?}")));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let images = Tensor::new(shape, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(
        images,
        labels,
        num_classes,
        DataSource::Idx {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
        },
    )
}

/// Writes `dataset` as IDX, rounding pixels to bytes. Single-channel data
/// uses the 3-D layout, anything else the 4-D one.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = dataset.extents();
    let n = dataset.len();
    let mut img = Vec::with_capacity(4 + 16 + dataset.images.numel());
    let dims: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
    let magic = if c == 1 { IDX_U8_3D } else { IDX_U8_4D };
    img.extend_from_slice(&magic.to_be_bytes());
    for d in &dims {
        img.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_U8_1D.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &dataset.labels {
        let byte = u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit in a byte")))?;
        lab.push(byte);
    }
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Loads `images.idx` and `labels.idx` from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    load_idx(&dir.join("images.idx"), &dir.join("labels.idx"))
}

/// Class-conditional striped images: class `c` gets stripes at angle
/// `pi * c / num_classes` and a class-specific tint, each sample with a
/// small random phase and angle jitter plus Gaussian pixel noise. Labels
/// are balanced and shuffled.
pub fn make_synthetic(num_classes: usize, n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::Config(format!(
            "need at least one sample per class: n={n}, classes={num_classes}"
        )));
    }
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    const CHANNELS: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid std");
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let period = (size as f64 / 4.0).max(2.0);
    let plane = size * size;
    let mut data = Vec::with_capacity(n * CHANNELS * plane);
    for &label in &labels {
        let angle = PI * label as f64 / num_classes as f64 + rng.gen_range(-0.05..0.05);
        let phase = rng.gen_range(-0.3..0.3);
        let (cos, sin) = (angle.cos(), angle.sin());
        for ch in 0..CHANNELS {
            let tint = 0.6 + 0.4 * (((label + ch) % CHANNELS) as f64 / (CHANNELS - 1) as f64);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * cos + y as f64 * sin) / period;
                    let stripe = 0.5 + 0.35 * tint * (2.0 * PI * u + phase).cos();
                    data.push((stripe + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    let images = Tensor::new(vec![n, CHANNELS, size, size], data)?;
    Dataset::new(images, labels, num_classes, DataSource::Synthetic { seed })
}
