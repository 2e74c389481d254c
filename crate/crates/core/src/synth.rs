//! Seeded synthetic regression images.
//!
//! A grade-`g` image shows exactly `g * blobs_per_grade` dark disks on a noisy
//! bright background, so the target is a monotone function of blob count.
//! Grades are reported as `0..grades` and shifted by [`LABEL_OFFSET`] for
//! training so every internal label is strictly positive.
//!
//! # File layout (`INSD1`)
//!
//! All integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | 5 bytes `INSD1` |
//! | width, height, channels | `u32` each |
//! | count | `u64` |
//! | label mode | `u8` (0 categorical, 1 continuous) |
//! | split | `u8` (0 train, 1 test) |
//! | images | `count * channels * height * width` `f64`, each image `C x H x W` row-major |
//! | labels | `count` `f64`, reported (unshifted) |
//! | grades | `count` `f64`, reported categorical grade |

use std::path::Path;

use insightr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"INSD1";

/// Smallest radius whose disk always covers a pixel center.
pub const MIN_BLOB_RADIUS: f64 = 0.75;

/// Added to reported labels before training.
pub const LABEL_OFFSET: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Number of grades; reported grades run `0..grades`.
    pub grades: usize,
    pub train_per_grade: usize,
    pub test_per_grade: usize,
    pub blobs_per_grade: usize,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    pub noise_sigma: f64,
    pub background: f64,
    pub blob_level: f64,
    /// Replace training labels with uniform jitter around the grade.
    pub continuous_labels: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 32,
            height: 32,
            channels: 3,
            grades: 5,
            train_per_grade: 100,
            test_per_grade: 50,
            blobs_per_grade: 2,
            blob_radius_min: 1.5,
            blob_radius_max: 2.5,
            noise_sigma: 0.05,
            background: 0.8,
            blob_level: 0.2,
            continuous_labels: false,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 || self.channels == 0 {
            return Err(Error::Config(format!(
                "image must be at least 4x4 with one channel, got {}x{}x{}",
                self.width, self.height, self.channels
            )));
        }
        if self.grades < 2 {
            return Err(Error::Config("need at least two grades".into()));
        }
        // Below sqrt(1/2) a disk can miss every pixel center.
        if !(self.blob_radius_min >= MIN_BLOB_RADIUS && self.blob_radius_min <= self.blob_radius_max) {
            return Err(Error::Config(format!(
                "blob radius range [{}, {}] is invalid (minimum radius {MIN_BLOB_RADIUS})",
                self.blob_radius_min, self.blob_radius_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        let max_blobs = (self.grades - 1) * self.blobs_per_grade;
        let footprint = std::f64::consts::PI * (self.blob_radius_max + 1.0).powi(2);
        let area = ((self.width as f64 - 2.0 * self.blob_radius_max)
            * (self.height as f64 - 2.0 * self.blob_radius_max))
            .max(0.0);
        if max_blobs as f64 * footprint > 0.5 * area {
            return Err(Error::Config(format!(
                "{max_blobs} blobs of radius {} overflow a {}x{} image",
                self.blob_radius_max, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `len * channels * height * width` values in `[0, 1]`.
    pub images: Vec<f64>,
    /// Reported (unshifted) regression targets.
    pub labels: Vec<f64>,
    /// Reported categorical grade of each image.
    pub grades: Vec<f64>,
    pub label_mode: LabelMode,
    pub split: Split,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Training targets (shifted by [`LABEL_OFFSET`]).
    pub fn internal_labels(&self) -> Vec<f64> {
        shift_labels(&self.labels, LABEL_OFFSET)
    }

    /// Highest reported grade present.
    pub fn max_grade(&self) -> f64 {
        self.grades.iter().copied().fold(0.0, f64::max)
    }

    /// Stacks the selected images into an `N x C x H x W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> SynthDataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        SynthDataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            grades: indices.iter().map(|&i| self.grades[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> SynthDataset {
        SynthDataset {
            width: self.width,
            height: self.height,
            channels: self.channels,
            images: Vec::new(),
            labels: Vec::new(),
            grades: Vec::new(),
            label_mode: self.label_mode,
            split: self.split,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(self.width as u32);
        w.u32(self.height as u32);
        w.u32(self.channels as u32);
        w.u64(self.len() as u64);
        w.u8(match self.label_mode {
            LabelMode::Categorical => 0,
            LabelMode::Continuous => 1,
        });
        w.u8(match self.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        w.f64s(&self.images);
        w.f64s(&self.labels);
        w.f64s(&self.grades);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(5)? != DATASET_MAGIC {
            return Err(r.err("not an INSD1 dataset file"));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let count = r.u64()? as usize;
        let label_mode = match r.u8()? {
            0 => LabelMode::Categorical,
            1 => LabelMode::Continuous,
            v => return Err(r.err(format!("unknown label mode {v}"))),
        };
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            v => return Err(r.err(format!("unknown split tag {v}"))),
        };
        let images = r.f64s(count * width * height * channels)?;
        let labels = r.f64s(count)?;
        let grades = r.f64s(count)?;
        r.finish()?;
        Ok(SynthDataset {
            width,
            height,
            channels,
            images,
            labels,
            grades,
            label_mode,
            split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn split_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => seed.wrapping_mul(2).wrapping_add(0x5eed),
        Split::Test => seed.wrapping_mul(2).wrapping_add(0x5eed + 1),
    }
}

/// One grayscale image with `count` disjoint disks; returns pixels and centers.
fn render_image(
    config: &SynthConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (w, h) = (config.width, config.height);
    let mut disks: Vec<(f64, f64, f64)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while disks.len() < count {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::Config(format!(
                "could not place {count} disjoint blobs in a {w}x{h} image"
            )));
        }
        let r = if config.blob_radius_max > config.blob_radius_min {
            rng.random_range(config.blob_radius_min..=config.blob_radius_max)
        } else {
            config.blob_radius_min
        };
        let cx = rng.random_range(r..=(w as f64 - 1.0 - r));
        let cy = rng.random_range(r..=(h as f64 - 1.0 - r));
        // Two pixels apart at least, so rasterized disks never touch.
        let clear = disks
            .iter()
            .all(|&(ox, oy, or)| ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() >= r + or + 2.0);
        if clear {
            disks.push((cx, cy, r));
        }
    }
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut img = vec![config.background; w * h];
    if config.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    for &(cx, cy, r) in &disks {
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, (cx + r).ceil() as usize);
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, (cy + r).ceil() as usize);
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    img[y * w + x] = config.blob_level
                        + if config.noise_sigma > 0.0 {
                            noise.sample(rng)
                        } else {
                            0.0
                        };
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

/// Generates one split. Samples are ordered grade by grade.
pub fn generate_split(config: &SynthConfig, split: Split) -> Result<SynthDataset> {
    config.validate()?;
    let per_grade = match split {
        Split::Train => config.train_per_grade,
        Split::Test => config.test_per_grade,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, split));
    let plane = config.width * config.height;
    let mut images = Vec::with_capacity(config.grades * per_grade * plane * config.channels);
    let mut grades = Vec::with_capacity(config.grades * per_grade);
    for g in 0..config.grades {
        for _ in 0..per_grade {
            let gray = render_image(config, g * config.blobs_per_grade, &mut rng)?;
            for _ in 0..config.channels {
                images.extend_from_slice(&gray);
            }
            grades.push(g as f64);
        }
    }
    let ds = SynthDataset {
        width: config.width,
        height: config.height,
        channels: config.channels,
        images,
        labels: grades.clone(),
        grades,
        label_mode: LabelMode::Categorical,
        split,
    };
    if config.continuous_labels && split == Split::Train {
        Ok(continuous_labels(&ds, config.seed))
    } else {
        Ok(ds)
    }
}

/// Train and test splits.
pub fn generate(config: &SynthConfig) -> Result<(SynthDataset, SynthDataset)> {
    Ok((
        generate_split(config, Split::Train)?,
        generate_split(config, Split::Test)?,
    ))
}

/// Re-draws every label uniformly within half a grade of its categorical value.
pub fn continuous_labels(dataset: &SynthDataset, seed: u64) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_471A_B315);
    let labels = dataset
        .grades
        .iter()
        .map(|&c| rng.random_range((c - 0.5)..(c + 0.5)))
        .collect();
    SynthDataset {
        labels,
        label_mode: LabelMode::Continuous,
        ..dataset.clone()
    }
}

pub fn shift_labels(labels: &[f64], offset: f64) -> Vec<f64> {
    labels.iter().map(|&y| y + offset).collect()
}

pub fn unshift_labels(labels: &[f64], offset: f64) -> Vec<f64> {
    labels.iter().map(|&y| y - offset).collect()
}

/// Random rotation (any angle) and scaling in `[0.9, 1.1]` about the image
/// center, nearest-neighbor resampled with edge clamping.
pub fn augment(image: &[f64], channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Vec<f64> {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let scale = rng.random_range(0.9..1.1);
    let (s, c) = angle.sin_cos();
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; image.len()];
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (c * dx + s * dy) / scale + cx;
            let sy = (-s * dx + c * dy) / scale + cy;
            let ix = (sx.round().max(0.0) as usize).min(width - 1);
            let iy = (sy.round().max(0.0) as usize).min(height - 1);
            for ch in 0..channels {
                out[(ch * height + y) * width + x] = image[(ch * height + iy) * width + ix];
            }
        }
    }
    out
}
