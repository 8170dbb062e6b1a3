//! Synthetic image-classification data, augmentation and on-disk layout.
//!
//! On disk a dataset is a directory of `.qt` input blobs plus `labels.csv`
//! with a `filename,label` header.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kernels::Dims;
use crate::error::{Error, Result};
use crate::tensor::{load_blob, save_blob, Tensor};

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(input [C, H, W], label)` pairs.
    pub samples: Vec<(Tensor, usize)>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Tensor, usize)>, classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("dataset is empty"));
        }
        let shape = samples[0].0.shape().to_vec();
        for (x, y) in &samples {
            if *y >= classes {
                return Err(Error::validation(format!("label {y} outside [0, {classes})")));
            }
            if x.shape() != shape.as_slice() {
                return Err(Error::validation("dataset samples have differing shapes"));
            }
            x.as_f32()?;
        }
        Ok(Self { samples, classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].0.shape()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, y)| *y).collect()
    }

    /// Stacks the selected samples into one NCHW buffer.
    pub fn batch(&self, idx: &[usize]) -> (Vec<f32>, Dims, Vec<usize>) {
        let s = self.sample_shape();
        let d = Dims::new(idx.len(), s[0], s[1], s[2]);
        let mut x = Vec::with_capacity(d.numel());
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let (t, l) = &self.samples[i];
            x.extend_from_slice(t.as_f32().expect("validated F32"));
            y.push(*l);
        }
        (x, d, y)
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset { samples: self.samples[..n.min(self.len())].to_vec(), classes: self.classes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Crop-window augmentation used by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Random-scale crop resized back to full size.
    AggressiveCrop,
    /// Random shift of up to one pixel with zero fill.
    WeakCrop,
    #[default]
    None,
}

/// Knobs of the synthetic generator. The defaults are what
/// [`make_toy_dataset`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDataConfig {
    pub channels: usize,
    /// Std of additive per-pixel Gaussian noise, relative to the unit-std template.
    pub noise: f32,
    /// Sample amplitude is drawn from `[1 - amp_jitter, 1 + amp_jitter]`.
    pub amp_jitter: f32,
    /// Maximum template shift in pixels.
    pub max_shift: usize,
    /// Share of each sample's template mixed in from a random other class.
    pub distractor: f32,
    /// Fraction of each class held out for evaluation.
    pub eval_fraction: f32,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self { channels: 3, noise: 0.8, amp_jitter: 0.5, max_shift: 1, distractor: 0.3, eval_fraction: 0.25 }
    }
}

fn class_template(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; c * s * s];
    let sf = s as f32;
    for _ in 0..3 {
        let (cx, cy) = (rng.random::<f32>() * sf, rng.random::<f32>() * sf);
        let r = 0.8 + rng.random::<f32>() * sf * 0.25;
        let color: Vec<f32> = (0..c).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    t[(ch * s + y) * s + x] += color[ch] * (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
    }
    let (fx, fy) = (rng.random::<f32>() * 2.0 - 1.0, rng.random::<f32>() * 2.0 - 1.0);
    let phase = rng.random::<f32>() * std::f32::consts::TAU;
    let color: Vec<f32> = (0..c).map(|_| rng.random::<f32>() - 0.5).collect();
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let arg = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / sf * 1.5 + phase;
                t[(ch * s + y) * s + x] += color[ch] * arg.sin();
            }
        }
    }
    let n = t.len() as f32;
    let mean = t.iter().sum::<f32>() / n;
    let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt().max(1e-6);
    t.iter_mut().for_each(|v| *v = (*v - mean) / std);
    t
}

fn shifted(t: &[f32], c: usize, s: usize, dx: isize, dy: isize) -> Vec<f32> {
    let mut out = vec![0.0f32; t.len()];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                    out[(ch * s + y) * s + x] = t[(ch * s + sy as usize) * s + sx as usize];
                }
            }
        }
    }
    out
}

/// Deterministic seeded toy set with `classes * per_class` samples.
pub fn make_toy_dataset(seed: u64, classes: usize, per_class: usize, image_size: usize) -> Result<DatasetSplit> {
    make_toy_dataset_with(seed, classes, per_class, image_size, &ToyDataConfig::default())
}

pub fn make_toy_dataset_with(
    seed: u64,
    classes: usize,
    per_class: usize,
    image_size: usize,
    cfg: &ToyDataConfig,
) -> Result<DatasetSplit> {
    if classes == 0 || per_class == 0 || image_size == 0 || cfg.channels == 0 {
        return Err(Error::validation("dataset dimensions must be positive"));
    }
    let (c, s) = (cfg.channels, image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..classes).map(|_| class_template(&mut rng, c, s)).collect();
    let eval_per_class = ((per_class as f32 * cfg.eval_fraction) as usize).min(per_class.saturating_sub(1));
    let train_per_class = per_class - eval_per_class;
    let shift = cfg.max_shift as i64;
    let mut train = Vec::with_capacity(classes * train_per_class);
    let mut eval = Vec::with_capacity(classes * eval_per_class);
    for i in 0..per_class {
        for (label, tpl) in templates.iter().enumerate() {
            let amp = 1.0 + cfg.amp_jitter * (rng.random::<f32>() * 2.0 - 1.0);
            let dx = rng.random_range(-shift..=shift) as isize;
            let dy = rng.random_range(-shift..=shift) as isize;
            let other = rng.random_range(0..classes);
            let base = shifted(tpl, c, s, dx, dy);
            let mix = &templates[other];
            let data: Vec<f32> = base
                .iter()
                .zip(mix)
                .map(|(b, m)| {
                    let n: f32 = StandardNormal.sample(&mut rng);
                    amp * ((1.0 - cfg.distractor) * b + cfg.distractor * m) + cfg.noise * n
                })
                .collect();
            let t = Tensor::from_f32(vec![c, s, s], data)?;
            if i < train_per_class {
                train.push((t, label));
            } else {
                eval.push((t, label));
            }
        }
    }
    let eval = if eval.is_empty() { train.clone() } else { eval };
    Ok(DatasetSplit { train: Dataset::new(train, classes)?, eval: Dataset::new(eval, classes)? })
}

/// Applies one random crop-window jitter to a `[C, H, W]` sample.
pub fn augment(x: &[f32], shape: &[usize], mode: Augmentation, rng: &mut impl Rng) -> Vec<f32> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    match mode {
        Augmentation::None => x.to_vec(),
        Augmentation::WeakCrop => {
            let dy = rng.random_range(-1i32..=1) as isize;
            let dx = rng.random_range(-1i32..=1) as isize;
            let mut out = vec![0.0f32; x.len()];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = (y as isize + dy, xx as isize + dx);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            out[(ch * h + y) * w + xx] = x[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
            out
        }
        Augmentation::AggressiveCrop => {
            let scale = rng.random_range(0.5f32..=1.0);
            let ch_ = ((h as f32 * scale).round() as usize).clamp(1, h);
            let cw = ((w as f32 * scale).round() as usize).clamp(1, w);
            let oy = rng.random_range(0..=h - ch_);
            let ox = rng.random_range(0..=w - cw);
            let mut out = vec![0.0f32; x.len()];
            for ch in 0..c {
                for y in 0..h {
                    let sy = oy + (y * ch_) / h;
                    for xx in 0..w {
                        let sx = ox + (xx * cw) / w;
                        out[(ch * h + y) * w + xx] = x[(ch * h + sy) * w + sx];
                    }
                }
            }
            out
        }
    }
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut csv = String::from("filename,label\n");
    for (i, (x, y)) in ds.samples.iter().enumerate() {
        let name = format!("sample_{i:06}.qt");
        save_blob(x, dir.join(&name))?;
        writeln!(csv, "{name},{y}").expect("write to String");
    }
    fs::write(dir.join(LABELS_FILE), csv)?;
    Ok(())
}

/// Loads a dataset directory. The class count is `classes`, or one more than
/// the largest label when not given.
pub fn load_dataset(dir: impl AsRef<Path>, classes: Option<usize>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(LABELS_FILE))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "filename,label" => {}
        _ => return Err(Error::format("labels.csv must start with `filename,label`")),
    }
    let mut samples = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(format!("labels.csv line {}: expected two fields", no + 2)))?;
        if file.contains(['/', '\\']) {
            return Err(Error::format(format!("labels.csv line {}: bad filename", no + 2)));
        }
        let label: usize =
            label.trim().parse().map_err(|_| Error::format(format!("labels.csv line {}: bad label", no + 2)))?;
        samples.push((load_blob(dir.join(file.trim()))?, label));
    }
    let classes = classes.unwrap_or_else(|| samples.iter().map(|(_, y)| y + 1).max().unwrap_or(0));
    Dataset::new(samples, classes)
}
