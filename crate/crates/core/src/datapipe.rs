//! Augmentation, training-set reduction and the class-rebalanced sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::neuralnet::Tensor;
use crate::synthfundus::{Dataset, LabeledImage};
use crate::{seed, Error, Result};

/// Hybrid rebalancing: the minority class gets loss weight `r` (majority 1)
/// and minibatches hold majority:minority samples in the ratio `r:1`, so both
/// classes contribute the same total loss weight to every batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceConfig {
    pub r: u32,
    pub enabled: bool,
    /// Label of the up-weighted, under-sampled class.
    pub minority: usize,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self {
            r: 1,
            enabled: true,
            minority: 1,
        }
    }
}

impl RebalanceConfig {
    /// `r` = majority/minority rounded to the nearest integer (at least 1),
    /// with the minority class taken from the counts.
    pub fn from_counts(negatives: usize, positives: usize) -> Self {
        let (major, minor, minority) = if positives <= negatives {
            (negatives, positives, 1)
        } else {
            (positives, negatives, 0)
        };
        let r = if minor == 0 {
            1
        } else {
            ((major as f64 / minor as f64).round() as u32).max(1)
        };
        Self {
            r,
            enabled: true,
            minority,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidArgument("rebalance ratio r must be positive".into()));
        }
        if self.minority > 1 {
            return Err(Error::InvalidArgument(format!(
                "minority label {} is not binary",
                self.minority
            )));
        }
        Ok(())
    }

    /// Loss weights `(w_neg, w_pos)`.
    pub fn class_weights(&self) -> (f64, f64) {
        if !self.enabled {
            return (1.0, 1.0);
        }
        let r = self.r as f64;
        if self.minority == 1 {
            (1.0, r)
        } else {
            (r, 1.0)
        }
    }

    /// `(negatives, positives)` per batch of `batch_size`.
    pub fn batch_composition(&self, batch_size: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let parts = self.r as usize + 1;
        if batch_size == 0 || !batch_size.is_multiple_of(parts) {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} is not divisible by r + 1 = {parts}"
            )));
        }
        let minor = batch_size / parts;
        let major = batch_size - minor;
        Ok(if self.minority == 1 {
            (major, minor)
        } else {
            (minor, major)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness_range: [f64; 2],
    pub flip_probability: f64,
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness_range: [0.8, 1.2],
            flip_probability: 0.5,
            output_size: crate::synthfundus::DEFAULT_IMAGE_SIZE,
        }
    }
}

impl AugmentConfig {
    /// Resize only; used at evaluation time.
    pub fn deterministic(output_size: usize) -> Self {
        Self {
            brightness_range: [1.0, 1.0],
            flip_probability: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.brightness_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "brightness range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidArgument(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if self.output_size == 0 {
            return Err(Error::InvalidArgument("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Every pixel `p` becomes `min(1, p · factor)`.
pub fn brightness_adjust(image: &LabeledImage, factor: f64) -> Result<LabeledImage> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "brightness factor must be positive and finite, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(image.clone());
    }
    let f = factor as f32;
    Ok(LabeledImage {
        pixels: image.pixels.map(|p| (p * f).min(1.0)),
        ..image.clone()
    })
}

/// Horizontal mirror when `rng_draw < p`.
pub fn random_flip(image: &LabeledImage, rng_draw: f64, p: f64) -> LabeledImage {
    if rng_draw >= p {
        return image.clone();
    }
    let shape = image.pixels.shape();
    let w = shape[shape.len() - 1];
    let mut data = image.pixels.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    LabeledImage {
        pixels: Tensor::new(shape.to_vec(), data).expect("shape preserved"),
        ..image.clone()
    }
}

/// Bilinear resize with half-pixel-centre sampling and edge clamping.
pub fn resize(image: &LabeledImage, size: usize) -> Result<LabeledImage> {
    if size == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let shape = image.pixels.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected (C, H, W), got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h == size && w == size {
        return Ok(image.clone());
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / size as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(size, h);
    let xs = axis(size, w);
    let src = image.pixels.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(LabeledImage {
        pixels: Tensor::new(vec![c, size, size], out)?,
        ..image.clone()
    })
}

/// Brightness, then flip, then resize.
pub fn augment(image: &LabeledImage, config: &AugmentConfig, rng: &mut impl Rng) -> Result<LabeledImage> {
    let [lo, hi] = config.brightness_range;
    let factor = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let draw: f64 = rng.gen();
    let img = brightness_adjust(image, factor)?;
    let img = random_flip(&img, draw, config.flip_probability);
    resize(&img, config.output_size)
}

/// Keeps `round(count · (1 − fraction))` items per class.
///
/// Items are ranked by a hash of `(seed, class, source_index)` and the
/// lowest-ranked prefix is kept, so a larger fraction always keeps a subset
/// of what a smaller one keeps.
pub fn reduce_training_set(train: &Dataset, reduction_fraction: f64, seed_value: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&reduction_fraction) {
        return Err(Error::InvalidArgument(format!(
            "reduction fraction {reduction_fraction} outside [0, 1)"
        )));
    }
    if reduction_fraction == 0.0 {
        return Ok(train.clone());
    }
    let mut keep = Vec::new();
    for (class, idx) in train.indices_by_class().into_iter().enumerate() {
        let target = (idx.len() as f64 * (1.0 - reduction_fraction)).round() as usize;
        if target == 0 {
            return Err(Error::DegenerateClass(format!(
                "reducing by {reduction_fraction} leaves class {class} empty ({} items before)",
                idx.len()
            )));
        }
        let mut ranked: Vec<(u64, usize)> = idx
            .iter()
            .map(|&i| {
                let key = seed::derive(&[
                    seed_value,
                    seed::str_key("reduce"),
                    class as u64,
                    train.items[i].source_index,
                ]);
                (key, i)
            })
            .collect();
        ranked.sort_unstable();
        keep.extend(ranked[..target].iter().map(|&(_, i)| i));
    }
    keep.sort_unstable();
    Ok(train.subset(&keep))
}

/// Indices of one rebalanced minibatch, drawn with replacement within each
/// class. Negatives come first.
pub fn minibatch_indices(
    train: &Dataset,
    batch_size: usize,
    config: &RebalanceConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !config.enabled {
        if train.is_empty() || batch_size == 0 {
            return Err(Error::InvalidArgument("empty dataset or batch".into()));
        }
        return Ok((0..batch_size).map(|_| rng.gen_range(0..train.len())).collect());
    }
    let (n_neg, n_pos) = config.batch_composition(batch_size)?;
    let by = train.indices_by_class();
    if by.len() != 2 {
        return Err(Error::InvalidArgument("rebalanced sampling needs a binary dataset".into()));
    }
    for (class, members) in by.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::DegenerateClass(format!("class {class} has no training items")));
        }
    }
    let mut out = Vec::with_capacity(batch_size);
    for (members, count) in by.iter().zip([n_neg, n_pos]) {
        out.extend((0..count).map(|_| members[rng.gen_range(0..members.len())]));
    }
    Ok(out)
}

pub fn stratified_minibatch(
    train: &Dataset,
    batch_size: usize,
    config: &RebalanceConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledImage>> {
    Ok(minibatch_indices(train, batch_size, config, rng)?
        .into_iter()
        .map(|i| train.items[i].clone())
        .collect())
}

/// Stacks images into an `(N, C, S, S)` network input, mapping pixel
/// intensities from `[0, 1]` to `[-1, 1]`.
pub fn to_batch(images: &[LabeledImage]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = images.iter().map(|i| &i.pixels).collect();
    Ok(Tensor::stack(&refs)?.map(|x| 2.0 * x - 1.0))
}
