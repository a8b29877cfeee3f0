//! Deterministic synthetic fundus-like datasets.
//!
//! Three tasks share one renderer:
//!
//! * `SourceDR`: fundus disc with a vessel tree; positives carry a cluster
//!   of small dark dots.
//! * `TargetROP`: the same disc and vessel model; positives carry one bright
//!   thick arc (the ridge).
//! * `GenericPretext`: class-indexed geometric textures without any fundus
//!   structure.
//!
//! Vessel geometry depends only on `(seed, index)`, so a source and a target
//! image rendered with the same seed, index and strength share the same
//! vessel pixels. Everything else (lesions, shading jitter, noise) is keyed
//! by `(seed, task, label, index)`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::neuralnet::Tensor;
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    SourceDR,
    TargetROP,
    GenericPretext,
}

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            TaskId::SourceDR => "SourceDR",
            TaskId::TargetROP => "TargetROP",
            TaskId::GenericPretext => "GenericPretext",
        }
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, TaskId::GenericPretext)
    }

    fn key(self) -> u64 {
        seed::str_key(self.name())
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Definition of one synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub image_size: usize,
    pub num_classes: usize,
    /// Binary tasks only.
    pub positive_count: usize,
    /// Binary tasks only.
    pub negative_count: usize,
    /// Pretext task only: images per class.
    pub per_class_count: usize,
    pub shared_feature_strength: f64,
    pub seed: u64,
}

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_SHARED_FEATURE_STRENGTH: f64 = 0.8;

impl TaskSpec {
    /// DR analog: 2,655 positives and 958 negatives.
    pub fn source_dr() -> Self {
        Self {
            task_id: TaskId::SourceDR,
            image_size: DEFAULT_IMAGE_SIZE,
            num_classes: 2,
            positive_count: 2655,
            negative_count: 958,
            per_class_count: 0,
            shared_feature_strength: DEFAULT_SHARED_FEATURE_STRENGTH,
            seed: 101,
        }
    }

    /// ROP analog: 231 positives and 742 negatives.
    pub fn target_rop() -> Self {
        Self {
            task_id: TaskId::TargetROP,
            image_size: DEFAULT_IMAGE_SIZE,
            num_classes: 2,
            positive_count: 231,
            negative_count: 742,
            per_class_count: 0,
            shared_feature_strength: DEFAULT_SHARED_FEATURE_STRENGTH,
            seed: 202,
        }
    }

    /// Eight texture classes, 300 images each.
    pub fn generic_pretext() -> Self {
        Self {
            task_id: TaskId::GenericPretext,
            image_size: DEFAULT_IMAGE_SIZE,
            num_classes: 8,
            positive_count: 0,
            negative_count: 0,
            per_class_count: 300,
            shared_feature_strength: 0.0,
            seed: 303,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.shared_feature_strength) {
            return bad(format!(
                "shared_feature_strength {} outside [0, 1]",
                self.shared_feature_strength
            ));
        }
        if self.task_id.is_binary() {
            if self.num_classes != 2 {
                return bad(format!("{} is binary, num_classes = {}", self.task_id, self.num_classes));
            }
            if self.positive_count + self.negative_count == 0 {
                return bad("both class counts are zero".into());
            }
        } else {
            if self.num_classes < 2 {
                return bad("pretext task needs at least two classes".into());
            }
            if self.per_class_count == 0 {
                return bad("per_class_count must be positive".into());
            }
        }
        Ok(())
    }

    /// Declared number of images per class.
    pub fn class_counts(&self) -> Vec<usize> {
        if self.task_id.is_binary() {
            vec![self.negative_count, self.positive_count]
        } else {
            vec![self.per_class_count; self.num_classes]
        }
    }

    pub fn total(&self) -> usize {
        self.class_counts().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// (3, size, size), values in [0, 1].
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub source_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    pub fn num_positive(&self) -> usize {
        self.items.iter().filter(|i| i.label == 1).count()
    }

    /// Item indices grouped by label, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.spec.num_classes];
        for (i, item) in self.items.iter().enumerate() {
            by[item.label].push(i);
        }
        by
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    /// SHA-256 over labels, indices and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.items.len() * (16 + 12 * 32 * 32));
        bytes.extend_from_slice(self.spec.task_id.name().as_bytes());
        for item in &self.items {
            bytes.extend_from_slice(&(item.label as u64).to_le_bytes());
            bytes.extend_from_slice(&item.source_index.to_le_bytes());
            for v in item.pixels.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        seed::sha256_hex(&bytes)
    }

    /// Writes `class_<label>/<source_index>.bin` tensor files and a
    /// `manifest.csv` with `source_index,label,filename` rows.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.csv"))?);
        writeln!(manifest, "source_index,label,filename")?;
        for class in 0..self.spec.num_classes {
            std::fs::create_dir_all(dir.join(format!("class_{class}")))?;
        }
        for item in &self.items {
            let rel = format!("class_{}/{:06}.bin", item.label, item.source_index);
            std::fs::write(dir.join(&rel), item.pixels.to_le_bytes())?;
            writeln!(manifest, "{},{},{}", item.source_index, item.label, rel)?;
        }
        manifest.flush()?;
        Ok(())
    }
}

/// Integer train fraction `num / den`, so split counts are exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRatio {
    pub num: u64,
    pub den: u64,
}

impl TrainRatio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 || num >= den {
            return Err(Error::InvalidArgument(format!(
                "train ratio {num}/{den} must lie strictly between 0 and 1"
            )));
        }
        Ok(Self { num, den })
    }

    /// 4:1 train:test.
    pub fn four_to_one() -> Self {
        Self { num: 4, den: 5 }
    }

    pub fn train_count(&self, n: usize) -> usize {
        (n as u64 * self.num / self.den) as usize
    }
}

/// Pixel masks behind one rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderMasks {
    /// `None` for the pretext task, which has no vessel model.
    pub vessels: Option<Vec<bool>>,
    pub lesion: Vec<bool>,
}

const DISC_RADIUS: f64 = 0.47;
const TINT: [f64; 3] = [1.0, 0.62, 0.38];
const NOISE_AMPLITUDE: f64 = 0.035;
const VESSEL_CONTRAST: f64 = 0.35;

pub fn generate_image(spec: &TaskSpec, label: usize, index: u64) -> Result<LabeledImage> {
    if label >= spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            spec.num_classes
        )));
    }
    let s = spec.image_size;
    let n = s * s;
    let mut jitter = seed::rng(&[spec.seed, spec.task_id.key(), label as u64, index, 1]);
    let mut lum = vec![0.0f64; n];
    let mut tint = TINT;

    if spec.task_id == TaskId::GenericPretext {
        render_texture(spec, label, &mut jitter, &mut lum, &mut tint);
    } else {
        let masks = render_masks(spec, label, index)?;
        let brightness = jitter.gen_range(-0.05..0.05);
        for (i, l) in lum.iter_mut().enumerate() {
            let (u, v) = pixel_center(i, s);
            let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            *l = if d <= DISC_RADIUS {
                0.45 + 0.25 * (1.0 - (d / DISC_RADIUS).powi(2)) + brightness
            } else {
                0.03
            };
        }
        if let Some(vessels) = &masks.vessels {
            let contrast = VESSEL_CONTRAST * spec.shared_feature_strength;
            for (l, &m) in lum.iter_mut().zip(vessels) {
                if m {
                    *l -= contrast;
                }
            }
        }
        if label == 1 {
            let (lo, hi) = match spec.task_id {
                TaskId::SourceDR => (-0.35, -0.18),
                _ => (0.12, 0.28),
            };
            // lesion contrast, separate from the geometry stream
            let delta = seed::rng(&[spec.seed, spec.task_id.key(), index, 3]).gen_range(lo..hi);
            for (l, &m) in lum.iter_mut().zip(&masks.lesion) {
                if m {
                    *l += delta;
                }
            }
        }
    }

    let mut noise = seed::rng(&[spec.seed, spec.task_id.key(), label as u64, index, 2]);
    let mut data = vec![0.0f32; 3 * n];
    for (c, &t) in tint.iter().enumerate() {
        for i in 0..n {
            let v = lum[i] * t + noise.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
            data[c * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(LabeledImage {
        pixels: Tensor::new(vec![3, s, s], data)?,
        label,
        source_index: index,
    })
}

/// Vessel and lesion masks for a fundus-task image.
pub fn render_masks(spec: &TaskSpec, label: usize, index: u64) -> Result<RenderMasks> {
    if label >= spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            spec.num_classes
        )));
    }
    let s = spec.image_size;
    if spec.task_id == TaskId::GenericPretext {
        return Ok(RenderMasks {
            vessels: None,
            lesion: vec![false; s * s],
        });
    }
    let vessels = vessel_mask(spec.seed, index, s);
    let lesion = if label == 1 {
        let mut rng = lesion_rng(spec, index);
        match spec.task_id {
            TaskId::SourceDR => dot_cluster_mask(&mut rng, s),
            _ => ridge_mask(&mut rng, s),
        }
    } else {
        vec![false; s * s]
    };
    Ok(RenderMasks {
        vessels: Some(vessels),
        lesion,
    })
}

pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut labels: Vec<usize> = spec
        .class_counts()
        .iter()
        .enumerate()
        .flat_map(|(class, &count)| std::iter::repeat_n(class, count))
        .collect();
    let mut order = seed::rng(&[spec.seed, spec.task_id.key(), seed::str_key("order")]);
    for i in (1..labels.len()).rev() {
        let j = order.gen_range(0..=i);
        labels.swap(i, j);
    }
    let items = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| generate_image(spec, label, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        items,
    })
}

/// Stratified split: per class, `floor(count · ratio)` items go to train.
pub fn split(dataset: &Dataset, train_ratio: TrainRatio, seed_value: u64) -> Result<(Dataset, Dataset)> {
    TrainRatio::new(train_ratio.num, train_ratio.den)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} item(s), need at least 2",
                idx.len()
            )));
        }
        let mut rng = seed::rng(&[seed_value, seed::str_key("split"), class as u64]);
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let k = train_ratio.train_count(idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

fn pixel_center(i: usize, s: usize) -> (f64, f64) {
    let x = (i % s) as f64 + 0.5;
    let y = (i / s) as f64 + 0.5;
    (x / s as f64, y / s as f64)
}

fn lesion_rng(spec: &TaskSpec, index: u64) -> rand_chacha::ChaCha8Rng {
    seed::rng(&[spec.seed, spec.task_id.key(), 1, index, 4])
}

fn inside_disc(u: f64, v: f64) -> bool {
    (u - 0.5).powi(2) + (v - 0.5).powi(2) <= DISC_RADIUS * DISC_RADIUS
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Branching vessel tree radiating from an off-centre nerve head.
fn vessel_mask(seed_value: u64, index: u64, s: usize) -> Vec<bool> {
    let mut rng = seed::rng(&[seed_value, seed::str_key("vessels"), index]);
    let head = (0.5 + rng.gen_range(-0.12..0.12), 0.5 + rng.gen_range(-0.06..0.06));
    // (start, end, width) in unit coordinates
    let mut segments: Vec<((f64, f64), (f64, f64), f64)> = Vec::new();
    let mains = 4;
    for m in 0..mains {
        let mut angle = PI / 4.0 + m as f64 * PI / 2.0 + rng.gen_range(-0.35..0.35);
        let mut p = head;
        let steps = rng.gen_range(5..8);
        let branch_at = rng.gen_range(1..3);
        for step in 0..steps {
            angle += rng.gen_range(-0.3..0.3);
            let len = rng.gen_range(0.055..0.08);
            let q = (p.0 + len * angle.cos(), p.1 + len * angle.sin());
            segments.push((p, q, 0.046));
            if step == branch_at {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut ba = angle + side * rng.gen_range(0.45..0.8);
                let mut bp = q;
                for _ in 0..rng.gen_range(2..5) {
                    ba += rng.gen_range(-0.3..0.3);
                    let bl = rng.gen_range(0.05..0.07);
                    let bq = (bp.0 + bl * ba.cos(), bp.1 + bl * ba.sin());
                    segments.push((bp, bq, 0.036));
                    bp = bq;
                }
            }
            p = q;
        }
    }
    let px = 1.0 / s as f64;
    (0..s * s)
        .map(|i| {
            let c = pixel_center(i, s);
            inside_disc(c.0, c.1)
                && segments
                    .iter()
                    // never thinner than one pixel
                    .any(|&(a, b, w)| segment_distance(c, a, b) <= (w / 2.0).max(0.5 * px))
        })
        .collect()
}

fn dot_cluster_mask(rng: &mut impl Rng, s: usize) -> Vec<bool> {
    let r = rng.gen_range(0.08..0.33);
    let theta = rng.gen_range(0.0..2.0 * PI);
    let center = (0.5 + r * theta.cos(), 0.5 + r * theta.sin());
    let dots: Vec<((f64, f64), f64)> = (0..rng.gen_range(3..8))
        .map(|_| {
            let off = (rng.gen_range(-0.09..0.09), rng.gen_range(-0.09..0.09));
            ((center.0 + off.0, center.1 + off.1), rng.gen_range(0.022..0.04))
        })
        .collect();
    let px = 1.0 / s as f64;
    let mut mask: Vec<bool> = (0..s * s)
        .map(|i| {
            let c = pixel_center(i, s);
            inside_disc(c.0, c.1)
                && dots.iter().any(|&(d, rad)| {
                    ((c.0 - d.0).powi(2) + (c.1 - d.1).powi(2)).sqrt() <= rad.max(0.5 * px)
                })
        })
        .collect();
    // Each dot covers at least its nearest pixel.
    for &(d, _) in &dots {
        let x = ((d.0 * s as f64) as usize).min(s - 1);
        let y = ((d.1 * s as f64) as usize).min(s - 1);
        let c = pixel_center(y * s + x, s);
        if inside_disc(c.0, c.1) {
            mask[y * s + x] = true;
        }
    }
    mask
}

fn ridge_mask(rng: &mut impl Rng, s: usize) -> Vec<bool> {
    let radius = rng.gen_range(0.2..0.36);
    let span = rng.gen_range(0.7..1.5);
    let start = rng.gen_range(0.0..2.0 * PI);
    let thickness = rng.gen_range(0.05f64..0.075).max(1.2 / s as f64);
    (0..s * s)
        .map(|i| {
            let (u, v) = pixel_center(i, s);
            let (dx, dy) = (u - 0.5, v - 0.5);
            let d = (dx * dx + dy * dy).sqrt();
            let a = (dy.atan2(dx) - start).rem_euclid(2.0 * PI);
            (d - radius).abs() <= thickness / 2.0 && a <= span
        })
        .collect()
}

/// Texture families cycle stripes, checkerboard, rings, dot lattice; the
/// frequency steps up every four classes.
fn render_texture(spec: &TaskSpec, label: usize, rng: &mut impl Rng, lum: &mut [f64], tint: &mut [f64; 3]) {
    let s = spec.image_size;
    let family = label % 4;
    let freq = 3.0 + 2.5 * (label / 4) as f64 + rng.gen_range(-0.4..0.4);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.18..0.32);
    let base = rng.gen_range(0.4..0.6);
    for t in tint.iter_mut() {
        *t = rng.gen_range(0.6..1.0);
    }
    let (ct, st) = (theta.cos(), theta.sin());
    for (i, l) in lum.iter_mut().enumerate() {
        let (u, v) = pixel_center(i, s);
        let (x, y) = (u - 0.5, v - 0.5);
        let (a, b) = (x * ct + y * st, -x * st + y * ct);
        let w = 2.0 * PI * freq;
        let pattern = match family {
            0 => (w * a + phase).sin(),
            1 => ((w * a + phase).sin() * (w * b + phase).sin()).signum(),
            2 => (w * (a * a + b * b).sqrt() * 1.5 + phase).sin(),
            _ => {
                let m = (w * a + phase).sin() * (w * b).sin();
                if m > 0.5 {
                    1.0
                } else {
                    -0.4
                }
            }
        };
        *l = base + contrast * pattern;
    }
}
