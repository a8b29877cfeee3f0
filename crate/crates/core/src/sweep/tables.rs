//! Aggregate tables over a complete sweep: mean improvement over Direct,
//! standard-deviation reduction, and size degradation.
//!
//! The `*_core` functions work on plain per-fraction, per-seed values and
//! are generic so fixtures can be checked in exact arithmetic.

use std::collections::BTreeMap;

use num_traits::{Float, FromPrimitive, Num};

use super::SweepResult;
use crate::metrics::Metric;
use crate::trainer::InitMode;
use crate::{Error, Result};

/// Fractions compared by the size-degradation table.
pub const FULL_FRACTION: f64 = 0.0;
pub const SMALL_FRACTION: f64 = 0.9;
const FRACTION_TOL: f64 = 1e-9;

/// A table value plus how many fractions (or, for size degradation, whether
/// the single comparison) had to be skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate<T = f64> {
    pub value: Option<T>,
    pub excluded: usize,
}

pub type PerMetric = BTreeMap<Metric, Aggregate>;

fn from_usize<T: FromPrimitive>(n: usize) -> T {
    T::from_usize(n).expect("count representable")
}

/// Mean over seeds, or `None` if any seed is missing the value.
fn seed_mean<T: Num + Clone + FromPrimitive>(values: &[Option<T>]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sum = T::zero();
    for v in values {
        sum = sum + v.clone()?;
    }
    Some(sum / from_usize(values.len()))
}

fn mean_of<T: Num + Clone + FromPrimitive>(xs: Vec<T>, excluded: usize) -> Aggregate<T> {
    if xs.is_empty() {
        return Aggregate { value: None, excluded };
    }
    let n = xs.len();
    let sum = xs.into_iter().fold(T::zero(), |a, b| a + b);
    Aggregate {
        value: Some(sum / from_usize(n)),
        excluded,
    }
}

/// `direct[f][s]`, `pretrained[f][s]`: the mean over fractions of
/// `100 (P − D) / D` with P, D the seed means at each fraction. A fraction
/// is skipped if any seed value is undefined or D is zero.
pub fn mean_improvement_core<T: Num + Clone + FromPrimitive>(
    direct: &[Vec<Option<T>>],
    pretrained: &[Vec<Option<T>>],
) -> Result<Aggregate<T>> {
    if direct.len() != pretrained.len() {
        return Err(Error::Shape(format!(
            "{} vs {} fractions",
            direct.len(),
            pretrained.len()
        )));
    }
    let hundred: T = from_usize(100);
    let mut kept = Vec::new();
    let mut excluded = 0;
    for (d, p) in direct.iter().zip(pretrained) {
        match (seed_mean(d), seed_mean(p)) {
            (Some(d), Some(p)) if !d.is_zero() => kept.push(hundred.clone() * (p - d.clone()) / d),
            _ => excluded += 1,
        }
    }
    Ok(mean_of(kept, excluded))
}

/// Sample standard deviation (n − 1), or `None` if any value is missing.
fn sample_std<T: Float + FromPrimitive>(values: &[Option<T>]) -> Option<T> {
    let xs: Vec<T> = values.iter().copied().collect::<Option<_>>()?;
    let n: T = from_usize(xs.len());
    let mean = xs.iter().fold(T::zero(), |a, &b| a + b) / n;
    let ss = xs.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean));
    Some((ss / (n - T::one())).sqrt())
}

/// Mean over fractions of `100 (σ_D − σ_P) / σ_D`, σ the sample standard
/// deviation across seeds. Negative when the pretrained runs spread more.
pub fn std_reduction_core<T: Float + FromPrimitive>(
    direct: &[Vec<Option<T>>],
    pretrained: &[Vec<Option<T>>],
) -> Result<Aggregate<T>> {
    if direct.len() != pretrained.len() {
        return Err(Error::Shape(format!(
            "{} vs {} fractions",
            direct.len(),
            pretrained.len()
        )));
    }
    if direct.iter().chain(pretrained).any(|seeds| seeds.len() < 2) {
        return Err(Error::InvalidArgument(
            "standard deviation across seeds needs at least two seeds".into(),
        ));
    }
    let hundred: T = from_usize(100);
    let mut kept = Vec::new();
    let mut excluded = 0;
    for (d, p) in direct.iter().zip(pretrained) {
        match (sample_std(d), sample_std(p)) {
            (Some(sd), Some(sp)) if sd > T::zero() => kept.push(hundred * (sd - sp) / sd),
            _ => excluded += 1,
        }
    }
    let n = kept.len();
    if n == 0 {
        return Ok(Aggregate { value: None, excluded });
    }
    let sum = kept.into_iter().fold(T::zero(), |a, b| a + b);
    Ok(Aggregate {
        value: Some(sum / from_usize(n)),
        excluded,
    })
}

/// `100 (M_full − M_small) / M_full` on seed means.
pub fn size_degradation_core<T: Num + Clone + FromPrimitive>(full: &[Option<T>], small: &[Option<T>]) -> Aggregate<T> {
    match (seed_mean(full), seed_mean(small)) {
        (Some(f), Some(s)) if !f.is_zero() => Aggregate {
            value: Some(from_usize::<T>(100) * (f.clone() - s) / f),
            excluded: 0,
        },
        _ => Aggregate { value: None, excluded: 1 },
    }
}

fn per_fraction(result: &SweepResult, mode: InitMode, metric: Metric) -> Vec<Vec<Option<f64>>> {
    result
        .fractions
        .iter()
        .map(|&f| result.values(mode, metric, f))
        .collect()
}

fn require_complete(result: &SweepResult) -> Result<()> {
    let missing = result.missing();
    if missing.is_empty() {
        return Ok(());
    }
    let listed: Vec<String> = missing.iter().map(|k| k.to_string()).collect();
    Err(Error::InvalidArgument(format!(
        "sweep grid is incomplete; missing {}",
        listed.join(", ")
    )))
}

fn require_mode(result: &SweepResult, mode: InitMode) -> Result<()> {
    if result.modes.contains(&mode) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("mode {mode} is not part of the sweep")))
    }
}

/// Mean improvement of `mode` over Direct, per metric.
pub fn mean_improvement(result: &SweepResult, mode: InitMode) -> Result<PerMetric> {
    require_complete(result)?;
    require_mode(result, mode)?;
    require_mode(result, InitMode::Direct)?;
    Metric::ALL
        .into_iter()
        .map(|m| {
            let agg = mean_improvement_core(
                &per_fraction(result, InitMode::Direct, m),
                &per_fraction(result, mode, m),
            )?;
            Ok((m, agg))
        })
        .collect()
}

/// Standard-deviation reduction of `mode` relative to Direct, per metric.
pub fn std_reduction(result: &SweepResult, mode: InitMode) -> Result<PerMetric> {
    require_complete(result)?;
    require_mode(result, mode)?;
    require_mode(result, InitMode::Direct)?;
    Metric::ALL
        .into_iter()
        .map(|m| {
            let agg = std_reduction_core(
                &per_fraction(result, InitMode::Direct, m),
                &per_fraction(result, mode, m),
            )?;
            Ok((m, agg))
        })
        .collect()
}

fn find_fraction(result: &SweepResult, target: f64) -> Result<f64> {
    result
        .fractions
        .iter()
        .copied()
        .find(|f| (f - target).abs() <= FRACTION_TOL)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "size degradation needs reduction fraction {target} in the sweep"
            ))
        })
}

/// Relative drop from the full training set to the 90% reduction, per metric.
pub fn size_degradation(result: &SweepResult, mode: InitMode) -> Result<PerMetric> {
    require_complete(result)?;
    require_mode(result, mode)?;
    let full = find_fraction(result, FULL_FRACTION)?;
    let small = find_fraction(result, SMALL_FRACTION)?;
    Ok(Metric::ALL
        .into_iter()
        .map(|m| {
            let agg = size_degradation_core(&result.values(mode, m, full), &result.values(mode, m, small));
            (m, agg)
        })
        .collect())
}

/// The three summary tables. Improvement and reduction rows exist for every
/// mode other than Direct; degradation rows for every mode, when the sweep
/// covers both the full and the 90%-reduced training set.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateTables {
    pub mean_improvement: BTreeMap<InitMode, PerMetric>,
    pub std_reduction: BTreeMap<InitMode, PerMetric>,
    pub size_degradation: BTreeMap<InitMode, PerMetric>,
}

impl AggregateTables {
    pub fn compute(result: &SweepResult) -> Result<Self> {
        require_complete(result)?;
        let mut t = Self {
            mean_improvement: BTreeMap::new(),
            std_reduction: BTreeMap::new(),
            size_degradation: BTreeMap::new(),
        };
        let has_direct = result.modes.contains(&InitMode::Direct);
        let has_endpoints =
            find_fraction(result, FULL_FRACTION).is_ok() && find_fraction(result, SMALL_FRACTION).is_ok();
        if !has_endpoints {
            log::warn!("size degradation skipped: the sweep lacks fraction {FULL_FRACTION} or {SMALL_FRACTION}");
        }
        for &mode in &result.modes {
            if mode != InitMode::Direct && has_direct {
                t.mean_improvement.insert(mode, mean_improvement(result, mode)?);
                if result.seeds.len() >= 2 {
                    t.std_reduction.insert(mode, std_reduction(result, mode)?);
                }
            }
            if has_endpoints {
                t.size_degradation.insert(mode, size_degradation(result, mode)?);
            }
        }
        Ok(t)
    }
}

/// One learning-curve point: training-set size as a fraction of the full
/// set, with mean and range over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub size: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Points in ascending size order; fractions where every seed is undefined
/// are dropped.
pub fn learning_curves(result: &SweepResult, mode: InitMode, metric: Metric) -> Vec<CurvePoint> {
    let mut pts: Vec<CurvePoint> = result
        .fractions
        .iter()
        .filter_map(|&f| {
            let vals: Vec<f64> = result.values(mode, metric, f).into_iter().flatten().collect();
            if vals.is_empty() {
                return None;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            Some(CurvePoint {
                size: ((1.0 - f) * 1e12).round() / 1e12,
                mean,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect();
    pts.sort_by(|a, b| a.size.total_cmp(&b.size));
    pts
}
