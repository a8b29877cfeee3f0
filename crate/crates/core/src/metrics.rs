//! AUROC, accuracy, precision and sensitivity on a fixed test set.

use serde::{Deserialize, Serialize};

use crate::datapipe;
use crate::neuralnet::{Architecture, ParameterVector};
use crate::synthfundus::Dataset;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Auroc,
    Accuracy,
    Precision,
    Sensitivity,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Auroc,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Sensitivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Sensitivity => "sensitivity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Scores at or above `threshold` are predicted positive.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp + c.tn, c.total())
}

pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp)
}

pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Mann–Whitney AUROC from average ranks: ties between a positive and a
/// negative count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += rank * pos_in_group as f64;
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(())
}

/// The four metrics; `None` marks an undefined value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub n_test: usize,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion(scores, labels, threshold)?;
        let auroc = match auroc(scores, labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            auroc,
            accuracy: accuracy(&c),
            precision: precision(&c),
            sensitivity: sensitivity(&c),
            n_test: scores.len(),
        })
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Auroc => self.auroc,
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Sensitivity => self.sensitivity,
        }
    }

    pub fn set(&mut self, m: Metric, v: Option<f64>) {
        match m {
            Metric::Auroc => self.auroc = v,
            Metric::Accuracy => self.accuracy = v,
            Metric::Precision => self.precision = v,
            Metric::Sensitivity => self.sensitivity = v,
        }
    }

    pub fn undefined(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|&m| self.get(m).is_none()).collect()
    }
}

/// Positive-class scores for every item, with no stochastic augmentation.
pub fn score_dataset(arch: &Architecture, params: &ParameterVector<f32>, data: &Dataset) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let (outputs, _) = arch
        .head()
        .ok_or_else(|| Error::InvalidArgument("architecture has no head".into()))?;
    if outputs != 1 {
        return Err(Error::InvalidArgument(format!(
            "binary scoring needs a single-output head, got {outputs}"
        )));
    }
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.items.chunks(CHUNK) {
        let imgs = chunk
            .iter()
            .map(|i| datapipe::resize(i, arch.image_size))
            .collect::<Result<Vec<_>>>()?;
        let out = arch.predict(params, datapipe::to_batch(&imgs)?)?;
        scores.extend(out.data().iter().map(|&p| p as f64));
    }
    Ok(scores)
}

pub fn evaluate(
    arch: &Architecture,
    params: &ParameterVector<f32>,
    test: &Dataset,
    threshold: f64,
) -> Result<MetricsReport> {
    let counts = test.class_counts();
    if test.is_empty() || counts.contains(&0) {
        return Err(Error::InvalidArgument(
            "test set must contain both classes".into(),
        ));
    }
    let scores = score_dataset(arch, params, test)?;
    let labels: Vec<u8> = test.items.iter().map(|i| i.label as u8).collect();
    MetricsReport::from_scores(&scores, &labels, threshold)
}
