use super::{CellKey, GridEntry, MetricValues};
use crate::metrics::Metric;
use crate::trainer::InitMode;
use crate::{Error, Result};

pub const RESULTS_HEADER: &str = "run_id,init_mode,reduction_fraction,seed,train_size,auroc,accuracy,precision,sensitivity,undefined_metrics,epochs,wall_seconds,test_set_hash,source_ckpt_hash";

/// `printf("%.9g")`: nine significant digits, trailing zeros dropped,
/// exponent form outside `1e-4 ..= 1e9`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp) as usize;
    strip_zeros(&format!("{x:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value that survives a results.csv round trip.
pub fn quantize(x: f64) -> f64 {
    format_sig9(x).parse().unwrap_or(x)
}

/// One line of results.csv.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub init_mode: InitMode,
    pub reduction_fraction: f64,
    pub seed: u64,
    pub train_size: usize,
    pub metrics: MetricValues,
    pub epochs: usize,
    pub wall_seconds: f64,
    pub test_set_hash: String,
    pub source_ckpt_hash: Option<String>,
}

impl ResultRow {
    pub fn from_entry(key: &CellKey, e: &GridEntry, test_set_hash: &str) -> Self {
        Self {
            run_id: key.run_id(),
            init_mode: key.mode,
            reduction_fraction: key.fraction.value(),
            seed: key.seed,
            train_size: e.train_size,
            metrics: e.metrics,
            epochs: e.epochs,
            wall_seconds: e.wall_seconds,
            test_set_hash: test_set_hash.to_string(),
            source_ckpt_hash: e.source_ckpt_hash.clone(),
        }
    }

    pub fn to_entry(&self) -> GridEntry {
        GridEntry {
            metrics: self.metrics,
            train_size: self.train_size,
            epochs: self.epochs,
            wall_seconds: self.wall_seconds,
            source_ckpt_hash: self.source_ckpt_hash.clone(),
        }
    }

    pub fn to_csv_line(&self) -> String {
        let metric = |m: Metric| self.metrics.get(m).map(format_sig9).unwrap_or_default();
        let undefined: Vec<&str> = self.metrics.undefined().iter().map(|m| m.name()).collect();
        [
            self.run_id.clone(),
            self.init_mode.name().to_string(),
            format_sig9(self.reduction_fraction),
            self.seed.to_string(),
            self.train_size.to_string(),
            metric(Metric::Auroc),
            metric(Metric::Accuracy),
            metric(Metric::Precision),
            metric(Metric::Sensitivity),
            undefined.join(";"),
            self.epochs.to_string(),
            format_sig9(self.wall_seconds),
            self.test_set_hash.clone(),
            self.source_ckpt_hash.clone().unwrap_or_else(|| "none".into()),
        ]
        .join(",")
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::InvalidArgument(format!(
                "expected 14 fields, got {}: {line}",
                f.len()
            )));
        }
        let bad = |what: &str, v: &str| Error::InvalidArgument(format!("bad {what} {v:?}"));
        let num = |what: &str, v: &str| v.parse::<f64>().map_err(|_| bad(what, v));
        let opt = |what: &str, v: &str| -> Result<Option<f64>> {
            if v.is_empty() {
                Ok(None)
            } else {
                num(what, v).map(Some)
            }
        };
        let metrics = MetricValues {
            auroc: opt("auroc", f[5])?,
            accuracy: opt("accuracy", f[6])?,
            precision: opt("precision", f[7])?,
            sensitivity: opt("sensitivity", f[8])?,
        };
        let declared: Vec<&str> = f[9].split(';').filter(|s| !s.is_empty()).collect();
        let actual: Vec<&str> = metrics.undefined().iter().map(|m| m.name()).collect();
        if declared != actual {
            return Err(Error::InvalidArgument(format!(
                "undefined_metrics {:?} disagrees with empty cells {actual:?}",
                f[9]
            )));
        }
        Ok(Self {
            run_id: f[0].to_string(),
            init_mode: InitMode::parse(f[1]).ok_or_else(|| bad("init_mode", f[1]))?,
            reduction_fraction: num("reduction_fraction", f[2])?,
            seed: f[3].parse().map_err(|_| bad("seed", f[3]))?,
            train_size: f[4].parse().map_err(|_| bad("train_size", f[4]))?,
            metrics,
            epochs: f[10].parse().map_err(|_| bad("epochs", f[10]))?,
            wall_seconds: num("wall_seconds", f[11])?,
            test_set_hash: f[12].to_string(),
            source_ckpt_hash: (f[13] != "none").then(|| f[13].to_string()),
        })
    }
}
