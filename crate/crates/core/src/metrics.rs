//! MAE, RMSE and MAPE over multi-horizon forecasts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_MAPE_FLOOR: f64 = 1e-3;

fn check_shapes<S: Scalar>(actual: &Matrix<S>, predicted: &Matrix<S>) -> Result<()> {
    if actual.shape() != predicted.shape() {
        return Err(Error::Shape(format!(
            "actual is {:?}, predicted is {:?}",
            actual.shape(),
            predicted.shape()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Data("cannot score an empty forecast".into()));
    }
    Ok(())
}

pub fn mae<S: Scalar>(actual: &Matrix<S>, predicted: &Matrix<S>) -> Result<f64> {
    check_shapes(actual, predicted)?;
    let total: f64 = actual
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .map(|(a, p)| (a.as_f64() - p.as_f64()).abs())
        .sum();
    Ok(total / actual.len() as f64)
}

pub fn rmse<S: Scalar>(actual: &Matrix<S>, predicted: &Matrix<S>) -> Result<f64> {
    check_shapes(actual, predicted)?;
    let total: f64 = actual
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .map(|(a, p)| (a.as_f64() - p.as_f64()).powi(2))
        .sum();
    Ok((total / actual.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub percent: f64,
    /// Entries with `|actual| <= floor`, left out of the average.
    pub excluded: usize,
}

pub fn mape<S: Scalar>(actual: &Matrix<S>, predicted: &Matrix<S>, floor: f64) -> Result<Mape> {
    check_shapes(actual, predicted)?;
    let mut total = 0.0;
    let mut included = 0usize;
    for (a, p) in actual.as_slice().iter().zip(predicted.as_slice()) {
        let a = a.as_f64();
        if a.abs() > floor {
            total += (a - p.as_f64()).abs() / a.abs();
            included += 1;
        }
    }
    if included == 0 {
        return Err(Error::UndefinedMetric(format!(
            "every actual value is within {floor} of zero"
        )));
    }
    Ok(Mape {
        percent: 100.0 * total / included as f64,
        excluded: actual.len() - included,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: f64,
    #[serde(skip)]
    pub mape_excluded: usize,
}

/// How a labeled horizon aggregates steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonMode {
    /// Only the step at the labeled lead time.
    #[default]
    SingleStep,
    /// Every step up to and including the labeled lead time.
    Through,
}

/// Lead times in minutes mapped onto 1-based forecast steps.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonLabels {
    pub labels: Vec<(String, usize)>,
}

impl HorizonLabels {
    /// Labels such as `15min` for each lead time, with `timestep_minutes` per step.
    pub fn from_minutes(minutes: &[u32], timestep_minutes: f64) -> Result<Self> {
        let mut labels = Vec::with_capacity(minutes.len());
        for &m in minutes {
            let steps = f64::from(m) / timestep_minutes;
            if steps < 1.0 || (steps - steps.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{m} minutes is not a whole number of {timestep_minutes}-minute steps"
                )));
            }
            labels.push((format!("{m}min"), steps.round() as usize));
        }
        Ok(HorizonLabels { labels })
    }

    /// 15 / 30 / 60 minutes at 5-minute steps.
    pub fn standard() -> Self {
        Self::from_minutes(&[15, 30, 60], 5.0).expect("whole steps")
    }
}

/// Per-label metrics plus an all-steps aggregate under the key `all`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, HorizonMetrics)>,
}

pub const ALL_LABEL: &str = "all";

impl MetricReport {
    pub fn get(&self, label: &str) -> Option<&HorizonMetrics> {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, m)| m)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entries.iter().map(|(l, _)| l.as_str()).collect()
    }

    /// `{"15min":{"mae":…,"rmse":…,"mape_pct":…},…}`
    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .entries
            .iter()
            .map(|(l, m)| (l.clone(), serde_json::to_value(m).expect("plain floats")))
            .collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let entries = value
            .into_iter()
            .map(|(k, v)| {
                serde_json::from_value(v)
                    .map(|m| (k, m))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport { entries })
    }
}

fn stack_rows<S: Scalar>(
    matrices: &[&Matrix<S>],
    rows: impl Fn(usize) -> bool + Copy,
) -> Matrix<f64> {
    let cols = matrices[0].cols();
    let mut data = Vec::new();
    let mut count = 0;
    for m in matrices {
        for r in (0..m.rows()).filter(|&r| rows(r)) {
            data.extend(m.row(r).iter().map(|v| v.as_f64()));
            count += 1;
        }
    }
    Matrix::from_vec(count, cols, data).expect("rows share a width")
}

fn score(actual: &Matrix<f64>, predicted: &Matrix<f64>, floor: f64) -> Result<HorizonMetrics> {
    let m = mape(actual, predicted, floor)?;
    Ok(HorizonMetrics {
        mae: mae(actual, predicted)?,
        rmse: rmse(actual, predicted)?,
        mape_pct: m.percent,
        mape_excluded: m.excluded,
    })
}

/// Scores a set of `n × N` forecasts (one per sample) against their actuals.
pub fn horizon_report<S: Scalar>(
    actual: &[Matrix<S>],
    predicted: &[Matrix<S>],
    labels: &HorizonLabels,
    mode: HorizonMode,
) -> Result<MetricReport> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} actual and {} predicted samples",
            actual.len(),
            predicted.len()
        )));
    }
    let steps = actual[0].rows();
    for (a, p) in actual.iter().zip(predicted) {
        check_shapes(a, p)?;
        if a.shape() != actual[0].shape() {
            return Err(Error::Shape("samples differ in shape".into()));
        }
    }
    let a_refs: Vec<&Matrix<S>> = actual.iter().collect();
    let p_refs: Vec<&Matrix<S>> = predicted.iter().collect();
    let mut entries = Vec::with_capacity(labels.labels.len() + 1);
    for (label, step) in &labels.labels {
        if *step > steps {
            return Err(Error::Config(format!(
                "horizon {label} is step {step}, forecasts have {steps}"
            )));
        }
        let pick = |r: usize| match mode {
            HorizonMode::SingleStep => r + 1 == *step,
            HorizonMode::Through => r < *step,
        };
        let metrics = score(
            &stack_rows(&a_refs, pick),
            &stack_rows(&p_refs, pick),
            DEFAULT_MAPE_FLOOR,
        )?;
        entries.push((label.clone(), metrics));
    }
    let all = score(
        &stack_rows(&a_refs, |_| true),
        &stack_rows(&p_refs, |_| true),
        DEFAULT_MAPE_FLOOR,
    )?;
    entries.push((ALL_LABEL.to_string(), all));
    Ok(MetricReport { entries })
}

/// Fixed-width table with one row per model and MAE/RMSE/MAPE per labeled horizon.
pub fn format_table(rows: &[(String, MetricReport)], labels: &HorizonLabels) -> String {
    let mut out = format!("{:<20}", "model");
    for (label, _) in &labels.labels {
        out.push_str(&format!(
            " | {:>8} {:>8} {:>8}",
            format!("{label} MAE"),
            "RMSE",
            "MAPE"
        ));
    }
    out.push('\n');
    for (name, report) in rows {
        out.push_str(&format!("{name:<20}"));
        for (label, _) in &labels.labels {
            match report.get(label) {
                Some(m) => out.push_str(&format!(
                    " | {:>8.4} {:>8.4} {:>7.2}%",
                    m.mae, m.rmse, m.mape_pct
                )),
                None => out.push_str(&format!(" | {:>8} {:>8} {:>8}", "-", "-", "-")),
            }
        }
        out.push('\n');
    }
    out
}
