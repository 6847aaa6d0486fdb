//! ICC(3,1) and MAE with per-AU and averaged reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotation::MAX_INTENSITY;
use crate::error::{validation, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Icc {
    pub value: f64,
    /// Both raters were constant; `value` is reported as 0.
    pub degenerate: bool,
}

fn sample_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Two-way mixed, single-rater, consistency ICC between labels and predictions.
///
/// With two raters the between-target mean square is half the variance of
/// the pairwise sums and the residual mean square is half the variance of
/// the pairwise differences.
pub fn icc31(labels: &[f64], preds: &[f64]) -> Result<Icc> {
    if labels.len() != preds.len() {
        return Err(validation(format!(
            "label/prediction length mismatch: {} vs {}",
            labels.len(),
            preds.len()
        )));
    }
    if labels.len() < 3 {
        return Err(validation(format!("ICC needs at least 3 targets, got {}", labels.len())));
    }
    let pairs = labels.iter().zip(preds);
    let var_sum = sample_variance(pairs.clone().map(|(a, b)| a + b));
    let var_diff = sample_variance(pairs.map(|(a, b)| a - b));
    let bms = 0.5 * var_sum;
    let ems = 0.5 * var_diff;
    if bms + ems <= 0.0 {
        return Ok(Icc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Icc {
        value: (bms - ems) / (bms + ems),
        degenerate: false,
    })
}

pub fn mae(labels: &[f64], preds: &[f64]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(validation(format!(
            "label/prediction length mismatch: {} vs {}",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(validation("MAE of an empty set"));
    }
    Ok(labels.iter().zip(preds).map(|(a, b)| (a - b).abs()).sum::<f64>() / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuScore {
    pub icc: f64,
    pub mae: f64,
    pub n: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub icc: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_au: BTreeMap<String, AuScore>,
    #[serde(rename = "avg")]
    pub averages: Averages,
    /// Number of AUs left out of the averages because their ICC was degenerate.
    #[serde(default)]
    pub excluded: usize,
}

/// Scores one AU column. Inputs are on the normalized `[0,1]` scale; MAE is
/// reported on the 0–5 scale.
pub fn score_au(labels: &[f64], preds: &[f64]) -> Result<AuScore> {
    let icc = icc31(labels, preds)?;
    let scale = f64::from(MAX_INTENSITY);
    let labels5: Vec<f64> = labels.iter().map(|v| v * scale).collect();
    let preds5: Vec<f64> = preds.iter().map(|v| v * scale).collect();
    Ok(AuScore {
        icc: icc.value,
        mae: mae(&labels5, &preds5)?,
        n: labels.len(),
        degenerate: icc.degenerate,
    })
}

/// Builds a report from per-AU (name, labels, predictions) on the `[0,1]` scale.
pub fn build_report<'a>(
    columns: impl IntoIterator<Item = (&'a str, &'a [f64], &'a [f64])>,
) -> Result<EvalReport> {
    let mut per_au = BTreeMap::new();
    for (name, labels, preds) in columns {
        per_au.insert(name.to_string(), score_au(labels, preds)?);
    }
    let included: Vec<&AuScore> = per_au.values().filter(|s| !s.degenerate).collect();
    let excluded = per_au.len() - included.len();
    let averages = if included.is_empty() {
        Averages { icc: 0.0, mae: 0.0 }
    } else {
        let k = included.len() as f64;
        Averages {
            icc: included.iter().map(|s| s.icc).sum::<f64>() / k,
            mae: included.iter().map(|s| s.mae).sum::<f64>() / k,
        }
    };
    Ok(EvalReport {
        per_au,
        averages,
        excluded,
    })
}
