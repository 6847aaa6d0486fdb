//! Naive reference implementations and fixtures shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use tas::segmentation::{Endpoint, MixupPairing, SegmentSpec, SubjectPairSet};

pub fn regression(lf: &[f64], ll: &[f64], pf: &[f64], pl: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..lf.len() {
        s += (pf[i] - lf[i]).powi(2) + (pl[i] - ll[i]).powi(2);
    }
    s
}

/// `features[seg][t][k]` → distance of frame t from frame 0.
pub fn deltas(features: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|seg| {
            seg.iter()
                .map(|f| {
                    let mut s = 0.0;
                    for k in 0..f.len() {
                        s += (f[k] - seg[0][k]).powi(2);
                    }
                    s.sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn ranking(deltas: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for d in deltas {
        for t in 0..d.len() - 1 {
            if d[t] > d[t + 1] {
                s += d[t] - d[t + 1];
            }
        }
    }
    s
}

/// Speed term for the linear model `x -> x W` with `images[seg][t][p]`,
/// `preds[seg][t][c]` and `w[p][c]`.
pub fn speed_linear(images: &[Vec<Vec<f64>>], preds: &[Vec<Vec<f64>>], w: &[Vec<f64>], pairings: &[MixupPairing]) -> f64 {
    let mut s = 0.0;
    for (seg, pairing) in pairings.iter().enumerate() {
        for (&(i, j), &lam) in pairing.pairs.iter().zip(&pairing.lambdas) {
            let p = images[seg][i].len();
            let mixed: Vec<f64> = (0..p).map(|k| lam * images[seg][i][k] + (1.0 - lam) * images[seg][j][k]).collect();
            for c in 0..w[0].len() {
                let mut out = 0.0;
                for k in 0..p {
                    out += mixed[k] * w[k][c];
                }
                let target = lam * preds[seg][i][c] + (1.0 - lam) * preds[seg][j][c];
                s += (out - target).powi(2);
            }
        }
    }
    s
}

/// `features[seg][endpoint][k]`.
pub fn subject(pairs: &SubjectPairSet, features: &[Vec<Vec<f64>>], au_count: usize) -> f64 {
    if pairs.pairs.is_empty() {
        return 0.0;
    }
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in &pairs.pairs {
        let a = &features[p.segment_a][if p.endpoint_a == Endpoint::First { 0 } else { 1 }];
        let b = &features[p.segment_b][if p.endpoint_b == Endpoint::First { 0 } else { 1 }];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        per_class.entry(p.au_class).or_default().push(1.0 - dot);
    }
    let mut s = 0.0;
    for terms in per_class.values() {
        s += terms.iter().sum::<f64>() / terms.len() as f64;
    }
    s / au_count as f64
}

/// Two-way ANOVA ICC(3,1) over `columns` raters.
pub fn anova_icc(columns: &[&[f64]]) -> f64 {
    let k = columns.len();
    let n = columns[0].len();
    let grand = columns.iter().flat_map(|c| c.iter()).sum::<f64>() / (n * k) as f64;
    let mut ss_total = 0.0;
    let mut ss_rows = 0.0;
    for i in 0..n {
        let row_mean = columns.iter().map(|c| c[i]).sum::<f64>() / k as f64;
        ss_rows += k as f64 * (row_mean - grand).powi(2);
        for c in columns {
            ss_total += (c[i] - grand).powi(2);
        }
    }
    let mut ss_cols = 0.0;
    for c in columns {
        let mean = c.iter().sum::<f64>() / n as f64;
        ss_cols += n as f64 * (mean - grand).powi(2);
    }
    let ss_err = ss_total - ss_rows - ss_cols;
    let bms = ss_rows / (n - 1) as f64;
    let ems = ss_err / ((n - 1) * (k - 1)) as f64;
    (bms - ems) / (bms + (k - 1) as f64 * ems)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn unit_rows(m: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    m.into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Segments with random AU classes, labels from a small set and three subjects.
pub fn random_segments<R: Rng>(rng: &mut R, n: usize, au_count: usize) -> Vec<SegmentSpec> {
    (0..n)
        .map(|i| SegmentSpec {
            segment_id: format!("seq/AU{i}"),
            subject_id: format!("S{}", rng.random_range(0..3)),
            sequence_id: "seq".into(),
            au_class: rng.random_range(0..au_count),
            frame_refs: Vec::new(),
            label_first: f64::from(rng.random_range(0..3u8)) / 5.0,
            label_last: f64::from(rng.random_range(0..3u8)) / 5.0,
        })
        .collect()
}

pub fn flatten3(v: &[Vec<Vec<f64>>]) -> Vec<f64> {
    v.iter().flat_map(|a| a.iter().flat_map(|b| b.iter().copied())).collect()
}
