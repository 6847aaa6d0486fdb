//! Local-trend segments between adjacent keyframes, frame sampling, and the
//! pairings used by the speed and subject losses.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::annotation::{frame_path, normalize_label, KeyframeIndex, SequenceAnnotation};
use crate::error::{validation, Result};

/// Row span between two adjacent keyframes with normalized endpoint labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
    pub label_first: f64,
    pub label_last: f64,
}

pub fn build_segments(keyframes: &KeyframeIndex, ann: &SequenceAnnotation) -> Result<Vec<SegmentSpan>> {
    let c = keyframes.au_class;
    if c >= ann.au_count() {
        return Err(validation(format!("AU class {c} out of range")));
    }
    let label_at = |row: usize| -> Result<f64> {
        let v = ann
            .cells
            .get(row)
            .and_then(|r| r[c].value())
            .ok_or_else(|| validation(format!("keyframe row {row} has no label")))?;
        normalize_label(v)
    };
    keyframes
        .frame_indices
        .windows(2)
        .map(|w| {
            Ok(SegmentSpan {
                start: w[0],
                end: w[1],
                label_first: label_at(w[0])?,
                label_last: label_at(w[1])?,
            })
        })
        .collect()
}

/// `t` indices rounded from an evenly spaced grid over `start..=end`.
///
/// Short spans repeat frames. Ties round upwards.
pub fn sample_frames(start: usize, end: usize, t: usize) -> Result<Vec<usize>> {
    if t < 2 {
        return Err(validation(format!("segment length T={t} must be at least 2")));
    }
    if end < start {
        return Err(validation(format!("span end {end} precedes start {start}")));
    }
    let len = (end - start) as u128;
    let steps = (t - 1) as u128;
    Ok((0..t as u128)
        .map(|k| start + ((2 * len * k + steps) / (2 * steps)) as usize)
        .collect())
}

/// One training segment as written to the segment manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub segment_id: String,
    #[serde(rename = "subject")]
    pub subject_id: String,
    #[serde(rename = "sequence")]
    pub sequence_id: String,
    pub au_class: usize,
    #[serde(rename = "frames")]
    pub frame_refs: Vec<String>,
    pub label_first: f64,
    pub label_last: f64,
}

/// Segment specs for every AU of one sequence.
pub fn sequence_segments(
    ann: &SequenceAnnotation,
    keyframes: &[KeyframeIndex],
    t: usize,
    frames_root: &Path,
) -> Result<Vec<SegmentSpec>> {
    let mut out = Vec::new();
    for kf in keyframes {
        for (i, span) in build_segments(kf, ann)?.into_iter().enumerate() {
            let frame_refs = sample_frames(span.start, span.end, t)?
                .into_iter()
                .map(|row| {
                    frame_path(frames_root, &ann.subject_id, &ann.sequence_id, ann.frames[row])
                        .to_string_lossy()
                        .into_owned()
                })
                .collect();
            out.push(SegmentSpec {
                segment_id: format!("{}/AU{}/{i}", ann.sequence_id, kf.au_class),
                subject_id: ann.subject_id.clone(),
                sequence_id: ann.sequence_id.clone(),
                au_class: kf.au_class,
                frame_refs,
                label_first: span.label_first,
                label_last: span.label_last,
            });
        }
    }
    Ok(out)
}

/// Within-segment mixup plan: frame `pairs[k].0` is blended with `pairs[k].1`
/// using weight `lambdas[k]` on the first.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupPairing {
    pub pairs: Vec<(usize, usize)>,
    pub lambdas: Vec<f64>,
}

pub fn make_mixup_pairing<R: Rng + ?Sized>(t: usize, alpha: f64, rng: &mut R) -> Result<MixupPairing> {
    if t < 2 {
        return Err(validation(format!("segment length T={t} must be at least 2")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(validation(format!("mixup alpha {alpha} must be positive")));
    }
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(rng);
    let beta = Beta::new(alpha, alpha).map_err(|e| validation(e.to_string()))?;
    let lambdas = (0..t).map(|_| beta.sample(rng)).collect();
    Ok(MixupPairing {
        pairs: (0..t).zip(perm).collect(),
        lambdas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    First,
    Last,
}

/// Two keyframe endpoints of different segments sharing AU class and label.
/// Segment fields index into the batch the pairs were built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectPair {
    pub segment_a: usize,
    pub endpoint_a: Endpoint,
    pub segment_b: usize,
    pub endpoint_b: Endpoint,
    pub au_class: usize,
    pub shared_label: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubjectPairSet {
    pub pairs: Vec<SubjectPair>,
}

impl SubjectPairSet {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }
}

/// Groups keyframe endpoints by (AU class, label) and pairs endpoints from
/// different segments. When a group has any cross-subject pair, only
/// cross-subject pairs are kept.
pub fn find_subject_pairs(batch: &[SegmentSpec]) -> SubjectPairSet {
    let mut buckets: BTreeMap<(usize, u64), Vec<(usize, Endpoint)>> = BTreeMap::new();
    for (i, seg) in batch.iter().enumerate() {
        for (endpoint, label) in [(Endpoint::First, seg.label_first), (Endpoint::Last, seg.label_last)] {
            buckets
                .entry((seg.au_class, label.to_bits()))
                .or_default()
                .push((i, endpoint));
        }
    }

    let mut pairs = Vec::new();
    for ((au_class, bits), members) in buckets {
        let mut cross_subject = Vec::new();
        let mut same_subject = Vec::new();
        for (x, &(a, ea)) in members.iter().enumerate() {
            for &(b, eb) in &members[x + 1..] {
                if a == b {
                    continue;
                }
                let pair = SubjectPair {
                    segment_a: a,
                    endpoint_a: ea,
                    segment_b: b,
                    endpoint_b: eb,
                    au_class,
                    shared_label: f64::from_bits(bits),
                };
                if batch[a].subject_id != batch[b].subject_id {
                    cross_subject.push(pair);
                } else {
                    same_subject.push(pair);
                }
            }
        }
        pairs.extend(if cross_subject.is_empty() {
            same_subject
        } else {
            cross_subject
        });
    }
    SubjectPairSet { pairs }
}

/// Shuffles `0..n` and cuts it into batches; the last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
