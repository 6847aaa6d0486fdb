//! Deterministic synthetic video benchmark with planted AU co-occurrence and
//! subject–intensity confounds.

pub mod render;
pub mod trajectory;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{detect_keyframes, frame_path, Label, SequenceAnnotation};
use crate::error::{validation, IoContext, Result};
pub use render::{render_frame, RenderedFrame, SyntheticSubject};
pub use trajectory::{make_trajectory, quantize, CurvePlan};

pub const MANIFEST_NAME: &str = "benchmark_manifest.json";
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_sequences: usize,
    pub frame_count: usize,
    pub au_count: usize,
    /// Fraction of training sequences in which AU 0 and AU 1 share extremum timing.
    pub cooccurrence: f64,
    /// Correlation between a training subject's hue and its intensity tendency.
    pub subject_correlation: f64,
    /// Minimum number of frames between consecutive extrema.
    pub min_span: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_sequences: 4,
            frame_count: 120,
            au_count: 3,
            cooccurrence: 0.8,
            subject_correlation: 0.7,
            min_span: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 4 {
            return Err(validation(format!(
                "a subject-exclusive split needs at least 4 subjects, got {}",
                self.n_subjects
            )));
        }
        if self.n_sequences == 0 || self.au_count == 0 {
            return Err(validation("n_sequences and au_count must be positive"));
        }
        if self.min_span < 2 || self.frame_count < 2 * self.min_span + 1 {
            return Err(validation(format!(
                "{} frames cannot hold an extremum with min_span {}",
                self.frame_count, self.min_span
            )));
        }
        for (name, v) in [("cooccurrence", self.cooccurrence), ("subject_correlation", self.subject_correlation)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(validation(format!("{name} {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn au_names(&self) -> Vec<String> {
        (1..=self.au_count).map(|c| format!("AU{c}")).collect()
    }

    pub fn test_subject_count(&self) -> usize {
        self.n_subjects.div_ceil(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject: SyntheticSubject,
    pub split: Split,
    /// Subject-level intensity tendency; shifts every peak level.
    pub intensity_latent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub subject_index: usize,
    pub sequence_id: String,
    pub split: Split,
    /// AU 0 and AU 1 were planted with shared extremum timing.
    pub cooccurrence: bool,
    pub plans: Vec<CurvePlan>,
    /// Per AU, one value in `[0,1]` per frame.
    pub trajectories: Vec<Vec<f64>>,
}

impl SyntheticSequence {
    pub fn frame_count(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn intensities_at(&self, frame: usize) -> Vec<f64> {
        self.trajectories.iter().map(|t| t[frame]).collect()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.trajectories.iter().map(|t| quantize(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: SynthConfig,
    pub seed: u64,
    pub subjects: Vec<SubjectRecord>,
    pub sequences: Vec<SyntheticSequence>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn plan_curve(
    cfg: &SynthConfig,
    latent: f64,
    timing: Option<(&[usize], bool)>,
    rng: &mut ChaCha8Rng,
) -> Result<(CurvePlan, Vec<f64>)> {
    for _ in 0..MAX_ATTEMPTS {
        let (frames, rises) = match timing {
            Some((f, r)) => (f.to_vec(), r),
            None => {
                let interior = trajectory::draw_interior_count(rng)
                    .min((cfg.frame_count - 1) / cfg.min_span - 1)
                    .max(1);
                (trajectory::plan_timing(cfg.frame_count, interior, cfg.min_span, rng)?, rng.random_bool(0.5))
            }
        };
        let mut peak = |r: &mut ChaCha8Rng| (3.5 + 1.2 * latent + 0.6 * normal(r)).round().clamp(2.0, 5.0) as u8;
        let levels = trajectory::plan_levels(frames.len(), rises, &mut peak, rng);
        let plan = CurvePlan { frames, levels };
        if let Some(curve) = trajectory::realize(&plan, cfg.frame_count)? {
            return Ok((plan, curve));
        }
    }
    Err(validation("could not plant a trajectory with recoverable extrema"))
}

/// Draws subjects, the split, and every trajectory. Rendering is separate.
pub fn generate_benchmark(cfg: &SynthConfig, seed: u64) -> Result<Benchmark> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, 0);

    let mut order: Vec<usize> = (0..cfg.n_subjects).collect();
    order.shuffle(&mut rng);
    let test: Vec<usize> = order[..cfg.test_subject_count()].to_vec();
    let rho = cfg.subject_correlation;
    let subjects: Vec<SubjectRecord> = (0..cfg.n_subjects)
        .map(|i| {
            let split = if test.contains(&i) { Split::Test } else { Split::Train };
            let latent = normal(&mut rng);
            let noise = normal(&mut rng);
            // Hue tracks the intensity tendency only for training subjects.
            let hue_latent = match split {
                Split::Train => rho * latent + (1.0 - rho * rho).sqrt() * noise,
                Split::Test => noise,
            };
            SubjectRecord {
                subject: SyntheticSubject {
                    subject_id: format!("S{:02}", i + 1),
                    scale: 0.92 + 0.16 * rng.random::<f64>(),
                    hue: 0.01 + 0.14 * logistic(1.5 * hue_latent),
                    texture_seed: rng.random(),
                    background_seed: rng.random(),
                },
                split,
                intensity_latent: latent,
            }
        })
        .collect();

    let slots: Vec<(usize, usize)> = (0..cfg.n_subjects)
        .flat_map(|s| (0..cfg.n_sequences).map(move |q| (s, q)))
        .collect();
    let mut train_slots: Vec<usize> = (0..slots.len())
        .filter(|&k| subjects[slots[k].0].split == Split::Train)
        .collect();
    train_slots.shuffle(&mut rng);
    let planted_count = (cfg.cooccurrence * train_slots.len() as f64).round() as usize;
    let planted = if cfg.au_count >= 2 { &train_slots[..planted_count] } else { &[][..] };

    let sequences = slots
        .iter()
        .enumerate()
        .map(|(k, &(s, q))| {
            let mut rng = derived_rng(seed, k as u64 + 1);
            let record = &subjects[s];
            let cooccurrence = planted.contains(&k);
            let mut plans = Vec::with_capacity(cfg.au_count);
            let mut trajectories = Vec::with_capacity(cfg.au_count);
            for c in 0..cfg.au_count {
                let shared = if c == 1 && cooccurrence {
                    let p0: &CurvePlan = &plans[0];
                    Some((p0.frames.as_slice(), p0.rises_first()))
                } else {
                    None
                };
                let (plan, curve) = plan_curve(cfg, record.intensity_latent, shared, &mut rng)?;
                plans.push(plan);
                trajectories.push(curve);
            }
            Ok(SyntheticSequence {
                subject_index: s,
                sequence_id: format!("{}_T{}", record.subject.subject_id, q + 1),
                split: record.split,
                cooccurrence,
                plans,
                trajectories,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Benchmark {
        config: cfg.clone(),
        seed,
        subjects,
        sequences,
    })
}

impl Benchmark {
    pub fn subject(&self, seq: &SyntheticSequence) -> &SyntheticSubject {
        &self.subjects[seq.subject_index].subject
    }

    /// Fully labelled table of one sequence.
    pub fn dense_annotation(&self, seq: &SyntheticSequence) -> Result<SequenceAnnotation> {
        let labels = seq.labels();
        let cells = (0..seq.frame_count())
            .map(|f| labels.iter().map(|l| Label::Value(l[f])).collect())
            .collect();
        SequenceAnnotation::new(
            self.subject(seq).subject_id.clone(),
            seq.sequence_id.clone(),
            self.config.au_names(),
            (0..seq.frame_count() as u32).collect(),
            cells,
        )
    }

    /// Table with labels only at each AU's detected keyframes.
    pub fn keyframe_annotation(&self, seq: &SyntheticSequence) -> Result<SequenceAnnotation> {
        let labels = seq.labels();
        let mut cells = vec![vec![Label::Unannotated; labels.len()]; seq.frame_count()];
        for (c, l) in labels.iter().enumerate() {
            for f in detect_keyframes(c, l)?.frame_indices {
                cells[f][c] = Label::Value(l[f]);
            }
        }
        SequenceAnnotation::new(
            self.subject(seq).subject_id.clone(),
            seq.sequence_id.clone(),
            self.config.au_names(),
            (0..seq.frame_count() as u32).collect(),
            cells,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub subject: String,
    pub sequence: String,
    pub split: Split,
    pub cooccurrence: bool,
    /// Per AU, the planted extremum frames including both endpoints.
    pub extrema: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub au_names: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
    pub sequences: Vec<SequenceRecord>,
    /// Relative path → SHA-256 of every emitted file.
    pub files: BTreeMap<String, String>,
}

fn write_hashed(root: &Path, rel: &str, bytes: &[u8]) -> Result<(String, String)> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&path, bytes).io_context(|| format!("writing {}", path.display()))?;
    Ok((rel.to_string(), hex::encode(Sha256::digest(bytes))))
}

fn encode_png(frame: &RenderedFrame) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    frame.image.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes annotations, rendered frames and the manifest under `out`:
///
/// - `train/annotations/*.csv` keyframe-only tables
/// - `train/ground_truth/*.csv` dense tables for the same sequences
/// - `test/annotations/*.csv` dense tables
/// - `frames/<subject>/<sequence>/<frame:06>.png`
pub fn write_benchmark(bench: &Benchmark, out: &Path) -> Result<BenchmarkManifest> {
    let per_sequence: Vec<Vec<(String, String)>> = bench
        .sequences
        .par_iter()
        .map(|seq| {
            let mut files = Vec::new();
            let dense = bench.dense_annotation(seq)?;
            let name = format!("{}.csv", seq.sequence_id);
            match seq.split {
                Split::Train => {
                    let sparse = bench.keyframe_annotation(seq)?;
                    files.push(write_hashed(out, &format!("train/annotations/{name}"), sparse.to_csv_string().as_bytes())?);
                    files.push(write_hashed(out, &format!("train/ground_truth/{name}"), dense.to_csv_string().as_bytes())?);
                }
                Split::Test => {
                    files.push(write_hashed(out, &format!("test/annotations/{name}"), dense.to_csv_string().as_bytes())?);
                }
            }
            let subject = bench.subject(seq);
            for f in 0..seq.frame_count() {
                let frame = render_frame(subject, &seq.intensities_at(f))?;
                let rel = frame_path(Path::new("frames"), &subject.subject_id, &seq.sequence_id, f as u32);
                files.push(write_hashed(out, &rel.to_string_lossy(), &encode_png(&frame)?)?);
            }
            Ok(files)
        })
        .collect::<Result<_>>()?;

    let manifest = BenchmarkManifest {
        seed: bench.seed,
        config: bench.config.clone(),
        au_names: bench.config.au_names(),
        subjects: bench.subjects.clone(),
        sequences: bench
            .sequences
            .iter()
            .map(|s| SequenceRecord {
                subject: bench.subject(s).subject_id.clone(),
                sequence: s.sequence_id.clone(),
                split: s.split,
                cooccurrence: s.cooccurrence,
                extrema: s.plans.iter().map(|p| p.frames.clone()).collect(),
            })
            .collect(),
        files: per_sequence.into_iter().flatten().collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join(MANIFEST_NAME), text).io_context(|| format!("writing manifest in {}", out.display()))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<BenchmarkManifest> {
    let path = root.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).io_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{annotation_budget, resolve_keyframes};

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 4,
            n_sequences: 2,
            frame_count: 60,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_is_subject_exclusive() {
        let b = generate_benchmark(&SynthConfig::default(), 5).unwrap();
        let test: Vec<_> = b.subjects.iter().filter(|s| s.split == Split::Test).collect();
        assert_eq!(test.len(), 3);
        for seq in &b.sequences {
            assert_eq!(seq.split, b.subjects[seq.subject_index].split);
        }
        assert!(generate_benchmark(&SynthConfig { n_subjects: 3, ..small() }, 1).is_err());
    }

    #[test]
    fn same_seed_same_trajectories() {
        let a = generate_benchmark(&SynthConfig::default(), 9).unwrap();
        let b = generate_benchmark(&SynthConfig::default(), 9).unwrap();
        let c = generate_benchmark(&SynthConfig::default(), 10).unwrap();
        let traj = |x: &Benchmark| x.sequences.iter().map(|s| s.trajectories.clone()).collect::<Vec<_>>();
        assert_eq!(traj(&a), traj(&b));
        assert_ne!(traj(&a), traj(&c));
    }

    #[test]
    fn planted_extrema_are_recovered_and_keyframes_are_honest() {
        let b = generate_benchmark(&SynthConfig::default(), 2).unwrap();
        for seq in &b.sequences {
            let dense = b.dense_annotation(seq).unwrap();
            let sparse = b.keyframe_annotation(seq).unwrap();
            let mut keyframes = Vec::new();
            for c in 0..3 {
                let kf = resolve_keyframes(&dense, c).unwrap();
                assert_eq!(kf.frame_indices, seq.plans[c].frames);
                let sparse_kf = resolve_keyframes(&sparse, c).unwrap();
                assert_eq!(sparse_kf.frame_indices, kf.frame_indices);
                for (row, cells) in sparse.cells.iter().enumerate() {
                    if let Label::Value(v) = cells[c] {
                        assert_eq!(dense.cells[row][c], Label::Value(v));
                    }
                }
                keyframes.push(sparse_kf);
            }
            assert!(annotation_budget(&sparse, &keyframes).unwrap() < 0.05);
        }
    }

    #[test]
    fn cooccurrence_fraction_is_planted() {
        let cfg = SynthConfig {
            cooccurrence: 0.9,
            ..SynthConfig::default()
        };
        let b = generate_benchmark(&cfg, 4).unwrap();
        let train: Vec<_> = b.sequences.iter().filter(|s| s.split == Split::Train).collect();
        let agree = train
            .iter()
            .filter(|s| {
                let sparse = b.keyframe_annotation(s).unwrap();
                resolve_keyframes(&sparse, 0).unwrap().frame_indices == resolve_keyframes(&sparse, 1).unwrap().frame_indices
            })
            .count();
        assert!(agree as f64 / train.len() as f64 >= 0.85);
        assert!(b.sequences.iter().filter(|s| s.split == Split::Test).all(|s| !s.cooccurrence));
    }

    #[test]
    fn written_tree_is_reproducible() {
        let cfg = small();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = write_benchmark(&generate_benchmark(&cfg, 3).unwrap(), d1.path()).unwrap();
        let m2 = write_benchmark(&generate_benchmark(&cfg, 3).unwrap(), d2.path()).unwrap();
        assert_eq!(m1.files, m2.files);
        assert_eq!(m1.files.len(), 4 * 2 * 60 + 2 * 2 * 2 + 2 * 2);
        let back = read_manifest(d1.path()).unwrap();
        assert_eq!(back, m1);
        for (rel, hash) in &m1.files {
            let bytes = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(&hex::encode(Sha256::digest(&bytes)), hash);
        }
    }
}
