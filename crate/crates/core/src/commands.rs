//! Implementations behind the command-line verbs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    annotation_budget, load_annotation_dir, parse_annotation_table, resolve_keyframes, KeyframeManifest, Label,
    SequenceAnnotation, MAX_INTENSITY,
};
use crate::config::TasConfig;
use crate::data::{load_batch, FrameStore};
use crate::error::{validation, IoContext, Result};
use crate::metrics::EvalReport;
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::TasModel;
use crate::segmentation::sequence_segments;
use crate::synth::{generate_benchmark, write_benchmark, BenchmarkManifest};
use crate::train::{evaluate, sequence_frame_paths, train, FramePredictor, ModelPredictor, SegmentManifest, TrainOutcome};

pub const KEYFRAMES_FILE: &str = "keyframes.json";
pub const SEGMENTS_FILE: &str = "segments.json";
pub const PREPARE_SUMMARY_FILE: &str = "prepare_summary.json";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const FEATURES_FILE: &str = "features.npy";
pub const FEATURE_INDEX_FILE: &str = "features_index.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).io_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub au_names: Vec<String>,
    pub sequences: usize,
    pub keyframes: usize,
    pub segments: usize,
    /// Annotated keyframe cells over all frame × AU cells.
    pub annotation_budget: f64,
}

/// Keyframe and segment manifests for every annotation table in `annotations`.
pub fn cmd_prepare(annotations: &Path, frames_root: &Path, out: &Path, cfg: &TasConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let sequences = load_annotation_dir(annotations)?;
    let au_names = sequences[0].au_names.clone();
    let mut keyframe_manifests = Vec::new();
    let mut segments = Vec::new();
    let (mut used, mut cells) = (0usize, 0usize);
    for ann in &sequences {
        if ann.au_names != au_names {
            return Err(validation(format!(
                "{}: AU columns {:?} differ from {:?}",
                ann.sequence_id, ann.au_names, au_names
            )));
        }
        let keyframes = (0..ann.au_count())
            .map(|c| resolve_keyframes(ann, c))
            .collect::<Result<Vec<_>>>()?;
        let budget = annotation_budget(ann, &keyframes)?;
        log::debug!("{}: budget {:.4}", ann.sequence_id, budget);
        used += keyframes.iter().map(|k| k.len()).sum::<usize>();
        cells += ann.frame_count() * ann.au_count();
        for kf in &keyframes {
            keyframe_manifests.push(KeyframeManifest::from_index(ann, kf)?);
        }
        segments.extend(sequence_segments(ann, &keyframes, cfg.segment_length, frames_root)?);
    }

    create_dir(out)?;
    let summary = PrepareSummary {
        au_names: au_names.clone(),
        sequences: sequences.len(),
        keyframes: used,
        segments: segments.len(),
        annotation_budget: used as f64 / cells as f64,
    };
    write_json(&out.join(KEYFRAMES_FILE), &keyframe_manifests)?;
    write_json(
        &out.join(SEGMENTS_FILE),
        &SegmentManifest {
            au_names,
            segment_length: cfg.segment_length,
            segments,
        },
    )?;
    write_json(&out.join(PREPARE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Trains on a segment manifest and writes the best checkpoint and the log.
pub fn cmd_train(segments: &Path, out: &Path, cfg: &TasConfig) -> Result<TrainOutcome> {
    let manifest = SegmentManifest::load(segments)?;
    let input_size = cfg.model_config(manifest.au_names.len()).input_size;
    let store = FrameStore::preload(
        manifest
            .segments
            .iter()
            .flat_map(|s| s.frame_refs.iter().map(String::as_str)),
        input_size,
    )?;
    log::info!("loaded {} frames for {} segments", store.len(), manifest.segments.len());

    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path).io_context(|| format!("creating {}", log_path.display()))?);
    let outcome = train(cfg, &manifest, &store, |record| {
        serde_json::to_writer(&mut log_file, record)?;
        writeln!(log_file).and_then(|_| log_file.flush()).io_context(|| format!("writing {}", log_path.display()))
    })?;

    let run = serde_json::json!({
        "config": cfg,
        "best_epoch": outcome.best_epoch,
        "best_val_icc": outcome.best_val_icc,
    });
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.model, &manifest.au_names, run)?;
    Ok(outcome)
}

/// Evaluates a checkpoint on densely labelled sequences and writes the report.
pub fn cmd_eval(checkpoint: &Path, annotations: &Path, frames_root: &Path, out: &Path, cfg: &TasConfig) -> Result<EvalReport> {
    let sequences = load_annotation_dir(annotations)?;
    let (model, _) = load_checkpoint(checkpoint, Some(&sequences[0].au_names))?;
    let predictor = ModelPredictor {
        model: &model,
        batch: cfg.eval_batch_size,
    };
    let report = evaluate(&predictor, &sequences, frames_root)?;
    create_dir(out)?;
    write_json(&out.join(EVAL_REPORT_FILE), &report)?;
    Ok(report)
}

/// Resolves an AU given as a column name (`AU12`) or a class index.
pub fn resolve_au(au: &str, au_names: &[String]) -> Result<usize> {
    if let Some(i) = au_names.iter().position(|n| n == au) {
        return Ok(i);
    }
    match au.parse::<usize>() {
        Ok(i) if i < au_names.len() => Ok(i),
        _ => Err(validation(format!("unknown AU `{au}`; available: {}", au_names.join(", ")))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCurve {
    pub frames: Vec<u32>,
    pub predicted: Vec<f64>,
    /// Normalized label where the table has one.
    pub ground_truth: Vec<Option<f64>>,
}

/// Predicted and labelled intensity of one AU over a sequence, written as
/// `<sequence>_<AU>.csv` and `<sequence>_<AU>.png` in `out`.
pub fn plot_trends(
    predictor: &dyn FramePredictor,
    ann: &SequenceAnnotation,
    au_class: usize,
    frames_root: &Path,
    out: &Path,
) -> Result<TrendCurve> {
    if au_class >= ann.au_count() || au_class >= predictor.au_count() {
        return Err(validation(format!("AU class {au_class} out of range")));
    }
    let rows = predictor.predict(&sequence_frame_paths(ann, frames_root))?;
    let scale = f64::from(MAX_INTENSITY);
    let curve = TrendCurve {
        frames: ann.frames.clone(),
        predicted: rows.iter().map(|r| r[au_class]).collect(),
        ground_truth: ann
            .cells
            .iter()
            .map(|row| match row[au_class] {
                Label::Value(v) => Some(f64::from(v) / scale),
                Label::Unannotated => None,
            })
            .collect(),
    };

    create_dir(out)?;
    let stem = format!("{}_{}", ann.sequence_id, ann.au_names[au_class]);
    let mut csv = String::from("frame,predicted,ground_truth\n");
    for ((f, p), g) in curve.frames.iter().zip(&curve.predicted).zip(&curve.ground_truth) {
        let g = g.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{f},{p},{g}\n"));
    }
    let csv_path = out.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv).io_context(|| format!("writing {}", csv_path.display()))?;
    draw_chart(&curve).save(out.join(format!("{stem}.png")))?;
    Ok(curve)
}

const CHART_W: u32 = 640;
const CHART_H: u32 = 320;
const MARGIN: u32 = 24;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart over `[0,1]`: labels in grey, predictions in blue.
fn draw_chart(curve: &TrendCurve) -> RgbImage {
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    let (left, right) = (MARGIN as f64, (CHART_W - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (CHART_H - MARGIN) as f64);
    let n = curve.frames.len().max(2);
    let point = |i: usize, v: f64| {
        let x = left + (right - left) * i as f64 / (n - 1) as f64;
        let y = bottom - (bottom - top) * v.clamp(0.0, 1.0);
        (x.round() as i64, y.round() as i64)
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, point(0, 0.0), point(n - 1, 0.0), axis);
    draw_line(&mut img, point(0, 0.0), point(0, 1.0), axis);
    for level in 1..=MAX_INTENSITY {
        let v = f64::from(level) / f64::from(MAX_INTENSITY);
        let (x, y) = point(0, v);
        draw_line(&mut img, (x - 4, y), (x, y), axis);
    }
    for w in 1..curve.ground_truth.len() {
        if let (Some(a), Some(b)) = (curve.ground_truth[w - 1], curve.ground_truth[w]) {
            draw_line(&mut img, point(w - 1, a), point(w, b), Rgb([150, 150, 150]));
        }
    }
    for w in 1..curve.predicted.len() {
        draw_line(&mut img, point(w - 1, curve.predicted[w - 1]), point(w, curve.predicted[w]), Rgb([30, 90, 220]));
    }
    img
}

pub fn cmd_plot_trends(
    checkpoint: &Path,
    annotation: &Path,
    au: &str,
    frames_root: &Path,
    out: &Path,
    cfg: &TasConfig,
) -> Result<TrendCurve> {
    let ann = parse_annotation_table(annotation)?;
    let (model, header) = load_checkpoint(checkpoint, Some(&ann.au_names))?;
    let au_class = resolve_au(au, &header.au_names)?;
    let predictor = ModelPredictor {
        model: &model,
        batch: cfg.eval_batch_size,
    };
    plot_trends(&predictor, &ann, au_class, frames_root, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExport {
    pub rows: usize,
    pub cols: usize,
}

/// Writes a `(frames, C*d)` f32 matrix of AU features and a CSV index of its rows.
pub fn export_features(
    model: &TasModel,
    sequences: &[SequenceAnnotation],
    frames_root: &Path,
    out: &Path,
    batch: usize,
) -> Result<FeatureExport> {
    create_dir(out)?;
    let size = model.config().input_size;
    let mut blocks = Vec::new();
    let mut index = String::from("row,subject,sequence,frame,path\n");
    let mut row = 0usize;
    for ann in sequences {
        let paths = sequence_frame_paths(ann, frames_root);
        for (chunk, frames) in paths.chunks(batch.max(1)).zip(ann.frames.chunks(batch.max(1))) {
            let images = load_batch(chunk, size, model.device())?;
            let feats = model.forward(&images)?.features.flatten_from(1)?;
            blocks.push(feats);
            for (p, f) in chunk.iter().zip(frames) {
                index.push_str(&format!("{row},{},{},{f},{}\n", ann.subject_id, ann.sequence_id, p.display()));
                row += 1;
            }
        }
    }
    if blocks.is_empty() {
        return Err(validation("no frames to export"));
    }
    let matrix = Tensor::cat(&blocks, 0)?;
    let (rows, cols) = matrix.dims2()?;
    matrix.write_npy(out.join(FEATURES_FILE))?;
    let index_path = out.join(FEATURE_INDEX_FILE);
    std::fs::write(&index_path, index).io_context(|| format!("writing {}", index_path.display()))?;
    Ok(FeatureExport { rows, cols })
}

pub fn cmd_export_features(
    checkpoint: &Path,
    annotations: &Path,
    frames_root: &Path,
    out: &Path,
    cfg: &TasConfig,
) -> Result<FeatureExport> {
    let sequences = load_annotation_dir(annotations)?;
    let (model, _) = load_checkpoint(checkpoint, Some(&sequences[0].au_names))?;
    export_features(&model, &sequences, frames_root, out, cfg.eval_batch_size)
}

pub fn cmd_make_synth(out: &Path, cfg: &TasConfig) -> Result<BenchmarkManifest> {
    let bench = generate_benchmark(&cfg.synth_config(), cfg.seed)?;
    create_dir(out)?;
    write_benchmark(&bench, out)
}

/// Reads a feature matrix written by `export_features`.
pub fn read_features(dir: &Path) -> Result<Tensor> {
    Ok(Tensor::read_npy(dir.join(FEATURES_FILE))?.to_device(&Device::Cpu)?)
}

/// Default location of frames for a benchmark written by `make-synth`.
pub fn synth_frames_dir(root: &Path) -> PathBuf {
    root.join("frames")
}
