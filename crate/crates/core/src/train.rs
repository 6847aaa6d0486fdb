//! Training loop, early stopping, and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{frame_path, normalize_label, Label, SequenceAnnotation};
use crate::config::TasConfig;
use crate::data::{load_batch, FrameStore};
use crate::error::{validation, IoContext, Result, TasError};
use crate::losses::{
    feature_deltas, ranking_loss, regression_loss, scalar_value, speed_loss, subject_loss, total_loss,
};
use crate::metrics::{build_report, icc31, EvalReport};
use crate::model::{ModelConfig, TasModel};
use crate::segmentation::{epoch_batches, find_subject_pairs, make_mixup_pairing, SegmentSpec};

/// Training input produced by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentManifest {
    pub au_names: Vec<String>,
    pub segment_length: usize,
    pub segments: Vec<SegmentSpec>,
}

impl SegmentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if s.au_class >= self.au_names.len() {
                return Err(validation(format!("segment {} has AU class {} out of range", s.segment_id, s.au_class)));
            }
            if s.frame_refs.len() != self.segment_length {
                return Err(validation(format!(
                    "segment {} has {} frames, manifest declares {}",
                    s.segment_id,
                    s.frame_refs.len(),
                    self.segment_length
                )));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_reg: f64,
    pub l_rank: f64,
    pub l_spd: f64,
    pub l_sub: f64,
    pub l_total: f64,
    pub val_icc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TasModel,
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_icc: Option<f64>,
}

/// Validation targets: keyframe frames with their labels, grouped by AU.
#[derive(Debug, Clone, Default)]
struct ValidationSet {
    frames: Vec<String>,
    /// Per frame, (AU class, normalized label).
    targets: Vec<Vec<(usize, f64)>>,
}

impl ValidationSet {
    fn from_segments(segments: &[&SegmentSpec]) -> Self {
        let mut by_frame: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
        for s in segments {
            let (Some(first), Some(last)) = (s.frame_refs.first(), s.frame_refs.last()) else { continue };
            by_frame.entry(first).or_default().insert(s.au_class, s.label_first);
            by_frame.entry(last).or_default().insert(s.au_class, s.label_last);
        }
        let mut out = Self::default();
        for (frame, labels) in by_frame {
            out.frames.push(frame.to_string());
            out.targets.push(labels.into_iter().collect());
        }
        out
    }

    /// Mean ICC over AUs with at least three non-degenerate targets.
    fn score(&self, model: &TasModel, store: &FrameStore, batch: usize) -> Result<Option<f64>> {
        if self.frames.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&str> = self.frames.iter().map(String::as_str).collect();
        let preds = predict_cached(model, store, &refs, batch)?;
        let mut columns: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (row, targets) in preds.iter().zip(&self.targets) {
            for &(c, label) in targets {
                let col = columns.entry(c).or_default();
                col.0.push(label);
                col.1.push(row[c]);
            }
        }
        let scores: Vec<f64> = columns
            .values()
            .filter(|(l, _)| l.len() >= 3)
            .filter_map(|(l, p)| icc31(l, p).ok().filter(|i| !i.degenerate).map(|i| i.value))
            .collect();
        Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

fn predict_cached(model: &TasModel, store: &FrameStore, frames: &[&str], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch.max(1)) {
        let images = store.batch(chunk, model.device())?;
        out.extend(intensity_rows(&model.forward(&images)?.intensities)?);
    }
    Ok(out)
}

fn intensity_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
}

struct Sgd {
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    velocity: HashMap<candle_core::TensorId, Tensor>,
}

impl Sgd {
    fn step(&mut self, vars: &[Var], grads: &candle_core::backprop::GradStore) -> Result<()> {
        for var in vars {
            let Some(g) = grads.get(var) else { continue };
            let w = var.as_tensor().detach();
            let mut g = (g.detach() + (&w * self.weight_decay)?)?;
            if self.momentum > 0.0 {
                let v = match self.velocity.get(&var.id()) {
                    Some(prev) => ((prev * self.momentum)? + &g)?,
                    None => g.clone(),
                };
                self.velocity.insert(var.id(), v.clone());
                g = v;
            }
            var.set(&(w - (g * self.lr)?)?)?;
        }
        Ok(())
    }
}

/// Builds the initial model: seeded initialization, optionally overlaid with
/// pretrained backbone tensors.
pub fn initial_model(cfg: &TasConfig, model_cfg: ModelConfig) -> Result<TasModel> {
    let model = TasModel::new(model_cfg.clone(), cfg.seed)?;
    let Some(path) = &cfg.pretrained_backbone else { return Ok(model) };
    let pretrained = candle_core::safetensors::load(path, &Device::Cpu)?;
    let mut tensors: HashMap<String, Tensor> = model.named_tensors().into_iter().collect();
    for (name, t) in pretrained {
        if !name.starts_with("backbone.") {
            continue;
        }
        match tensors.get(&name) {
            Some(existing) if existing.dims() == t.dims() => {
                tensors.insert(name, t);
            }
            Some(existing) => {
                return Err(TasError::Checkpoint(format!(
                    "pretrained tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    existing.dims()
                )))
            }
            None => return Err(TasError::Checkpoint(format!("pretrained tensor `{name}` is not part of the backbone"))),
        }
    }
    TasModel::from_tensors(model_cfg, &tensors)
}

fn snapshot(model: &TasModel) -> Result<HashMap<String, Tensor>> {
    model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| Ok((n, t.copy()?)))
        .collect()
}

fn check_finite(value: f64, term: &'static str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TasError::NonFiniteLoss { term, epoch, batch })
    }
}

/// Per-segment selection indices into a `(N*T, C)` layout.
fn class_indices(batch: &[&SegmentSpec], t: usize, c: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..t).map(move |k| ((i * t + k) * c + s.au_class) as u32))
        .collect();
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, device)?)
}

/// Trains on `manifest`, calling `on_epoch` after each epoch.
pub fn train(
    cfg: &TasConfig,
    manifest: &SegmentManifest,
    store: &FrameStore,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    manifest.validate()?;
    if manifest.segments.is_empty() {
        return Err(validation("no training segments"));
    }
    let au_count = manifest.au_names.len();
    let t = manifest.segment_length;
    let weights = cfg.loss_weights();
    let model = initial_model(cfg, cfg.model_config(au_count))?;
    let device = model.device().clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..manifest.segments.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if manifest.segments.len() > 1 {
        ((cfg.val_fraction * manifest.segments.len() as f64).round() as usize).min(manifest.segments.len() - 1)
    } else {
        0
    };
    let val_segments: Vec<&SegmentSpec> = order[..n_val].iter().map(|&i| &manifest.segments[i]).collect();
    let mut train_ids: Vec<usize> = order[n_val..].to_vec();
    train_ids.sort_unstable();
    let train_segments: Vec<&SegmentSpec> = train_ids.iter().map(|&i| &manifest.segments[i]).collect();
    let validation_set = ValidationSet::from_segments(&val_segments);

    let mut sgd = Sgd {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        momentum: cfg.momentum,
        velocity: HashMap::new(),
    };
    let vars = model.trainable_vars();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, HashMap<String, Tensor>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 5];
        let batches = epoch_batches(train_segments.len(), cfg.batch_size, &mut rng);
        for (b, ids) in batches.iter().enumerate() {
            let batch: Vec<&SegmentSpec> = ids.iter().map(|&i| train_segments[i]).collect();
            let n = batch.len();
            let refs: Vec<&str> = batch.iter().flat_map(|s| s.frame_refs.iter().map(String::as_str)).collect();
            let images = store.batch(&refs, &device)?;
            let out = model.forward_t(&images, true)?;
            let (_, c, d) = out.features.dims3()?;
            let sel = class_indices(&batch, t, c, &device)?;
            let preds = out.intensities.flatten_all()?.index_select(&sel, 0)?.reshape((n, t))?;
            let feats = out.features.reshape((n * t * c, d))?.index_select(&sel, 0)?.reshape((n, t, d))?;

            let labels = |f: fn(&SegmentSpec) -> f64| -> Result<Tensor> {
                let v: Vec<f32> = batch.iter().map(|s| f(s) as f32).collect();
                Ok(Tensor::from_vec(v, n, &device)?)
            };
            let l_reg = regression_loss(
                &labels(|s| s.label_first)?,
                &labels(|s| s.label_last)?,
                &preds.narrow(1, 0, 1)?.squeeze(1)?,
                &preds.narrow(1, t - 1, 1)?.squeeze(1)?,
            )?;
            let zero = Tensor::zeros((), l_reg.dtype(), &device)?;
            let l_rank = if cfg.use_rank {
                ranking_loss(&feature_deltas(&feats)?)?
            } else {
                zero.clone()
            };
            let l_spd = if cfg.use_spd {
                let pairings = (0..n)
                    .map(|_| make_mixup_pairing(t, cfg.alpha, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let all_preds = out.intensities.reshape((n, t, c))?;
                let frames = images.reshape((n, t, 3, images.dim(2)?, images.dim(3)?))?;
                speed_loss(|mixed| Ok(model.forward_t(mixed, true)?.intensities), &frames, &all_preds, &pairings)?
            } else {
                zero.clone()
            };
            let l_sub = if cfg.use_sub {
                let pairs = find_subject_pairs(&batch.iter().map(|s| (*s).clone()).collect::<Vec<_>>());
                let ends = Tensor::cat(&[feats.narrow(1, 0, 1)?, feats.narrow(1, t - 1, 1)?], 1)?;
                subject_loss(&pairs, &ends, au_count)?
            } else {
                zero.clone()
            };
            let total = total_loss(&l_reg, &l_rank, &l_spd, &l_sub, &weights)?;

            let values = [
                check_finite(scalar_value(&l_reg)?, "regression", epoch, b)?,
                check_finite(scalar_value(&l_rank)?, "ranking", epoch, b)?,
                check_finite(scalar_value(&l_spd)?, "speed", epoch, b)?,
                check_finite(scalar_value(&l_sub)?, "subject", epoch, b)?,
                check_finite(scalar_value(&total)?, "total", epoch, b)?,
            ];
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            let grads = total.backward()?;
            sgd.step(&vars, &grads)?;
        }

        let nb = batches.len().max(1) as f64;
        let val_icc = validation_set.score(&model, store, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            l_reg: sums[0] / nb,
            l_rank: sums[1] / nb,
            l_spd: sums[2] / nb,
            l_sub: sums[3] / nb,
            l_total: sums[4] / nb,
            val_icc,
        };
        log::info!(
            "epoch {epoch}: total {:.5} (reg {:.5}, rank {:.5}, spd {:.5}, sub {:.5}) val ICC {:?}",
            record.l_total,
            record.l_reg,
            record.l_rank,
            record.l_spd,
            record.l_sub,
            record.val_icc
        );
        on_epoch(&record)?;
        log.push(record);

        match val_icc {
            Some(v) if best.as_ref().is_none_or(|(b, _, _)| v > *b) => {
                best = Some((v, epoch, snapshot(&model)?));
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
            None => {}
        }
    }

    let last_epoch = log.len();
    let (model, best_epoch, best_val_icc) = match best {
        Some((v, e, tensors)) => (TasModel::from_tensors(model.config().clone(), &tensors)?, e, Some(v)),
        None => (model, last_epoch, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_icc,
    })
}

/// Anything that maps frame images on disk to per-AU intensities in `[0,1]`.
pub trait FramePredictor {
    fn au_count(&self) -> usize;
    /// One row of `au_count` values per path.
    fn predict(&self, paths: &[PathBuf]) -> Result<Vec<Vec<f64>>>;
}

/// Single-image inference with a trained model, in chunks of `batch` frames.
pub struct ModelPredictor<'a> {
    pub model: &'a TasModel,
    pub batch: usize,
}

impl FramePredictor for ModelPredictor<'_> {
    fn au_count(&self) -> usize {
        self.model.config().au_count
    }

    fn predict(&self, paths: &[PathBuf]) -> Result<Vec<Vec<f64>>> {
        let size = self.model.config().input_size;
        let mut out = Vec::with_capacity(paths.len());
        for chunk in paths.chunks(self.batch.max(1)) {
            let images = load_batch(chunk, size, self.model.device())?;
            out.extend(intensity_rows(&self.model.forward(&images)?.intensities)?);
        }
        Ok(out)
    }
}

/// Frame paths of every row of a sequence under `frames_root`.
pub fn sequence_frame_paths(ann: &SequenceAnnotation, frames_root: &Path) -> Vec<PathBuf> {
    ann.frames
        .iter()
        .map(|&f| frame_path(frames_root, &ann.subject_id, &ann.sequence_id, f))
        .collect()
}

/// Per-AU ICC and MAE over every frame of densely labelled sequences.
pub fn evaluate(
    predictor: &dyn FramePredictor,
    sequences: &[SequenceAnnotation],
    frames_root: &Path,
) -> Result<EvalReport> {
    let Some(first) = sequences.first() else {
        return Err(validation("no sequences to evaluate"));
    };
    let au_names = &first.au_names;
    if predictor.au_count() != au_names.len() {
        return Err(validation(format!(
            "model predicts {} AUs, data has {}",
            predictor.au_count(),
            au_names.len()
        )));
    }
    let c = au_names.len();
    let mut labels = vec![Vec::new(); c];
    let mut preds = vec![Vec::new(); c];
    for ann in sequences {
        if &ann.au_names != au_names {
            return Err(validation(format!("sequence {} has different AU columns", ann.sequence_id)));
        }
        let rows = predictor.predict(&sequence_frame_paths(ann, frames_root))?;
        for (r, (cells, pred)) in ann.cells.iter().zip(rows).enumerate() {
            for k in 0..c {
                let Label::Value(v) = cells[k] else {
                    return Err(validation(format!(
                        "{}: frame {} has no {} label; evaluation needs dense labels",
                        ann.sequence_id, ann.frames[r], au_names[k]
                    )));
                };
                labels[k].push(normalize_label(v)?);
                preds[k].push(pred[k]);
            }
        }
    }
    build_report(
        au_names
            .iter()
            .zip(labels.iter().zip(&preds))
            .map(|(n, (l, p))| (n.as_str(), l.as_slice(), p.as_slice())),
    )
}
