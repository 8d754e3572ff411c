//! Dice evaluation of a segmentation model on one manifest split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::Task;
use crate::data::{load_pair, Manifest, Split};
use crate::error::{Error, Result};
use crate::models::{init_params, predict_logits, ModelConfig, ParamStore};
use crate::objectives::{binary_mask, dice_score, threshold_logits, DiceReport};
use crate::par;
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 8;

/// Anything that maps a `B×1×S×S` image batch to logits of the same shape.
pub trait Predictor {
    /// Square input side length the predictor expects.
    fn image_size(&self) -> usize;
    fn predict(&self, images: &Tensor) -> Result<Tensor>;
}

/// A trained segmentation network in eval mode.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image_size: usize,
}

impl SegModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.task != Task::Segment {
            return Err(Error::BadConfig(format!("{} checkpoint has no segmentation head", ckpt.task)));
        }
        let cfg = ckpt.train_config()?;
        let mut params = init_params(&cfg.model, 0)?;
        ckpt.load_into(&mut params)?;
        Ok(SegModel {
            config: cfg.model,
            params,
            image_size: cfg.image_size,
        })
    }
}

impl Predictor for SegModel {
    fn image_size(&self) -> usize {
        self.image_size
    }

    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        predict_logits(&self.params, &self.config, images)
    }
}

/// Per-image Dice of thresholded logits (`logit > 0`) against binary masks.
pub fn score_batch(logits: &Tensor, masks: &Tensor) -> Result<Vec<f64>> {
    if logits.shape() != masks.shape() {
        return Err(Error::ShapeMismatch(format!("logits {:?} vs masks {:?}", logits.shape(), masks.shape())));
    }
    let n = logits.shape()[0];
    let per = logits.numel() / n.max(1);
    (0..n)
        .map(|i| {
            let pred = threshold_logits(&logits.data()[i * per..(i + 1) * per]);
            let gt = binary_mask(&masks.data()[i * per..(i + 1) * per]);
            dice_score(&pred, &gt)
        })
        .collect()
}

/// Scores every labelled frame of `split`, in manifest order. When `out` is
/// given, writes a per-image CSV there and a one-row summary next to it as
/// `<stem>_summary.csv`.
pub fn evaluate(predictor: &dyn Predictor, manifest: &Manifest, split: Split, out: Option<&Path>) -> Result<DiceReport> {
    let records = manifest.labelled(split);
    if records.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let size = predictor.image_size();
    let mut scores = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let loaded = par::map_indexed(chunk.len(), |i| load_pair(&manifest.root, &chunk[i], size))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for ((img, mask), r) in loaded.into_iter().zip(chunk) {
            let mask = mask.ok_or_else(|| Error::EmptySplit(format!("{split}: {} has no mask", r.image_path.display())))?;
            images.push(img);
            masks.push(mask);
        }
        let n = chunk.len();
        let x = Tensor::stack_batch(&images)?.reshape(&[n, 1, size, size])?;
        let y = Tensor::stack_batch(&masks)?.reshape(&[n, 1, size, size])?;
        scores.extend(score_batch(&predictor.predict(&x)?, &y)?);
    }
    let report = DiceReport::from_scores(scores)?;

    if let Some(path) = out {
        let mut text = String::from("patient_id,video_id,frame_index,role,dice\n");
        for (r, d) in records.iter().zip(&report.per_image) {
            writeln!(text, "{},{},{},{},{}", r.patient_id, r.video_id, r.frame_index, r.role, d).expect("String write");
        }
        write_file(path, &text)?;
        let summary = format!(
            "split,n,dice_mean,dice_sd\n{},{},{},{}\n",
            split,
            report.per_image.len(),
            report.mean,
            report.sd
        );
        write_file(&summary_path(path), &summary)?;
    }
    Ok(report)
}

/// `<dir>/<stem>_summary.csv` for a per-image CSV at `path`.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into());
    path.with_file_name(format!("{stem}_summary.csv"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, manifest: &Manifest, split: Split, out: Option<&Path>) -> Result<DiceReport> {
    evaluate(&SegModel::from_checkpoint(ckpt)?, manifest, split, out)
}
