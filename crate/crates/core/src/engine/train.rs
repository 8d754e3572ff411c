//! Pretext (SimCLR, BYOL) and downstream segmentation training loops.
//!
//! Each run writes `metrics.csv`, `last.ckpt` after every epoch, `best.ckpt`
//! whenever the selection metric improves and `final.ckpt` at the end into
//! the config's `out_dir`. Resuming from a `last.ckpt` restores parameters,
//! optimizer state, RNG and counters, so the continued run reproduces the
//! uninterrupted one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;

use super::checkpoint::{load_checkpoint, load_named, save_checkpoint, Checkpoint};
use super::config::{Task, TrainConfig};
use super::evaluate::score_batch;
use super::metrics::{read_metrics, write_metrics, MetricsRow};
use crate::augment::{make_view_pair, AugmentConfig};
use crate::data::{
    fraction_subsample, load_manifest, load_pair, read_pgm, sample_pretext_frames, FrameRecord, Manifest, Role,
    Split,
};
use crate::error::{Error, Result};
use crate::models::{
    embedding_forward, init_params, init_parts, prediction_forward, projection_forward, segmentation_forward,
    EncoderKind, Graph, ModelConfig, Mode, ParamStore, Part,
};
use crate::objectives::{byol_loss, ema_update, nt_xent_loss, seg_loss, DiceReport};
use crate::optim::Optimizer;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::par;

const TRAIN_STREAM: u64 = 0x7EA1;
const VAL_STREAM: u64 = 0x7A1D;

/// Paths of the artifacts a run writes.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub last: PathBuf,
    pub best: PathBuf,
    pub final_ckpt: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        RunPaths {
            metrics: out_dir.join("metrics.csv"),
            last: out_dir.join("last.ckpt"),
            best: out_dir.join("best.ckpt"),
            final_ckpt: out_dir.join("final.ckpt"),
        }
    }
}

/// Mutable state shared by both loops and persisted in checkpoints.
struct RunState {
    params: ParamStore,
    target: Option<ParamStore>,
    optimizer: Optimizer,
    rng: Rng,
    epoch: u64,
    best: Option<f64>,
    rows: Vec<MetricsRow>,
}

impl RunState {
    fn fresh(cfg: &TrainConfig, mut params: ParamStore, target: Option<ParamStore>) -> Result<Self> {
        params.round_to_f32();
        Ok(RunState {
            params,
            target,
            optimizer: Optimizer::new(cfg.optim)?,
            rng: rng::derived(cfg.seed, &[TRAIN_STREAM]),
            epoch: 0,
            best: None,
            rows: Vec::new(),
        })
    }

    fn resume(&mut self, cfg: &TrainConfig, path: &Path, paths: &RunPaths) -> Result<()> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.task != cfg.task {
            return Err(Error::BadConfig(format!("cannot resume a {} run from a {} checkpoint", cfg.task, ckpt.task)));
        }
        ckpt.load_into(&mut self.params)?;
        if let Some(target) = &mut self.target {
            load_named(&ckpt.target, target)?;
        }
        self.optimizer.load_state(ckpt.optimizer_steps, &ckpt.optimizer)?;
        let words = ckpt
            .rng
            .ok_or_else(|| Error::MissingTensor(vec!["meta.rng".into()]))?;
        self.rng = rng::restore(&words)?;
        self.epoch = ckpt.epoch;
        self.best = ckpt.best;
        self.rows = if paths.metrics.exists() {
            read_metrics(&paths.metrics)?
                .into_iter()
                .filter(|r| r.epoch <= ckpt.epoch)
                .collect()
        } else {
            Vec::new()
        };
        Ok(())
    }

    fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(cfg.task, cfg.echo(), &self.params);
        if let Some(target) = &self.target {
            c.target = target.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect();
        }
        c.optimizer = self.optimizer.state_tensors();
        c.optimizer_steps = self.optimizer.step_count();
        c.rng = Some(rng::snapshot(&self.rng));
        c.epoch = self.epoch;
        c.best = self.best;
        c
    }

    fn steps_exhausted(&self, cfg: &TrainConfig) -> bool {
        cfg.max_steps.is_some_and(|m| self.optimizer.step_count() >= m)
    }

    /// Records the epoch, updates `best.ckpt` and writes `last.ckpt`.
    fn finish_epoch(&mut self, cfg: &TrainConfig, paths: &RunPaths, rows: Vec<MetricsRow>, metric: f64, higher_is_better: bool) -> Result<()> {
        self.epoch += 1;
        self.rows.extend(rows.into_iter().map(|r| MetricsRow { epoch: self.epoch, ..r }));
        write_metrics(&paths.metrics, &self.rows)?;
        let improved = match self.best {
            None => true,
            Some(b) if higher_is_better => metric > b,
            Some(b) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            save_checkpoint(&self.checkpoint(cfg), &paths.best)?;
        }
        save_checkpoint(&self.checkpoint(cfg), &paths.last)
    }

    fn finish(&self, cfg: &TrainConfig, paths: &RunPaths) -> Result<Checkpoint> {
        let c = self.checkpoint(cfg);
        save_checkpoint(&c, &paths.final_ckpt)?;
        Ok(c)
    }
}

fn wall(cfg: &TrainConfig, start: Instant) -> f64 {
    if cfg.wall_clock {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

fn row(split: Split, loss: f64, dice: Option<&DiceReport>, wall_seconds: f64) -> MetricsRow {
    MetricsRow {
        epoch: 0,
        split: split.to_string(),
        loss,
        dice_mean: dice.map(|d| d.mean),
        dice_sd: dice.map(|d| d.sd),
        wall_seconds,
    }
}

fn finish_step(params: &mut ParamStore, optimizer: &mut Optimizer) -> Result<()> {
    optimizer.step(params)?;
    params.zero_grad();
    params.round_to_f32();
    optimizer.round_to_f32();
    Ok(())
}

/// Augments `images` into an interleaved `2B×1×S×S` batch: rows `2i` and
/// `2i+1` are the two views of image `i`. Each image draws from its own
/// stream derived from `(batch_seed, i)`.
pub fn make_view_batch(images: &[&Tensor], augment: &AugmentConfig, batch_seed: u64) -> Result<Tensor> {
    let pairs = par::map_indexed(images.len(), |i| {
        make_view_pair(images[i], augment, &mut rng::derived(batch_seed, &[i as u64]), i)
    });
    let mut views = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        views.push(p.view_a);
        views.push(p.view_b);
    }
    let n = views.len();
    let s = augment.out_size;
    Tensor::stack_batch(&views)?.reshape(&[n, 1, s, s])
}

fn simclr_forward(g: &mut Graph<'_>, model: &ModelConfig, views: Tensor) -> Result<crate::models::Var> {
    let x = g.input(views);
    let emb = embedding_forward(g, model, x)?;
    projection_forward(g, emb)
}

/// One SimCLR update on a view batch; returns the NT-Xent loss.
pub fn simclr_step(
    params: &mut ParamStore,
    optimizer: &mut Optimizer,
    model: &ModelConfig,
    temperature: f64,
    views: Tensor,
) -> Result<f64> {
    let mut g = Graph::new(params, Mode::Train);
    let z = simclr_forward(&mut g, model, views)?;
    let (loss, grad) = nt_xent_loss(g.value(z), temperature)?;
    let grads = g.backward(z, grad)?;
    grads.apply(params)?;
    finish_step(params, optimizer)?;
    Ok(loss)
}

/// Swaps rows `2i` and `2i+1`, pairing each view with its partner's target.
fn swap_pairs(t: &Tensor) -> Result<Tensor> {
    let (rows, d) = t.dims2()?;
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let partner = r ^ 1;
        out[r * d..(r + 1) * d].copy_from_slice(&t.data()[partner * d..(partner + 1) * d]);
    }
    Tensor::from_vec(&[rows, d], out)
}

fn byol_target_projection(target: &ParamStore, model: &ModelConfig, views: Tensor, mode: Mode) -> Result<Tensor> {
    // Forward only: no backward pass and the batch statistics are dropped.
    let mut g = Graph::new(target, mode);
    let z = simclr_forward(&mut g, model, views)?;
    Ok(g.value(z).clone())
}

/// Symmetrized BYOL loss: each view predicts the target projection of the
/// other view. Returns the summed loss of both directions and its gradient
/// with respect to the predictions.
fn byol_symmetric(pred: &Tensor, target_proj: &Tensor) -> Result<(f64, Tensor)> {
    let (loss, grad) = byol_loss(pred, &swap_pairs(target_proj)?)?;
    Ok((2.0 * loss, grad.map(|g| 2.0 * g)))
}

/// One BYOL update: online step on the symmetrized loss, then the EMA
/// update of the target. Returns the loss.
pub fn byol_step(
    online: &mut ParamStore,
    target: &mut ParamStore,
    optimizer: &mut Optimizer,
    model: &ModelConfig,
    ema_decay: f64,
    views: Tensor,
) -> Result<f64> {
    let target_proj = byol_target_projection(target, model, views.clone(), Mode::Train)?;
    let mut g = Graph::new(online, Mode::Train);
    let z = simclr_forward(&mut g, model, views)?;
    let p = prediction_forward(&mut g, z)?;
    let (loss, grad) = byol_symmetric(g.value(p), &target_proj)?;
    let grads = g.backward(p, grad)?;
    grads.apply(online)?;
    finish_step(online, optimizer)?;
    ema_update(target, online, ema_decay)?;
    target.round_to_f32();
    Ok(loss)
}

/// Eval-mode pretext loss on a fixed view batch.
fn pretext_eval_loss(state: &RunState, cfg: &TrainConfig, views: Tensor) -> Result<f64> {
    let model = &cfg.model;
    let mut g = Graph::new(&state.params, Mode::Eval);
    let z = simclr_forward(&mut g, model, views.clone())?;
    match &state.target {
        None => Ok(nt_xent_loss(g.value(z), cfg.temperature)?.0),
        Some(target) => {
            let p = prediction_forward(&mut g, z)?;
            let t = byol_target_projection(target, model, views, Mode::Eval)?;
            Ok(byol_symmetric(g.value(p), &t)?.0)
        }
    }
}

/// Unit-range `1×H×W` tensor at the file's own resolution.
fn native_image(root: &Path, record: &FrameRecord) -> Result<Tensor> {
    let img = read_pgm(&root.join(&record.image_path))?;
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::from_vec(&[1, img.height, img.width], data)
}

fn load_images(root: &Path, records: &[FrameRecord]) -> Result<Vec<Tensor>> {
    par::map_indexed(records.len(), |i| native_image(root, &records[i]))
        .into_iter()
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn pretrain_simclr(cfg: &TrainConfig) -> Result<Checkpoint> {
    expect_task(cfg, Task::Simclr)?;
    pretrain(cfg)
}

pub fn pretrain_byol(cfg: &TrainConfig) -> Result<Checkpoint> {
    expect_task(cfg, Task::Byol)?;
    pretrain(cfg)
}

fn expect_task(cfg: &TrainConfig, task: Task) -> Result<()> {
    if cfg.task != task {
        return Err(Error::BadConfig(format!("config task is {}, expected {task}", cfg.task)));
    }
    Ok(())
}

/// Parameters of a pretext model: encoder and projector, plus the
/// predictor and a target copy for BYOL.
pub fn pretext_params(cfg: &TrainConfig) -> Result<(ParamStore, Option<ParamStore>)> {
    match cfg.task {
        Task::Simclr => Ok((init_parts(&cfg.model, &[Part::Encoder, Part::Projector], cfg.seed)?, None)),
        Task::Byol => {
            let mut online = init_parts(&cfg.model, &[Part::Encoder, Part::Projector, Part::Predictor], cfg.seed)?;
            online.round_to_f32();
            let target = crate::objectives::ByolState::new(online.clone(), cfg.ema_decay)?.target;
            Ok((online, Some(target)))
        }
        Task::Segment => Err(Error::BadConfig("segment is not a pretext task".into())),
    }
}

/// Pretext training on TRAIN-split MID frames. Each epoch redraws one MID
/// frame per video and visits them in shuffled order; a trailing batch with
/// fewer than two images is skipped. VAL-split MID frames with a fixed
/// augmentation give an eval-mode validation loss that selects `best.ckpt`;
/// without at least two VAL frames the training loss is used instead.
fn pretrain(cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.batch_size < 2 {
        return Err(Error::InsufficientBatch(cfg.batch_size));
    }
    let start = Instant::now();
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let train = manifest.filter_split(Split::Train);
    let mids: Vec<FrameRecord> = train.records.iter().filter(|r| r.role == Role::Mid).cloned().collect();
    if mids.is_empty() {
        return Err(Error::EmptySplit("train (no MID frames)".into()));
    }
    let videos = sample_pretext_frames(&train, 0)?.len();
    if videos < 2 {
        return Err(Error::InsufficientBatch(videos));
    }
    let mid_images = load_images(&manifest.root, &mids)?;

    let val = manifest.filter_split(Split::Val);
    let val_views = if val.records.iter().any(|r| r.role == Role::Mid) {
        let frames = sample_pretext_frames(&val, rng::derive_seed(cfg.seed, &[VAL_STREAM]))?;
        let images = load_images(&manifest.root, &frames)?;
        let mut batches = Vec::new();
        for (b, chunk) in images.chunks(cfg.batch_size).enumerate().filter(|(_, c)| c.len() >= 2) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let seed = rng::derive_seed(cfg.seed, &[VAL_STREAM, b as u64]);
            batches.push(make_view_batch(&refs, &cfg.augment, seed)?);
        }
        batches
    } else {
        Vec::new()
    };

    let paths = RunPaths::new(&cfg.out_dir);
    let (params, target) = pretext_params(cfg)?;
    let mut state = RunState::fresh(cfg, params, target)?;
    if let Some(path) = &cfg.resume {
        state.resume(cfg, path, &paths)?;
    }

    while state.epoch < cfg.epochs as u64 && !state.steps_exhausted(cfg) {
        let frames = sample_pretext_frames(&train, state.rng.next_u64())?;
        let mut order: Vec<&Tensor> = frames
            .iter()
            .map(|f| &mid_images[mids.iter().position(|m| m == f).expect("frame drawn from mids")])
            .collect();
        order.shuffle(&mut state.rng);

        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            if state.steps_exhausted(cfg) {
                break;
            }
            let views = make_view_batch(batch, &cfg.augment, state.rng.next_u64())?;
            let loss = match &mut state.target {
                None => simclr_step(&mut state.params, &mut state.optimizer, &cfg.model, cfg.temperature, views)?,
                Some(target) => byol_step(&mut state.params, target, &mut state.optimizer, &cfg.model, cfg.ema_decay, views)?,
            };
            losses.push(loss);
        }
        let train_loss = mean(&losses);
        let mut rows = vec![row(Split::Train, train_loss, None, wall(cfg, start))];
        let mut metric = train_loss;
        if !val_views.is_empty() {
            let val_losses = val_views
                .iter()
                .map(|v| pretext_eval_loss(&state, cfg, v.clone()))
                .collect::<Result<Vec<_>>>()?;
            metric = mean(&val_losses);
            rows.push(row(Split::Val, metric, None, wall(cfg, start)));
        }
        state.finish_epoch(cfg, &paths, rows, metric, false)?;
    }
    state.finish(cfg, &paths)
}

/// Copies every `encoder.*` tensor of a pretext checkpoint into `seg` by
/// exact name. Nothing is copied unless all names and shapes line up.
/// Returns the number of tensors copied.
pub fn transfer_backbone(seg: &mut ParamStore, model: &ModelConfig, ckpt: &Checkpoint) -> Result<usize> {
    let found: EncoderKind = ckpt.encoder_kind()?;
    if found != model.encoder {
        return Err(Error::ArchMismatch {
            expected: model.encoder.to_string(),
            found: found.to_string(),
        });
    }
    let names: Vec<String> = seg.names().filter(|n| n.starts_with("encoder.")).map(str::to_string).collect();
    let missing: Vec<String> = names.iter().filter(|n| ckpt.param(n).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingTensor(missing));
    }
    for name in &names {
        let (have, got) = (seg.value(name)?.shape(), ckpt.param(name).expect("checked").shape());
        if have != got {
            return Err(Error::ShapeMismatch(format!("{name}: model {have:?}, checkpoint {got:?}")));
        }
    }
    for name in &names {
        seg.get_mut(name).expect("listed from store").value = ckpt.param(name).expect("checked").clone();
    }
    Ok(names.len())
}

/// Labelled frames at model resolution.
pub struct LabelledSet {
    pub records: Vec<FrameRecord>,
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl LabelledSet {
    pub fn load(manifest: &Manifest, split: Split, size: usize) -> Result<Self> {
        let records = manifest.labelled(split);
        let loaded = par::map_indexed(records.len(), |i| load_pair(&manifest.root, &records[i], size))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (images, masks) = loaded
            .into_iter()
            .zip(&records)
            .map(|((img, mask), r)| {
                mask.map(|m| (img, m))
                    .ok_or_else(|| Error::EmptySplit(format!("{split}: {} has no mask", r.image_path.display())))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(LabelledSet { records, images, masks })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let size = self.images[0].shape()[1];
        let n = idx.len();
        let x = Tensor::stack_batch(&idx.iter().map(|&i| self.images[i].clone()).collect::<Vec<_>>())?;
        let y = Tensor::stack_batch(&idx.iter().map(|&i| self.masks[i].clone()).collect::<Vec<_>>())?;
        Ok((x.reshape(&[n, 1, size, size])?, y.reshape(&[n, 1, size, size])?))
    }
}

/// One supervised update on a batch; returns the BCE loss.
pub fn segment_step(
    params: &mut ParamStore,
    optimizer: &mut Optimizer,
    model: &ModelConfig,
    images: Tensor,
    masks: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new(params, Mode::Train);
    let x = g.input(images);
    let logits = segmentation_forward(&mut g, model, x)?;
    let (loss, grad) = seg_loss(g.value(logits), masks)?;
    let grads = g.backward(logits, grad)?;
    grads.apply(params)?;
    finish_step(params, optimizer)?;
    Ok(loss)
}

/// Eval-mode BCE loss (pixel mean over the set) and per-image Dice.
pub fn score_set(params: &ParamStore, model: &ModelConfig, set: &LabelledSet) -> Result<(f64, DiceReport)> {
    let mut loss_sum = 0.0;
    let mut dice = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(super::evaluate::EVAL_BATCH) {
        let (x, y) = set.batch(chunk)?;
        let logits = crate::models::predict_logits(params, model, &x)?;
        loss_sum += seg_loss(&logits, &y)?.0 * chunk.len() as f64;
        dice.extend(score_batch(&logits, &y)?);
    }
    Ok((loss_sum / set.len() as f64, DiceReport::from_scores(dice)?))
}

/// TRAIN and VAL sets of a fine-tuning run after fraction subsampling.
pub fn finetune_data(cfg: &TrainConfig) -> Result<(LabelledSet, LabelledSet)> {
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let subset = fraction_subsample(&manifest, cfg.fraction, cfg.seed)?;
    let train = LabelledSet::load(&subset, Split::Train, cfg.image_size)?;
    if train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let val = LabelledSet::load(&subset, Split::Val, cfg.image_size)?;
    Ok((train, val))
}

/// Supervised fine-tuning on the labelled TRAIN frames of a seeded
/// `fraction` of TRAIN patients. VAL Dice is computed every epoch and the
/// strictly best epoch is kept as `best.ckpt`; with no VAL frames the lowest
/// training loss decides instead.
pub fn finetune_segmentation(cfg: &TrainConfig) -> Result<Checkpoint> {
    expect_task(cfg, Task::Segment)?;
    let start = Instant::now();
    let (train, val) = finetune_data(cfg)?;

    let mut params = init_params(&cfg.model, cfg.seed)?;
    if let Some(path) = &cfg.backbone {
        transfer_backbone(&mut params, &cfg.model, &load_checkpoint(path)?)?;
    }
    let paths = RunPaths::new(&cfg.out_dir);
    let mut state = RunState::fresh(cfg, params, None)?;
    if let Some(path) = &cfg.resume {
        state.resume(cfg, path, &paths)?;
    }

    while state.epoch < cfg.epochs as u64 && !state.steps_exhausted(cfg) {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if state.steps_exhausted(cfg) {
                break;
            }
            let (x, y) = train.batch(chunk)?;
            losses.push(segment_step(&mut state.params, &mut state.optimizer, &cfg.model, x, &y)?);
        }
        let train_loss = mean(&losses);
        let mut rows = vec![row(Split::Train, train_loss, None, wall(cfg, start))];
        let (metric, higher) = if val.is_empty() {
            (train_loss, false)
        } else {
            let (loss, report) = score_set(&state.params, &cfg.model, &val)?;
            rows.push(row(Split::Val, loss, Some(&report), wall(cfg, start)));
            (report.mean, true)
        };
        state.finish_epoch(cfg, &paths, rows, metric, higher)?;
    }
    state.finish(cfg, &paths)
}

/// Dispatches on the config's task.
pub fn run_task(cfg: &TrainConfig) -> Result<Checkpoint> {
    match cfg.task {
        Task::Simclr => pretrain_simclr(cfg),
        Task::Byol => pretrain_byol(cfg),
        Task::Segment => finetune_segmentation(cfg),
    }
}
