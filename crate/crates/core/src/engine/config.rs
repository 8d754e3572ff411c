//! `key=value` run configuration.
//!
//! A file is read into a [`RawConfig`] that remembers which keys were given
//! explicitly; [`RawConfig::resolve`] fills the rest from task and preset
//! defaults. The grid runner edits a raw config per cell and re-resolves,
//! so defaults that depend on task or encoder follow the cell.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::models::{EncoderKind, ModelConfig};
use crate::objectives::{DEFAULT_EMA_DECAY, DEFAULT_TEMPERATURE};
use crate::optim::{OptimConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Simclr,
    Byol,
    Segment,
}

impl Task {
    pub fn tag(self) -> u32 {
        match self {
            Task::Simclr => 0,
            Task::Byol => 1,
            Task::Segment => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Task> {
        match tag {
            0 => Some(Task::Simclr),
            1 => Some(Task::Byol),
            2 => Some(Task::Segment),
            _ => None,
        }
    }

    pub fn is_pretext(self) -> bool {
        self != Task::Segment
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Simclr => "simclr",
            Task::Byol => "byol",
            Task::Segment => "segment",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" => Ok(Task::Simclr),
            "byol" => Ok(Task::Byol),
            "segment" | "segmentation" => Ok(Task::Segment),
            other => Err(format!("unknown task `{other}` (simclr, byol, segment)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small enough to train on a laptop CPU.
    Desk,
    /// Full-size settings for GPU hardware.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset `{other}` (desk, paper)")),
        }
    }
}

/// Every accepted key, in the order used when echoing a config.
pub const KEYS: &[&str] = &[
    "task",
    "preset",
    "encoder",
    "width_scale",
    "depth",
    "output_stride",
    "proj_dim",
    "proj_hidden",
    "aspp_channels",
    "image_size",
    "epochs",
    "batch_size",
    "max_steps",
    "optimizer",
    "lr",
    "momentum",
    "weight_decay",
    "temperature",
    "ema_decay",
    "fraction",
    "seed",
    "crop_scale_min",
    "crop_scale_max",
    "aspect_min",
    "aspect_max",
    "jitter_prob",
    "brightness",
    "contrast",
    "saturation",
    "hue",
    "blur_kernel",
    "blur_sigma_min",
    "blur_sigma_max",
    "flip_prob",
    "wall_clock",
    "manifest",
    "backbone",
    "out_dir",
    "resume",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    /// key → (value, 1-based line; 0 when set programmatically)
    entries: IndexMap<String, (String, usize)>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        RawConfig {
            entries: IndexMap::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg = RawConfig::new(base_dir);
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    key: line.to_string(),
                    reason: "expected key=value".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line: line_no,
                    key: key.to_string(),
                    reason: "unknown key".into(),
                });
            }
            if cfg.entries.contains_key(key) {
                return Err(Error::Config {
                    line: line_no,
                    key: key.to_string(),
                    reason: "key given twice".into(),
                });
            }
            cfg.entries.insert(key.to_string(), (value.to_string(), line_no));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Sets or replaces a key; panics on keys outside [`KEYS`].
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        assert!(KEYS.contains(&key), "unknown config key {key}");
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.shift_remove(key);
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line: *line,
                key: key.to_string(),
                reason: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn check(&self, key: &str, ok: bool, reason: &str) -> Result<()> {
        if ok {
            return Ok(());
        }
        Err(Error::Config {
            line: self.entries.get(key).map_or(0, |(_, l)| *l),
            key: key.to_string(),
            reason: reason.to_string(),
        })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let task: Task = self.typed("task")?.ok_or_else(|| Error::Config {
            line: 0,
            key: "task".into(),
            reason: "required (simclr, byol, segment)".into(),
        })?;
        let preset: Preset = self.typed("preset")?.unwrap_or(Preset::Desk);
        let paper = preset == Preset::Paper;
        let encoder: EncoderKind = match self.entries.get("encoder") {
            None => EncoderKind::Unet,
            Some((v, line)) => v.parse().map_err(|_| Error::Config {
                line: *line,
                key: "encoder".into(),
                reason: format!("unknown encoder `{v}` (unet, resnet, deeplabv3)"),
            })?,
        };

        let model = ModelConfig {
            encoder,
            width_scale: self.typed("width_scale")?.unwrap_or(if paper { 1.0 } else { 0.125 }),
            depth: self.typed("depth")?.unwrap_or(if paper { 4 } else { 1 }),
            output_stride: self.typed("output_stride")?.unwrap_or(16),
            in_channels: 1,
            num_classes: 1,
            proj_dim: self.typed("proj_dim")?.unwrap_or(if paper { 128 } else { 32 }),
            proj_hidden: self.typed("proj_hidden")?.unwrap_or(if paper { 2048 } else { 64 }),
            aspp_channels: self.typed("aspp_channels")?,
        };
        self.check("width_scale", model.width_scale.is_finite() && model.width_scale * 64.0 >= 1.0, "width_scale * 64 must be at least 1")?;
        self.check("depth", model.depth >= 1, "must be at least 1")?;
        self.check("output_stride", matches!(model.output_stride, 8 | 16), "must be 8 or 16")?;
        self.check("proj_dim", model.proj_dim >= 1, "must be positive")?;
        self.check("proj_hidden", model.proj_hidden >= 1, "must be positive")?;
        self.check("aspp_channels", model.aspp_channels != Some(0), "must be positive")?;

        let image_size: usize = self.typed("image_size")?.unwrap_or(if paper { 224 } else { 64 });
        self.check(
            "image_size",
            image_size > 0 && image_size % model.size_multiple() == 0,
            &format!("must be a positive multiple of {}", model.size_multiple()),
        )?;

        let epochs: usize = self.typed("epochs")?.unwrap_or(match (task.is_pretext(), paper) {
            (true, true) => 300,
            (true, false) => 5,
            (false, true) => 50,
            (false, false) => 10,
        });
        self.check("epochs", epochs >= 1, "must be at least 1")?;
        let batch_size: usize = self.typed("batch_size")?.unwrap_or(match (task, paper, encoder) {
            (Task::Segment, true, _) => 128,
            (Task::Segment, false, _) => 8,
            (_, true, EncoderKind::Unet) => 256,
            (_, true, EncoderKind::ResnetAtrous) => 128,
            (_, false, _) => 16,
        });
        self.check("batch_size", batch_size >= 1, "must be at least 1")?;
        let max_steps: Option<u64> = self.typed("max_steps")?;

        let kind: OptimizerKind = match self.entries.get("optimizer") {
            None if task.is_pretext() => OptimizerKind::Adam,
            None => OptimizerKind::Madgrad,
            Some((v, line)) => v.parse().map_err(|_| Error::Config {
                line: *line,
                key: "optimizer".into(),
                reason: format!("unknown optimizer `{v}` (adam, madgrad)"),
            })?,
        };
        let lr = self.typed("lr")?.unwrap_or(match (task, encoder) {
            (Task::Simclr, _) => 1e-3,
            (Task::Byol, _) => 0.2,
            (Task::Segment, EncoderKind::ResnetAtrous) => 1e-4,
            (Task::Segment, EncoderKind::Unet) => 1e-5,
        });
        let mut optim = OptimConfig::for_kind(kind, lr);
        if let Some(m) = self.typed("momentum")? {
            optim.momentum = m;
        }
        if let Some(wd) = self.typed("weight_decay")? {
            optim.weight_decay = wd;
        }
        self.check("lr", lr > 0.0 && f64::is_finite(lr), "must be positive")?;
        self.check("momentum", (0.0..1.0).contains(&optim.momentum), "must lie in [0, 1)")?;
        self.check("weight_decay", optim.weight_decay >= 0.0, "must be non-negative")?;

        let temperature = self.typed("temperature")?.unwrap_or(DEFAULT_TEMPERATURE);
        self.check("temperature", temperature > 0.0, "must be positive")?;
        let ema_decay = self.typed("ema_decay")?.unwrap_or(DEFAULT_EMA_DECAY);
        self.check("ema_decay", (0.0..=1.0).contains(&ema_decay), "must lie in [0, 1]")?;
        let fraction = self.typed("fraction")?.unwrap_or(1.0);
        self.check("fraction", fraction > 0.0 && fraction <= 1.0, "must lie in (0, 1]")?;
        let seed = self.typed("seed")?.unwrap_or(0);

        let d = AugmentConfig::default();
        let augment = AugmentConfig {
            crop_scale: (
                self.typed("crop_scale_min")?.unwrap_or(d.crop_scale.0),
                self.typed("crop_scale_max")?.unwrap_or(d.crop_scale.1),
            ),
            crop_aspect: (
                self.typed("aspect_min")?.unwrap_or(d.crop_aspect.0),
                self.typed("aspect_max")?.unwrap_or(d.crop_aspect.1),
            ),
            brightness: self.typed("brightness")?.unwrap_or(d.brightness),
            contrast: self.typed("contrast")?.unwrap_or(d.contrast),
            saturation: self.typed("saturation")?.unwrap_or(d.saturation),
            hue: self.typed("hue")?.unwrap_or(d.hue),
            jitter_prob: self.typed("jitter_prob")?.unwrap_or(d.jitter_prob),
            blur_kernel: self.typed("blur_kernel")?.unwrap_or(d.blur_kernel),
            blur_sigma: (
                self.typed("blur_sigma_min")?.unwrap_or(d.blur_sigma.0),
                self.typed("blur_sigma_max")?.unwrap_or(d.blur_sigma.1),
            ),
            flip_prob: self.typed("flip_prob")?.unwrap_or(d.flip_prob),
            out_size: image_size,
        };
        augment.validate().map_err(|e| Error::Config {
            line: 0,
            key: "augmentation".into(),
            reason: e.to_string(),
        })?;

        Ok(TrainConfig {
            task,
            preset,
            model,
            augment,
            optim,
            image_size,
            epochs,
            batch_size,
            max_steps,
            temperature,
            ema_decay,
            fraction,
            seed,
            wall_clock: self.typed("wall_clock")?.unwrap_or(false),
            manifest: self.path("manifest"),
            manifest_text: self.get("manifest").unwrap_or("").to_string(),
            backbone: self.path("backbone"),
            out_dir: self.path("out_dir").unwrap_or_else(|| self.base_dir.join("runs").join(task.to_string())),
            resume: self.path("resume"),
        })
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub preset: Preset,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops training after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub temperature: f64,
    pub ema_decay: f64,
    pub fraction: f64,
    pub seed: u64,
    /// Record real elapsed time in metrics; off keeps output byte-reproducible.
    pub wall_clock: bool,
    pub manifest: Option<PathBuf>,
    /// The manifest value as written, for the echo.
    manifest_text: String,
    pub backbone: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| Error::Config {
            line: 0,
            key: "manifest".into(),
            reason: "required for training".into(),
        })
    }

    /// Canonical `key=value` text stored in checkpoints. Output locations and
    /// the backbone path are left out so the same run written elsewhere
    /// produces identical bytes; `parse` of the echo restores the model.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let a = &self.augment;
        let mut lines = vec![
            format!("task={}", self.task),
            format!("preset={}", self.preset),
            format!("encoder={}", m.encoder),
            format!("width_scale={}", m.width_scale),
            format!("depth={}", m.depth),
            format!("output_stride={}", m.output_stride),
            format!("proj_dim={}", m.proj_dim),
            format!("proj_hidden={}", m.proj_hidden),
        ];
        if let Some(c) = m.aspp_channels {
            lines.push(format!("aspp_channels={c}"));
        }
        lines.extend([
            format!("image_size={}", self.image_size),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
        ]);
        if let Some(s) = self.max_steps {
            lines.push(format!("max_steps={s}"));
        }
        lines.extend([
            format!("optimizer={}", self.optim.kind),
            format!("lr={}", self.optim.lr),
            format!("momentum={}", self.optim.momentum),
            format!("weight_decay={}", self.optim.weight_decay),
            format!("temperature={}", self.temperature),
            format!("ema_decay={}", self.ema_decay),
            format!("fraction={}", self.fraction),
            format!("seed={}", self.seed),
            format!("crop_scale_min={}", a.crop_scale.0),
            format!("crop_scale_max={}", a.crop_scale.1),
            format!("aspect_min={}", a.crop_aspect.0),
            format!("aspect_max={}", a.crop_aspect.1),
            format!("jitter_prob={}", a.jitter_prob),
            format!("brightness={}", a.brightness),
            format!("contrast={}", a.contrast),
            format!("saturation={}", a.saturation),
            format!("hue={}", a.hue),
            format!("blur_kernel={}", a.blur_kernel),
            format!("blur_sigma_min={}", a.blur_sigma.0),
            format!("blur_sigma_max={}", a.blur_sigma.1),
            format!("flip_prob={}", a.flip_prob),
            format!("wall_clock={}", self.wall_clock),
        ]);
        if !self.manifest_text.is_empty() {
            lines.push(format!("manifest={}", self.manifest_text));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    RawConfig::load(path)?.resolve()
}
