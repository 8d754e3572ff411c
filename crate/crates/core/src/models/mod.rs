//! UNet and atrous-ResNet segmentation networks plus the contrastive heads.
//!
//! Parameters live in a [`ParamStore`] under dotted names. Everything the
//! pretext and segmentation models share starts with `encoder.`, which is
//! what backbone transfer copies.

mod aspp;
mod graph;
mod heads;
mod init;
pub mod linalg;
pub mod ops;
mod params;
mod resnet;
mod unet;

pub use aspp::aspp_forward;
pub use graph::{Gradients, Graph, Mode, StatUpdate, Var};
pub use heads::{prediction_forward, projection_forward};
pub use params::{Param, ParamStore};
pub use resnet::{bottleneck_block, resnet_atrous_forward};
pub use unet::{unet_decoder_forward, unet_encoder_forward, FeaturePyramid};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Unet,
    ResnetAtrous,
}

impl EncoderKind {
    /// Name of the segmentation network built on this encoder.
    pub fn network(&self) -> &'static str {
        match self {
            EncoderKind::Unet => "unet",
            EncoderKind::ResnetAtrous => "deeplabv3",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Unet => "unet",
            EncoderKind::ResnetAtrous => "resnet",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(EncoderKind::Unet),
            "resnet" | "resnet_atrous" | "deeplabv3" | "deeplab" => Ok(EncoderKind::ResnetAtrous),
            other => Err(Error::BadConfig(format!("unknown encoder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub width_scale: f64,
    /// Bottleneck blocks per residual stage.
    pub depth: usize,
    /// 8 or 16; ResNet encoder only.
    pub output_stride: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    /// ASPP output width; `None` means `256 · width_scale`.
    pub aspp_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Unet,
            width_scale: 0.125,
            depth: 1,
            output_stride: 16,
            in_channels: 1,
            num_classes: 1,
            proj_dim: 32,
            proj_hidden: 64,
            aspp_channels: None,
        }
    }
}

impl ModelConfig {
    pub fn with_encoder(encoder: EncoderKind) -> Self {
        ModelConfig {
            encoder,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale.is_finite() && self.width_scale * 64.0 >= 1.0) {
            return Err(Error::BadConfig(format!(
                "width_scale {} leaves a stage with fewer than one channel",
                self.width_scale
            )));
        }
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::BadConfig(format!("output_stride must be 8 or 16, got {}", self.output_stride)));
        }
        for (name, v) in [
            ("depth", self.depth),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("proj_dim", self.proj_dim),
            ("proj_hidden", self.proj_hidden),
            ("aspp_channels", self.aspp_channels.unwrap_or(1)),
        ] {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Stage widths f1..f4 and the bottleneck.
    pub fn unet_widths(&self) -> [usize; 5] {
        [64, 128, 256, 512, 1024].map(|c| self.scaled(c))
    }

    pub fn resnet_stem_width(&self) -> usize {
        self.scaled(64)
    }

    pub fn resnet_widths(&self) -> [usize; 4] {
        [256, 512, 1024, 2048].map(|c| self.scaled(c))
    }

    pub fn aspp_width(&self) -> usize {
        self.aspp_channels.unwrap_or_else(|| self.scaled(256))
    }

    /// ASPP dilation rates, doubled when the encoder keeps stride 8.
    pub fn aspp_rates(&self) -> [usize; 3] {
        let k = 16 / self.output_stride;
        [6 * k, 12 * k, 18 * k]
    }

    /// Width of the pooled encoder output fed to the projection head.
    pub fn embedding_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Unet => self.unet_widths()[4],
            EncoderKind::ResnetAtrous => self.resnet_widths()[3],
        }
    }

    /// Input sizes must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        match self.encoder {
            EncoderKind::Unet => 16,
            EncoderKind::ResnetAtrous => self.output_stride,
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::Shape(format!("expected B×C×H×W input, got {shape:?}")));
        };
        let m = self.size_multiple();
        if c != self.in_channels || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {shape:?} needs {} channels and spatial size divisible by {m}",
                self.in_channels
            )));
        }
        Ok(())
    }
}

/// Groups of parameters that make up a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    /// UNet decoder, or ASPP plus classifier for the ResNet encoder.
    SegmentationHead,
    Projector,
    Predictor,
}

/// Initializes the requested parts. Each tensor draws from a stream keyed
/// by `(seed, name)`, so shared parts match across differently composed models.
pub fn init_parts(config: &ModelConfig, parts: &[Part], seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut b = init::Init::new(seed);
    for part in parts {
        match (part, config.encoder) {
            (Part::Encoder, EncoderKind::Unet) => unet::declare_encoder(&mut b, config)?,
            (Part::Encoder, EncoderKind::ResnetAtrous) => resnet::declare(&mut b, config)?,
            (Part::SegmentationHead, EncoderKind::Unet) => unet::declare_decoder(&mut b, config)?,
            (Part::SegmentationHead, EncoderKind::ResnetAtrous) => aspp::declare(&mut b, config)?,
            (Part::Projector, _) => heads::declare(&mut b, "projector", config.embedding_dim(), config)?,
            (Part::Predictor, _) => heads::declare(&mut b, "predictor", config.proj_dim, config)?,
        }
    }
    Ok(b.finish())
}

/// Segmentation model parameters (encoder plus decoder or ASPP head).
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    init_parts(config, &[Part::Encoder, Part::SegmentationHead], seed)
}

/// Encoder output before any head: the UNet bottleneck or the ResNet stage-4 map.
pub fn encoder_forward(g: &mut Graph<'_>, config: &ModelConfig, img: Var) -> Result<Var> {
    match config.encoder {
        EncoderKind::Unet => Ok(unet_encoder_forward(g, config, img)?.bottleneck),
        EncoderKind::ResnetAtrous => resnet_atrous_forward(g, config, img),
    }
}

/// Global-average-pooled encoder features, `B×D`.
pub fn embedding_forward(g: &mut Graph<'_>, config: &ModelConfig, img: Var) -> Result<Var> {
    let feat = encoder_forward(g, config, img)?;
    let pooled = g.global_avg_pool(feat)?;
    let b = g.shape(pooled)[0];
    let d = g.shape(pooled)[1];
    g.reshape(pooled, &[b, d])
}

/// Full-resolution logits `B×num_classes×S×S`.
pub fn segmentation_forward(g: &mut Graph<'_>, config: &ModelConfig, img: Var) -> Result<Var> {
    match config.encoder {
        EncoderKind::Unet => {
            let pyramid = unet_encoder_forward(g, config, img)?;
            unet_decoder_forward(g, config, &pyramid)
        }
        EncoderKind::ResnetAtrous => {
            let (h, w) = (g.shape(img)[2], g.shape(img)[3]);
            let feat = resnet_atrous_forward(g, config, img)?;
            let fused = aspp_forward(g, config, feat)?;
            let logits = g.conv(fused, "head.classifier", linalg::ConvGeom::new(1, 1, 0, 1), true)?;
            g.resize_bilinear(logits, h, w)
        }
    }
}

/// Eval-mode segmentation logits for a batch, without recording gradients.
pub fn predict_logits(store: &ParamStore, config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.input(images.clone());
    let y = segmentation_forward(&mut g, config, x)?;
    Ok(g.value(y).clone())
}
