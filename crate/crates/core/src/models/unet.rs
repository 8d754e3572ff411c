use super::graph::{Graph, Var};
use super::init::Init;
use super::linalg::ConvGeom;
use super::ModelConfig;
use crate::error::{Error, Result};

/// Encoder features: `skips[i]` has stride `2^i`, the bottleneck stride 16.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub skips: [Var; 4],
    pub bottleneck: Var,
}

fn declare_double(b: &mut Init, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    b.conv(&format!("{prefix}.conv1"), cin, cout, 3, false)?;
    b.norm(&format!("{prefix}.norm1"), cout)?;
    b.conv(&format!("{prefix}.conv2"), cout, cout, 3, false)?;
    b.norm(&format!("{prefix}.norm2"), cout)
}

fn double_conv(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 1..=2 {
        h = g.conv(h, &format!("{prefix}.conv{i}"), ConvGeom::same(3, 1), false)?;
        h = g.norm(h, &format!("{prefix}.norm{i}"))?;
        h = g.relu(h);
    }
    Ok(h)
}

pub(crate) fn declare_encoder(b: &mut Init, config: &ModelConfig) -> Result<()> {
    let w = config.unet_widths();
    let mut cin = config.in_channels;
    for (i, &c) in w[..4].iter().enumerate() {
        declare_double(b, &format!("encoder.stage{}", i + 1), cin, c)?;
        cin = c;
    }
    declare_double(b, "encoder.bottleneck", cin, w[4])
}

pub(crate) fn declare_decoder(b: &mut Init, config: &ModelConfig) -> Result<()> {
    let w = config.unet_widths();
    let mut cin = w[4];
    for i in 1..=4 {
        let skip = w[4 - i];
        b.conv(&format!("decoder.up{i}.conv"), cin, skip, 3, true)?;
        declare_double(b, &format!("decoder.up{i}"), 2 * skip, skip)?;
        cin = skip;
    }
    b.conv("decoder.out", cin, config.num_classes, 1, true)
}

pub fn unet_encoder_forward(g: &mut Graph<'_>, config: &ModelConfig, img: Var) -> Result<FeaturePyramid> {
    config.check_input(g.shape(img))?;
    let mut skips = Vec::with_capacity(4);
    let mut h = img;
    for i in 1..=4 {
        let f = double_conv(g, &format!("encoder.stage{i}"), h)?;
        skips.push(f);
        h = g.max_pool(f, 2, 2, 0)?;
    }
    let bottleneck = double_conv(g, "encoder.bottleneck", h)?;
    Ok(FeaturePyramid {
        skips: [skips[0], skips[1], skips[2], skips[3]],
        bottleneck,
    })
}

pub fn unet_decoder_forward(g: &mut Graph<'_>, _config: &ModelConfig, pyramid: &FeaturePyramid) -> Result<Var> {
    let mut h = pyramid.bottleneck;
    for i in 1..=4 {
        let skip = pyramid.skips[4 - i];
        let up = g.upsample_nearest(h, 2)?;
        let up = g.conv(up, &format!("decoder.up{i}.conv"), ConvGeom::same(3, 1), true)?;
        if g.shape(up) != g.shape(skip) {
            return Err(Error::ShapeMismatch(format!(
                "decoder level {i}: upsampled {:?} vs skip {:?}",
                g.shape(up),
                g.shape(skip)
            )));
        }
        let joined = g.concat(&[skip, up])?;
        h = double_conv(g, &format!("decoder.up{i}"), joined)?;
    }
    g.conv(h, "decoder.out", ConvGeom::new(1, 1, 0, 1), true)
}
