use super::graph::{Graph, Var};
use super::init::Init;
use super::linalg::ConvGeom;
use super::ModelConfig;
use crate::error::Result;

/// `(stride, dilation)` of the first block in each stage.
fn stage_plan(output_stride: usize) -> [(usize, usize); 4] {
    if output_stride == 8 {
        [(1, 1), (2, 1), (1, 2), (1, 4)]
    } else {
        [(1, 1), (2, 1), (2, 1), (1, 2)]
    }
}

fn needs_shortcut(cin: usize, cout: usize, stride: usize) -> bool {
    cin != cout || stride != 1
}

/// Blocks of every stage as `(prefix, cin, cout, stride, dilation)`.
fn blocks(config: &ModelConfig) -> Vec<(String, usize, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut cin = config.resnet_stem_width();
    for (s, (&cout, (stride, dilation))) in config
        .resnet_widths()
        .iter()
        .zip(stage_plan(config.output_stride))
        .enumerate()
    {
        for blk in 0..config.depth {
            let st = if blk == 0 { stride } else { 1 };
            out.push((format!("encoder.stage{}.block{}", s + 1, blk + 1), cin, cout, st, dilation));
            cin = cout;
        }
    }
    out
}

pub(crate) fn declare(b: &mut Init, config: &ModelConfig) -> Result<()> {
    let stem = config.resnet_stem_width();
    b.conv("encoder.stem.conv", config.in_channels, stem, 7, false)?;
    b.norm("encoder.stem.norm", stem)?;
    for (prefix, cin, cout, stride, _) in blocks(config) {
        let mid = (cout / 4).max(1);
        b.conv(&format!("{prefix}.conv1"), cin, mid, 1, false)?;
        b.norm(&format!("{prefix}.norm1"), mid)?;
        b.conv(&format!("{prefix}.conv2"), mid, mid, 3, false)?;
        b.norm(&format!("{prefix}.norm2"), mid)?;
        b.conv(&format!("{prefix}.conv3"), mid, cout, 1, false)?;
        b.norm(&format!("{prefix}.norm3"), cout)?;
        if needs_shortcut(cin, cout, stride) {
            b.conv(&format!("{prefix}.shortcut.conv"), cin, cout, 1, false)?;
            b.norm(&format!("{prefix}.shortcut.norm"), cout)?;
        }
    }
    Ok(())
}

/// Bottleneck residual block: 1×1 reduce, 3×3 (strided or dilated), 1×1 expand,
/// added to the input or to a 1×1 projection of it when shapes differ.
pub fn bottleneck_block(g: &mut Graph<'_>, prefix: &str, x: Var, stride: usize, dilation: usize) -> Result<Var> {
    let cin = g.shape(x)[1];
    let mut h = g.conv(x, &format!("{prefix}.conv1"), ConvGeom::new(1, 1, 0, 1), false)?;
    h = g.norm(h, &format!("{prefix}.norm1"))?;
    h = g.relu(h);
    h = g.conv(h, &format!("{prefix}.conv2"), ConvGeom::new(3, stride, dilation, dilation), false)?;
    h = g.norm(h, &format!("{prefix}.norm2"))?;
    h = g.relu(h);
    h = g.conv(h, &format!("{prefix}.conv3"), ConvGeom::new(1, 1, 0, 1), false)?;
    h = g.norm(h, &format!("{prefix}.norm3"))?;
    let cout = g.shape(h)[1];
    let skip = if needs_shortcut(cin, cout, stride) {
        let s = g.conv(x, &format!("{prefix}.shortcut.conv"), ConvGeom::new(1, stride, 0, 1), false)?;
        g.norm(s, &format!("{prefix}.shortcut.norm"))?
    } else {
        x
    };
    let sum = g.add(h, skip)?;
    Ok(g.relu(sum))
}

/// Stem and four residual stages; output stride 16 or 8 per the config.
pub fn resnet_atrous_forward(g: &mut Graph<'_>, config: &ModelConfig, img: Var) -> Result<Var> {
    config.check_input(g.shape(img))?;
    let mut h = g.conv(img, "encoder.stem.conv", ConvGeom::new(7, 2, 3, 1), false)?;
    h = g.norm(h, "encoder.stem.norm")?;
    h = g.relu(h);
    h = g.max_pool(h, 3, 2, 1)?;
    for (prefix, _, _, stride, dilation) in blocks(config) {
        h = bottleneck_block(g, &prefix, h, stride, dilation)?;
    }
    Ok(h)
}
