use super::graph::{Graph, Var};
use super::init::Init;
use super::linalg::ConvGeom;
use super::ModelConfig;
use crate::error::{Error, Result};

pub(crate) fn declare(b: &mut Init, config: &ModelConfig) -> Result<()> {
    let cin = config.resnet_widths()[3];
    let c = config.aspp_width();
    b.conv("head.aspp.branch0.conv", cin, c, 1, false)?;
    b.norm("head.aspp.branch0.norm", c)?;
    for i in 1..=3 {
        b.conv(&format!("head.aspp.branch{i}.conv"), cin, c, 3, false)?;
        b.norm(&format!("head.aspp.branch{i}.norm"), c)?;
    }
    b.conv("head.aspp.pool.conv", cin, c, 1, true)?;
    b.conv("head.aspp.fuse.conv", 5 * c, c, 1, false)?;
    b.norm("head.aspp.fuse.norm", c)?;
    b.conv("head.classifier", c, config.num_classes, 1, true)
}

/// Five parallel branches (1×1, three dilated 3×3, image pooling),
/// concatenated and fused by a 1×1 conv.
pub fn aspp_forward(g: &mut Graph<'_>, config: &ModelConfig, feat: Var) -> Result<Var> {
    let &[_, _, h, w] = g.shape(feat) else {
        return Err(Error::Shape(format!("ASPP expects B×C×H×W, got {:?}", g.shape(feat))));
    };
    if h == 0 || w == 0 {
        return Err(Error::Shape("ASPP input has an empty spatial extent".into()));
    }
    let mut branches = Vec::with_capacity(5);
    let b0 = g.conv(feat, "head.aspp.branch0.conv", ConvGeom::new(1, 1, 0, 1), false)?;
    let b0 = g.norm(b0, "head.aspp.branch0.norm")?;
    branches.push(g.relu(b0));
    for (i, rate) in config.aspp_rates().into_iter().enumerate() {
        let bi = g.conv(feat, &format!("head.aspp.branch{}.conv", i + 1), ConvGeom::same(3, rate), false)?;
        let bi = g.norm(bi, &format!("head.aspp.branch{}.norm", i + 1))?;
        branches.push(g.relu(bi));
    }
    // No normalization on the pooled branch: its statistics would span only the batch.
    let pooled = g.global_avg_pool(feat)?;
    let pooled = g.conv(pooled, "head.aspp.pool.conv", ConvGeom::new(1, 1, 0, 1), true)?;
    let pooled = g.relu(pooled);
    branches.push(g.resize_bilinear(pooled, h, w)?);
    let cat = g.concat(&branches)?;
    let fused = g.conv(cat, "head.aspp.fuse.conv", ConvGeom::new(1, 1, 0, 1), false)?;
    let fused = g.norm(fused, "head.aspp.fuse.norm")?;
    Ok(g.relu(fused))
}
