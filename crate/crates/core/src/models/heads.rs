use super::graph::{Graph, Var};
use super::init::Init;
use super::ModelConfig;
use crate::error::{Error, Result};

pub(crate) fn declare(b: &mut Init, prefix: &str, din: usize, config: &ModelConfig) -> Result<()> {
    b.linear(&format!("{prefix}.fc1"), din, config.proj_hidden, false)?;
    b.norm(&format!("{prefix}.norm"), config.proj_hidden)?;
    b.linear(&format!("{prefix}.fc2"), config.proj_hidden, config.proj_dim, true)
}

fn mlp(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    if g.shape(x).len() != 2 {
        return Err(Error::Shape(format!("{prefix} expects B×D input, got {:?}", g.shape(x))));
    }
    let h = g.linear(x, &format!("{prefix}.fc1"), false)?;
    let h = g.norm(h, &format!("{prefix}.norm"))?;
    let h = g.relu(h);
    g.linear(h, &format!("{prefix}.fc2"), true)
}

/// `B×D → B×proj_dim`: linear, norm, ReLU, linear.
pub fn projection_forward(g: &mut Graph<'_>, emb: Var) -> Result<Var> {
    mlp(g, "projector", emb)
}

/// Same two-layer form on projections; BYOL online branch only.
pub fn prediction_forward(g: &mut Graph<'_>, z: Var) -> Result<Var> {
    mlp(g, "predictor", z)
}
