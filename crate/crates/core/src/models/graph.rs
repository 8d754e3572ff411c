//! Recording forward pass with reverse-mode gradients.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every layer
//! applied, and [`Graph::backward`] walks the tape in reverse. Parameter
//! gradients and running-statistic updates come back as a [`Gradients`]
//! value that is applied to the store afterwards, so the store is never
//! mutated while a forward pass holds it.

use std::collections::HashMap;

use super::linalg::ConvGeom;
use super::ops;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    UpNearest { x: Var, factor: usize },
    Bilinear { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::UpNearest { x, .. }
            | Op::Bilinear { x }
            | Op::GlobalAvgPool { x }
            | Op::Reshape { x } => vec![*x],
            Op::Add { a, b } => vec![*a, *b],
            Op::Concat { parts } => parts.clone(),
        }
    }
}

struct Node {
    value: Option<Tensor>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics to fold into a layer's running averages.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub running_mean: String,
    pub running_var: String,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl StatUpdate {
    pub fn commit(&self, store: &mut ParamStore) -> Result<()> {
        for (name, batch) in [(&self.running_mean, &self.batch_mean), (&self.running_var, &self.batch_var)] {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(vec![name.clone()]))?;
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - ops::NORM_MOMENTUM) * *r + ops::NORM_MOMENTUM * b;
            }
        }
        Ok(())
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    stats: Vec<StatUpdate>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref().expect("forward values live until backward")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::input_grad`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::MissingTensor(vec![name.to_string()]))?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        let (_, p) = self.store.at(idx);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, geom: ConvGeom, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        let y = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Conv { x, w, b, geom }, needs))
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let rm_name = format!("{prefix}.running_mean");
        let rv_name = format!("{prefix}.running_var");
        let (y, xhat, inv_std, batch_stats) = match self.mode {
            Mode::Train => {
                let f = ops::norm_train_forward(self.value(x), self.value(gamma), self.value(beta))?;
                self.stats.push(StatUpdate {
                    running_mean: rm_name,
                    running_var: rv_name,
                    batch_mean: f.batch_mean,
                    batch_var: f.batch_var,
                });
                (f.y, f.xhat, f.inv_std, true)
            }
            Mode::Eval => {
                let (y, xhat, inv_std) = ops::norm_eval_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    self.store.value(&rm_name)?,
                    self.store.value(&rv_name)?,
                )?;
                (y, xhat, inv_std, false)
            }
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu { x }, needs)
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool_forward(self.value(x), kernel, stride, pad)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, needs))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_forward(&values)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest_forward(self.value(x), factor)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::UpNearest { x, factor }, needs))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_forward(self.value(x), out_h, out_w)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::Bilinear { x }, needs))
    }

    /// `B×C×H×W → B×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::GlobalAvgPool { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::Reshape { x }, needs))
    }

    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.param(&format!("{prefix}.bias"))?) } else { None };
        let y = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Linear { x, w, b }, needs))
    }

    /// Number of recorded operations that read `v`.
    pub fn consumer_count(&self, v: Var) -> usize {
        self.nodes.iter().map(|n| n.op.inputs().iter().filter(|&&i| i == v).count()).sum()
    }

    /// Hash of every ReLU on/off state and max-pool winner. Two forwards with
    /// equal signatures lie in the same piecewise-smooth region.
    pub fn activation_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        for n in &self.nodes {
            match &n.op {
                Op::Relu { .. } => {
                    if let Some(y) = &n.value {
                        for chunk in y.data().chunks(64) {
                            mix(chunk.iter().enumerate().fold(0u64, |a, (i, v)| a | (((*v > 0.0) as u64) << i)));
                        }
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }

    /// Running-statistic updates recorded so far (train mode only).
    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stats
    }

    pub fn into_stat_updates(self) -> Vec<StatUpdate> {
        self.stats
    }

    /// Reverse pass seeded with `d loss / d out`.
    pub fn backward(mut self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::ShapeMismatch(format!(
                "seed gradient {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        if !seed.is_finite() {
            return Err(Error::NonFiniteGradient("loss gradient".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        existing.add_assign(&t);
                        Ok(())
                    }
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            let val = |v: Var| self.nodes[v.0].value.as_ref().expect("input values outlive consumers");
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let cg = ops::conv2d_backward(val(*x), val(*w), &g, *geom, need_x)?;
                    if let Some(gx) = cg.x {
                        acc(*x, gx)?;
                    }
                    acc(*w, cg.w)?;
                    if let Some(b) = b {
                        acc(*b, cg.b)?;
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dg, db) = ops::norm_backward(&g, xhat, inv_std, val(*gamma), *batch_stats)?;
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::Relu { x } => {
                    let y = node.value.as_ref().expect("relu output kept for backward");
                    let mut dx = g;
                    for (d, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        if *yv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(*x, dx)?;
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::max_pool_backward(&self.nodes[x.0].shape, &g, argmax)?;
                    acc(*x, dx)?;
                }
                Op::Add { a, b } => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Concat { parts } => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.nodes[p.0].shape.clone()).collect();
                    for (p, d) in parts.iter().zip(ops::concat_backward(&shapes, &g)?) {
                        acc(*p, d)?;
                    }
                }
                Op::UpNearest { x, factor } => {
                    let dx = ops::upsample_nearest_backward(&self.nodes[x.0].shape, &g, *factor)?;
                    acc(*x, dx)?;
                }
                Op::Bilinear { x } => {
                    let dx = ops::bilinear_backward(&self.nodes[x.0].shape, &g)?;
                    acc(*x, dx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_backward(&self.nodes[x.0].shape, &g)?;
                    acc(*x, dx)?;
                }
                Op::Reshape { x } => {
                    let dx = g.reshape(&self.nodes[x.0].shape)?;
                    acc(*x, dx)?;
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), &g)?;
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                    if let Some(b) = b {
                        acc(*b, db)?;
                    }
                }
            }
            // Consumers of node i all sit later on the tape, so its value is dead now.
            self.nodes[i].value = None;
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&idx, &v)| grads[v.0].take().map(|g| (idx, g)))
            .collect();
        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| matches!(n.op, Op::Leaf) && n.needs_grad && !self.param_vars.values().any(|v| v.0 == *i))
            .filter_map(|(i, _)| grads[i].take().map(|g| (i, g)))
            .collect();
        Ok(Gradients {
            params,
            inputs,
            stats: self.stats,
        })
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    params: Vec<(usize, Tensor)>,
    inputs: HashMap<usize, Tensor>,
    stats: Vec<StatUpdate>,
}

impl Gradients {
    /// Gradient of an input created with [`Graph::input_with_grad`].
    pub fn input_grad(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }

    /// Gradient for a parameter by name, if it took part in the pass.
    pub fn param_grad<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Tensor> {
        let idx = store.index_of(name)?;
        self.params.iter().find(|(i, _)| *i == idx).map(|(_, g)| g)
    }

    /// Adds parameter gradients into `store` and folds in running statistics.
    pub fn apply(self, store: &mut ParamStore) -> Result<()> {
        for (idx, g) in self.params {
            let (name, p) = store.at_mut(idx);
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            p.grad.add_assign(&g);
        }
        for s in &self.stats {
            s.commit(store)?;
        }
        Ok(())
    }
}
