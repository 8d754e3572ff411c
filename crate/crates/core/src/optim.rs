//! Adam for pretext training and MADGRAD for fine-tuning.
//!
//! Optimizer state is keyed by parameter name and created on the first
//! step, covering every trainable tensor in the store.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Madgrad,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Madgrad => "madgrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "madgrad" => Ok(OptimizerKind::Madgrad),
            other => Err(Error::BadConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// MADGRAD momentum; Adam uses `beta1`/`beta2`.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn madgrad(lr: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Madgrad,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }

    /// Defaults for `kind` at learning rate `lr`.
    pub fn for_kind(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr),
            OptimizerKind::Madgrad => Self::madgrad(lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter state slots, in store order.
type Slots = IndexMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    step_count: u64,
    /// Adam: first and second moments. MADGRAD: gradient sum, squared-gradient sum, initial values.
    slots: Vec<Slots>,
}

const ADAM_SLOTS: [&str; 2] = ["m", "v"];
const MADGRAD_SLOTS: [&str; 3] = ["s", "nu", "x0"];

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        let n = match config.kind {
            OptimizerKind::Adam => ADAM_SLOTS.len(),
            OptimizerKind::Madgrad => MADGRAD_SLOTS.len(),
        };
        Ok(Optimizer {
            config,
            step_count: 0,
            slots: vec![Slots::new(); n],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn slot_names(&self) -> &'static [&'static str] {
        match self.config.kind {
            OptimizerKind::Adam => &ADAM_SLOTS,
            OptimizerKind::Madgrad => &MADGRAD_SLOTS,
        }
    }

    fn ensure_state(&mut self, store: &ParamStore) {
        for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
            for (i, slot) in self.slots.iter_mut().enumerate() {
                if !slot.contains_key(name) {
                    let init = if self.config.kind == OptimizerKind::Madgrad && i == 2 {
                        p.value.clone()
                    } else {
                        Tensor::zeros(p.value.shape())
                    };
                    slot.insert(name.to_string(), init);
                }
            }
        }
    }

    /// One update from the gradients in `store`. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.ensure_state(store);
        let k = self.step_count;
        let c = self.config;
        for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            match c.kind {
                OptimizerKind::Adam => {
                    let t = (k + 1) as i32;
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let [m, v] = &mut self.slots[..] else { unreachable!() };
                    let m = m.get_mut(name).expect("state created above").data_mut();
                    let v = v.get_mut(name).expect("state created above").data_mut();
                    let x = p.value.data_mut();
                    for (((x, &g), m), v) in x.iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                        let g = g + c.weight_decay * *x;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::Madgrad => {
                    let lamb = c.lr * ((k + 1) as f64).sqrt();
                    let [s, nu, x0] = &mut self.slots[..] else { unreachable!() };
                    let s = s.get_mut(name).expect("state created above").data_mut();
                    let nu = nu.get_mut(name).expect("state created above").data_mut();
                    let x0 = x0.get(name).expect("state created above").data();
                    let x = p.value.data_mut();
                    for ((((x, &g), s), nu), &x0) in x.iter_mut().zip(p.grad.data()).zip(s).zip(nu).zip(x0) {
                        let g = g + c.weight_decay * *x;
                        *nu += lamb * g * g;
                        *s += lamb * g;
                        let z = x0 - *s / (nu.cbrt() + c.eps);
                        *x = c.momentum * *x + (1.0 - c.momentum) * z;
                    }
                }
            }
            if !p.value.is_finite() {
                return Err(Error::NonFiniteGradient(format!("{name} (update produced non-finite values)")));
            }
        }
        self.step_count += 1;
        Ok(())
    }

    /// State tensors named `optim.<kind>.<slot>.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let kind = self.config.kind;
        self.slot_names()
            .iter()
            .zip(&self.slots)
            .flat_map(|(slot, map)| {
                map.iter()
                    .map(move |(name, t)| (format!("optim.{kind}.{slot}.{name}"), t.clone()))
            })
            .collect()
    }

    /// Restores state written by [`Optimizer::state_tensors`]. Tensors for
    /// other optimizer kinds are ignored.
    pub fn load_state(&mut self, step_count: u64, tensors: &[(String, Tensor)]) -> Result<()> {
        let kind = self.config.kind.to_string();
        let names = self.slot_names();
        let mut slots = vec![Slots::new(); names.len()];
        for (full, t) in tensors {
            let Some(rest) = full.strip_prefix(&format!("optim.{kind}.")) else {
                continue;
            };
            let (slot, param) = rest
                .split_once('.')
                .ok_or_else(|| Error::BadConfig(format!("malformed optimizer tensor name {full}")))?;
            let i = names
                .iter()
                .position(|s| *s == slot)
                .ok_or_else(|| Error::BadConfig(format!("unknown optimizer slot in {full}")))?;
            slots[i].insert(param.to_string(), t.clone());
        }
        let n = slots[0].len();
        if slots.iter().any(|s| s.len() != n) || (n == 0 && step_count > 0) {
            return Err(Error::MissingTensor(vec![format!("optim.{kind}.* (incomplete state)")]));
        }
        self.slots = slots;
        self.step_count = step_count;
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for slot in &mut self.slots {
            slot.values_mut().for_each(Tensor::round_to_f32);
        }
    }
}
