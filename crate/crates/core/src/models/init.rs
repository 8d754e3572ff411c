use rand_distr::{Distribution, Normal};

use super::params::ParamStore;
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// FNV-1a, used to key each tensor's random stream by its name.
fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Declares parameters in architecture order.
pub(crate) struct Init {
    store: ParamStore,
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            store: ParamStore::new(),
            seed,
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn he_normal(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut r = rng::derived(self.seed, &[name_key(name)]);
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut r)).collect();
        Tensor::from_vec(shape, data).expect("shape matches sample count")
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize, bias: bool) -> Result<()> {
        let name = format!("{prefix}.weight");
        let w = self.he_normal(&name, &[cout, cin, kernel, kernel], cin * kernel * kernel);
        self.store.insert(name, w, true)?;
        if bias {
            self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), true)?;
        }
        Ok(())
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) -> Result<()> {
        let name = format!("{prefix}.weight");
        let w = self.he_normal(&name, &[dout, din], din);
        self.store.insert(name, w, true)?;
        if bias {
            self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]), true)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0), true)?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[channels]), true)?;
        self.store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false)?;
        self.store.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0), false)?;
        Ok(())
    }
}
