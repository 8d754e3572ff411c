//! Contrastive pretraining and segmentation fine-tuning for echocardiography-style images.

pub mod augment;
pub mod data;
pub mod engine;
pub mod error;
pub mod interp;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
