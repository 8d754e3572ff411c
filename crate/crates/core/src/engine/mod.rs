//! Training orchestration: config files, checkpoints, the pretext and
//! fine-tuning loops, evaluation and the experiment grid.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod grid;
pub mod metrics;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config, Preset, RawConfig, Task, TrainConfig};
pub use evaluate::{evaluate, evaluate_checkpoint, Predictor, SegModel};
pub use grid::{run_grid, GridRow};
pub use metrics::{read_metrics, MetricsRow};
pub use train::{
    byol_step, finetune_segmentation, pretrain_byol, pretrain_simclr, run_task, simclr_step, transfer_backbone,
    RunPaths,
};
