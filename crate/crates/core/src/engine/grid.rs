//! The pretraining × network × data-fraction experiment grid.
//!
//! Each (framework, encoder) pretext model is trained once, on first use,
//! and its `best.ckpt` initializes the encoder of every fine-tuning cell for
//! that pair. Each cell fine-tunes, then scores its own `best.ckpt` on the
//! TEST split. Keys set in the base config apply to every stage, so an
//! explicit `lr` or `epochs` overrides the per-task defaults everywhere.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::load_checkpoint;
use super::config::{RawConfig, Task};
use super::evaluate::evaluate_checkpoint;
use super::train::{run_task, RunPaths};
use crate::data::{load_manifest, Split};
use crate::error::{Error, Result};
use crate::models::EncoderKind;

pub const GRID_HEADER: &str = "pretraining,network,fraction,dice_mean,dice_sd";
pub const PRETRAININGS: [Option<Task>; 3] = [None, Some(Task::Simclr), Some(Task::Byol)];
pub const NETWORKS: [EncoderKind; 2] = [EncoderKind::ResnetAtrous, EncoderKind::Unet];
pub const FRACTIONS: [f64; 4] = [1.0, 0.5, 0.25, 0.05];

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub pretraining: String,
    pub network: String,
    pub fraction: f64,
    pub dice_mean: f64,
    pub dice_sd: f64,
}

fn write_table(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut text = format!("{GRID_HEADER}\n");
    for r in rows {
        writeln!(text, "{},{},{},{},{}", r.pretraining, r.network, r.fraction, r.dice_mean, r.dice_sd)
            .expect("String write");
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn stage_config(base: &RawConfig, task: Task, encoder: EncoderKind, out_dir: &Path) -> RawConfig {
    let mut raw = base.clone();
    raw.set("task", task);
    raw.set("encoder", encoder.network());
    raw.set("out_dir", out_dir.display());
    raw.remove("resume");
    raw.remove("backbone");
    raw
}

/// Runs all cells and writes `<out>/grid.csv`, rewritten after every cell.
/// Returns the rows in table order.
pub fn run_grid(base: &RawConfig, out: &Path) -> Result<Vec<GridRow>> {
    let out = std::path::absolute(out).map_err(|e| Error::io(format!("resolving {}", out.display()), e))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut probe = base.clone();
    probe.set("task", Task::Segment);
    let manifest = load_manifest(probe.resolve()?.manifest_path()?)?;
    if manifest.labelled(Split::Test).is_empty() {
        return Err(Error::EmptySplit(Split::Test.to_string()));
    }

    let table = out.join("grid.csv");
    let mut pretext: HashMap<(&'static str, &'static str), PathBuf> = HashMap::new();
    let mut rows = Vec::new();
    write_table(&table, &rows)?;
    for pre in PRETRAININGS {
        for net in NETWORKS {
            let backbone = match pre {
                None => None,
                Some(task) => {
                    let key = (task_name(task), net.network());
                    if !pretext.contains_key(&key) {
                        let dir = out.join("pretrain").join(format!("{}_{}", key.0, key.1));
                        run_task(&stage_config(base, task, net, &dir).resolve()?)?;
                        pretext.insert(key, RunPaths::new(&dir).best);
                    }
                    Some(pretext[&key].clone())
                }
            };
            let pre_name = pre.map_or("none", task_name);
            for fraction in FRACTIONS {
                let dir = out.join("cells").join(format!("{pre_name}_{}_{fraction}", net.network()));
                let mut raw = stage_config(base, Task::Segment, net, &dir);
                raw.set("fraction", fraction);
                if let Some(b) = &backbone {
                    raw.set("backbone", b.display());
                }
                run_task(&raw.resolve()?)?;
                let best = load_checkpoint(&RunPaths::new(&dir).best)?;
                let report = evaluate_checkpoint(&best, &manifest, Split::Test, Some(&dir.join("test_dice.csv")))?;
                rows.push(GridRow {
                    pretraining: pre_name.to_string(),
                    network: net.network().to_string(),
                    fraction,
                    dice_mean: report.mean,
                    dice_sd: report.sd,
                });
                write_table(&table, &rows)?;
            }
        }
    }
    Ok(rows)
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Simclr => "simclr",
        Task::Byol => "byol",
        Task::Segment => "segment",
    }
}

pub fn read_grid(path: &Path) -> Result<Vec<GridRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |line: usize, reason: &str| Error::MalformedManifest {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(GRID_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            if f.len() != 5 {
                return Err(bad(i + 2, "expected 5 fields"));
            }
            Ok(GridRow {
                pretraining: f[0].to_string(),
                network: f[1].to_string(),
                fraction: num(f[2])?,
                dice_mean: num(f[3])?,
                dice_sd: num(f[4])?,
            })
        })
        .collect()
}
