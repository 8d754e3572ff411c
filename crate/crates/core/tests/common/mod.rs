#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use echoclr::data::{generate_synthetic, Manifest, Split, SyntheticConfig};

/// Synthetic dataset under `dir/data`; returns the manifest path.
pub fn dataset(dir: &Path, patients: usize, frames: usize, size: usize) -> PathBuf {
    let out = dir.join("data");
    generate_synthetic(
        &SyntheticConfig {
            num_patients: patients,
            frames_per_video: frames,
            image_size: size,
            seed: 0,
        },
        &out,
    )
    .unwrap();
    out.join("manifest.csv")
}

/// Rewrites a manifest with every record moved to `split`.
pub fn all_in_split(manifest: &Path, split: Split) {
    let m = echoclr::data::load_manifest(manifest).unwrap();
    let records = m
        .records
        .into_iter()
        .map(|mut r| {
            r.split = split;
            r
        })
        .collect();
    Manifest::new(m.root, records).unwrap().write(manifest).unwrap();
}

/// Writes `lines` as a config file and returns its path.
pub fn config(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

pub fn bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
