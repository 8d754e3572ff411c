//! Manifest-driven dataset handling.
//!
//! A manifest lists one row per echo frame. Labelled frames (ED and ES) carry
//! a mask path; the frames in between (MID) are unlabelled and feed the
//! pretext task. Splits are patient-level.

mod image;
mod split;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

pub use image::{load_pair, read_pgm, resize_image, resize_mask, write_pgm, GrayImage};
pub use split::{patient_split, SplitAssignment};
pub use synthetic::{frame_ellipse, generate_synthetic, Ellipse, SyntheticConfig};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_HEADER: [&str; 7] = [
    "patient_id",
    "video_id",
    "frame_index",
    "role",
    "split",
    "image_path",
    "mask_path",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Ed,
    Es,
    Mid,
}

impl Role {
    pub fn is_labelled(self) -> bool {
        matches!(self, Role::Ed | Role::Es)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Ed => "ED",
            Role::Es => "ES",
            Role::Mid => "MID",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ED" => Ok(Role::Ed),
            "ES" => Ok(Role::Es),
            "MID" => Ok(Role::Mid),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub patient_id: String,
    pub video_id: String,
    pub frame_index: u32,
    pub role: Role,
    pub split: Split,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<FrameRecord>,
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedManifest {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads and validates a manifest file. `root` is the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| malformed(path, 1, e.to_string()))?
        .clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(malformed(
            path,
            1,
            format!(
                "header must be `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| malformed(path, line, e.to_string()))?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let frame_index = field(2)
            .parse::<u32>()
            .map_err(|_| malformed(path, line, format!("bad frame_index `{}`", field(2))))?;
        let role: Role = field(3).parse().map_err(|e| malformed(path, line, e))?;
        let split: Split = field(4).parse().map_err(|e| malformed(path, line, e))?;
        if field(0).is_empty() || field(1).is_empty() || field(5).is_empty() {
            return Err(malformed(path, line, "empty identifier or image path"));
        }
        let mask_path = match field(6) {
            "" => None,
            m => Some(PathBuf::from(m)),
        };
        records.push(FrameRecord {
            patient_id: field(0).to_string(),
            video_id: field(1).to_string(),
            frame_index,
            role,
            split,
            image_path: PathBuf::from(field(5)),
            mask_path,
        });
    }

    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    validate_records(&records).map_err(|(line, reason)| malformed(path, line, reason))?;
    Ok(Manifest { root, records })
}

/// Checks record invariants; on failure returns the 1-based file line (header is line 1).
fn validate_records(records: &[FrameRecord]) -> Result<(), (usize, String)> {
    let mut keys = HashSet::new();
    let mut patient_split: HashMap<&str, Split> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let line = i + 2;
        match (r.role.is_labelled(), r.mask_path.is_some()) {
            (true, false) => return Err((line, format!("{} frame without a mask path", r.role))),
            (false, true) => return Err((line, "MID frame must not carry a mask path".into())),
            _ => {}
        }
        if !keys.insert((r.video_id.as_str(), r.frame_index)) {
            return Err((
                line,
                format!("duplicate frame ({}, {})", r.video_id, r.frame_index),
            ));
        }
        match patient_split.get(r.patient_id.as_str()) {
            Some(&s) if s != r.split => {
                return Err((
                    line,
                    format!(
                        "patient {} appears in both {} and {}",
                        r.patient_id, s, r.split
                    ),
                ))
            }
            Some(_) => {}
            None => {
                patient_split.insert(&r.patient_id, r.split);
            }
        }
    }
    Ok(())
}

impl Manifest {
    pub fn new(root: PathBuf, records: Vec<FrameRecord>) -> Result<Self> {
        validate_records(&records).map_err(|(line, reason)| Error::MalformedManifest {
            path: root.join("<memory>"),
            line,
            reason,
        })?;
        Ok(Manifest { root, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let to_io = |e: csv::Error| Error::io("encoding manifest", e.into());
        w.write_record(MANIFEST_HEADER).map_err(to_io)?;
        for r in &self.records {
            let mask = r
                .mask_path
                .as_ref()
                .map(|p| path_str(p))
                .unwrap_or_default();
            w.write_record([
                r.patient_id.as_str(),
                r.video_id.as_str(),
                &r.frame_index.to_string(),
                &r.role.to_string(),
                &r.split.to_string(),
                &path_str(&r.image_path),
                &mask,
            ])
            .map_err(to_io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("encoding manifest", e.into_error()))?;
        std::fs::write(path, bytes)
            .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn labelled(&self, split: Split) -> Vec<FrameRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.role.is_labelled())
            .cloned()
            .collect()
    }

    /// Distinct patient ids of `split`, sorted.
    pub fn patients(&self, split: Split) -> Vec<String> {
        let mut ids: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.patient_id.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Number of TRAIN patients kept at `fraction` out of `total`: `floor(fraction * total)`, at least 1.
pub fn fraction_count(total: usize, fraction: f64) -> usize {
    (((fraction * total as f64) + 1e-9).floor() as usize).clamp(1, total.max(1))
}

/// Keeps a seeded subset of TRAIN patients (all of their records); VAL and TEST are untouched.
///
/// The subset is a prefix of one fixed seeded permutation, so for the same
/// seed smaller fractions always select subsets of larger ones.
pub fn fraction_subsample(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    let mut patients = manifest.patients(Split::Train);
    if patients.is_empty() {
        return Ok(manifest.clone());
    }
    let keep = fraction_count(patients.len(), fraction);
    patients.shuffle(&mut rng::derived(seed, &[0xF4AC]));
    let chosen: HashSet<&str> = patients[..keep].iter().map(String::as_str).collect();
    Ok(Manifest {
        root: manifest.root.clone(),
        records: manifest
            .records
            .iter()
            .filter(|r| r.split != Split::Train || chosen.contains(r.patient_id.as_str()))
            .cloned()
            .collect(),
    })
}

/// Draws one MID frame per video, uniformly under `seed`. Videos are visited in first-appearance order.
pub fn sample_pretext_frames(manifest: &Manifest, seed: u64) -> Result<Vec<FrameRecord>> {
    let mut order: Vec<&str> = Vec::new();
    let mut mids: HashMap<&str, Vec<&FrameRecord>> = HashMap::new();
    for r in &manifest.records {
        let entry = mids.entry(r.video_id.as_str()).or_insert_with(|| {
            order.push(r.video_id.as_str());
            Vec::new()
        });
        if r.role == Role::Mid {
            entry.push(r);
        }
    }
    let mut rng = rng::derived(seed, &[0x9E7E]);
    order
        .into_iter()
        .map(|video| {
            let frames = &mids[video];
            if frames.is_empty() {
                return Err(Error::NoMidFrames(video.to_string()));
            }
            Ok(frames[rng.random_range(0..frames.len())].clone())
        })
        .collect()
}
