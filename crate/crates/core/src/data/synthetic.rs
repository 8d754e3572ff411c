//! Synthetic echo-like videos: a bright speckled sector with a dark elliptical
//! cavity that contracts from ED (first frame) to ES (last frame).

use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::{patient_split, FrameRecord, GrayImage, Manifest, Role, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub num_patients: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_patients: 40,
            frames_per_video: 5,
            image_size: 112,
            seed: 0,
        }
    }
}

/// Rotated ellipse in pixel coordinates (pixel `(x, y)` has centre `(x + 0.5, y + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    /// Semi-axis along the rotated y direction.
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

struct PatientShape {
    cx: f64,
    cy: f64,
    a_ed: f64,
    b_ed: f64,
    es_scale: f64,
    theta: f64,
    tissue: f64,
}

fn patient_shape(config: &SyntheticConfig, patient: usize) -> PatientShape {
    let s = config.image_size as f64;
    let mut r = rng::derived(config.seed, &[1, patient as u64]);
    PatientShape {
        cx: s * r.random_range(0.42..0.58),
        cy: s * r.random_range(0.48..0.58),
        a_ed: s * r.random_range(0.14..0.19),
        b_ed: s * r.random_range(0.22..0.29),
        es_scale: r.random_range(0.62..0.8),
        theta: r.random_range(-0.3..0.3),
        tissue: r.random_range(0.5..0.7),
    }
}

fn role_of(frame: usize, frames: usize) -> Role {
    if frame == 0 {
        Role::Ed
    } else if frame + 1 == frames {
        Role::Es
    } else {
        Role::Mid
    }
}

/// The cavity outline of `frame` for `patient`; axes shrink smoothly from ED to ES.
pub fn frame_ellipse(config: &SyntheticConfig, patient: usize, frame: usize) -> Ellipse {
    let shape = patient_shape(config, patient);
    let phase = frame as f64 / (config.frames_per_video - 1) as f64;
    let scale = 1.0 - (1.0 - shape.es_scale) * (1.0 - (std::f64::consts::PI * phase).cos()) / 2.0;
    Ellipse {
        cx: shape.cx,
        cy: shape.cy,
        a: shape.a_ed * scale,
        b: shape.b_ed * scale,
        theta: shape.theta,
    }
}

fn render(config: &SyntheticConfig, patient: usize, frame: usize) -> (GrayImage, GrayImage) {
    let n = config.image_size;
    let s = n as f64;
    let shape = patient_shape(config, patient);
    let cavity = frame_ellipse(config, patient, frame);
    let mut noise = rng::derived(config.seed, &[2, patient as u64, frame as u64]);
    let (apex_x, apex_y) = (s / 2.0, s * 0.04);
    let (radius, half_angle) = (s * 0.97, 0.78f64);

    let mut image = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let speckle: f64 = noise.random_range(-1.0..1.0);
            let (dx, dy) = (px - apex_x, py - apex_y);
            let in_sector = dy > 0.0 && dx.hypot(dy) <= radius && dx.atan2(dy).abs() <= half_angle;
            let inside = cavity.contains(px, py);
            let v = if inside {
                0.07 + 0.05 * speckle
            } else if in_sector {
                let depth = dx.hypot(dy) / radius;
                shape.tissue * (1.0 - 0.35 * depth) + 0.18 * speckle
            } else {
                0.0
            };
            image.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            mask.push(if inside { 255 } else { 0 });
        }
    }
    let img = GrayImage {
        width: n,
        height: n,
        pixels: image,
    };
    let msk = GrayImage {
        width: n,
        height: n,
        pixels: mask,
    };
    (img, msk)
}

/// Writes images, masks and `manifest.csv` under `out`. Output is a pure function of `config`.
pub fn generate_synthetic(config: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    if config.num_patients == 0 {
        return Err(Error::BadConfig("num_patients must be positive".into()));
    }
    if config.frames_per_video < 3 {
        return Err(Error::BadConfig("frames_per_video must be at least 3".into()));
    }
    if config.image_size < 8 {
        return Err(Error::BadConfig("image_size must be at least 8".into()));
    }
    let images = out.join("images");
    let masks = out.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }

    let ids: Vec<String> = (0..config.num_patients).map(|p| format!("P{p:04}")).collect();
    let splits = patient_split(&ids, (0.75, 0.125, 0.125), config.seed)?.as_map().into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<std::collections::BTreeMap<String, Split>>();

    let mut records = Vec::with_capacity(config.num_patients * config.frames_per_video);
    for (p, pid) in ids.iter().enumerate() {
        let video = format!("{pid}_A4C");
        for f in 0..config.frames_per_video {
            let role = role_of(f, config.frames_per_video);
            let (img, msk) = render(config, p, f);
            let image_path = PathBuf::from(format!("images/{pid}_f{f:02}.pgm"));
            super::write_pgm(&out.join(&image_path), &img)?;
            let mask_path = if role.is_labelled() {
                let mp = PathBuf::from(format!("masks/{pid}_f{f:02}.pgm"));
                super::write_pgm(&out.join(&mp), &msk)?;
                Some(mp)
            } else {
                None
            };
            records.push(FrameRecord {
                patient_id: pid.clone(),
                video_id: video.clone(),
                frame_index: f as u32,
                role,
                split: splits[pid],
                image_path,
                mask_path,
            });
        }
    }
    let manifest = Manifest::new(out.to_path_buf(), records)?;
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}
