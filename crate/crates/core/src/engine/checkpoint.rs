//! Binary checkpoint format.
//!
//! Layout: magic `CSEG`, u32 version, u32 task tag, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, u8 rank, rank × u32 dims and the
//! row-major f32 data; a trailing CRC-32 covers everything before it. All
//! integers are little-endian.
//!
//! Run metadata travels as ordinary tensors under `meta.`: the config echo as
//! one byte per element, counters and the RNG snapshot as 16-bit chunks (each
//! exact in f32). BYOL target weights use the `target.` prefix and optimizer
//! state the `optim.` prefix.

use std::fs;
use std::path::Path;

use super::config::{RawConfig, Task, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{EncoderKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u32 = 1;

const META_CONFIG: &str = "meta.config";
const META_COUNTERS: &str = "meta.counters";
const META_BEST: &str = "meta.best";
const META_RNG: &str = "meta.rng";
const TARGET_PREFIX: &str = "target.";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    /// Resolved config as canonical `key=value` text.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
    /// BYOL target network, names without the `target.` prefix.
    pub target: Vec<(String, Tensor)>,
    /// Optimizer state named `optim.<kind>.<slot>.<param>`.
    pub optimizer: Vec<(String, Tensor)>,
    pub optimizer_steps: u64,
    pub rng: Option<[u64; 7]>,
    /// Epochs completed when the checkpoint was written.
    pub epoch: u64,
    /// Best selection metric seen so far (VAL Dice or loss).
    pub best: Option<f64>,
}

impl Checkpoint {
    pub fn new(task: Task, config: String, params: &ParamStore) -> Self {
        Checkpoint {
            task,
            config,
            params: params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
            target: Vec::new(),
            optimizer: Vec::new(),
            optimizer_steps: 0,
            rng: None,
            epoch: 0,
            best: None,
        }
    }

    /// The run config stored in the checkpoint.
    pub fn train_config(&self) -> Result<TrainConfig> {
        RawConfig::parse(&self.config, "")?.resolve()
    }

    pub fn encoder_kind(&self) -> Result<EncoderKind> {
        Ok(self.train_config()?.model.encoder)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every tensor of `store` with the checkpoint value of the same name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        load_named(&self.params, store)
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(4 + self.params.len() + self.target.len() + self.optimizer.len());
        let bytes: Vec<f64> = self.config.bytes().map(f64::from).collect();
        out.push((META_CONFIG.to_string(), vector(bytes)));
        out.push((META_COUNTERS.to_string(), vector(chunks(&[self.epoch, self.optimizer_steps]))));
        if let Some(best) = self.best {
            out.push((META_BEST.to_string(), vector(chunks(&[best.to_bits()]))));
        }
        if let Some(words) = self.rng {
            out.push((META_RNG.to_string(), vector(chunks(&words))));
        }
        out.extend(self.params.iter().cloned());
        out.extend(self.target.iter().map(|(n, t)| (format!("{TARGET_PREFIX}{n}"), t.clone())));
        out.extend(self.optimizer.iter().cloned());
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.task.tag().to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::BadConfig(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Shape(format!("{name}: rank too large")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Shape(format!("{name}: dimension too large")))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt(0, "bad magic, expected CSEG"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(4, format!("unsupported format version: expected {VERSION}, found {version}")));
        }
        if bytes.len() < 16 {
            return Err(corrupt(bytes.len(), "truncated header"));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body]);
        if stored != actual {
            return Err(corrupt(body, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let r = &mut Reader { bytes: &bytes[..body], pos: 8 };
        let tag = r.u32()?;
        let task = Task::from_tag(tag).ok_or_else(|| corrupt(8, format!("unknown task tag {tag}")))?;
        let count = r.u32()? as usize;

        let mut ckpt = Checkpoint {
            task,
            config: String::new(),
            params: Vec::new(),
            target: Vec::new(),
            optimizer: Vec::new(),
            optimizer_steps: 0,
            rng: None,
            epoch: 0,
            best: None,
        };
        let mut saw_config = false;
        let mut saw_counters = false;
        for _ in 0..count {
            let at = r.pos;
            let (name, t) = r.tensor()?;
            match name.as_str() {
                META_CONFIG => {
                    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
                    ckpt.config = String::from_utf8(bytes).map_err(|_| corrupt(at, "config echo is not UTF-8"))?;
                    saw_config = true;
                }
                META_COUNTERS => {
                    let [epoch, steps] = unchunk::<2>(&t).ok_or_else(|| corrupt(at, "bad meta.counters"))?;
                    (ckpt.epoch, ckpt.optimizer_steps) = (epoch, steps);
                    saw_counters = true;
                }
                META_BEST => {
                    let [bits] = unchunk::<1>(&t).ok_or_else(|| corrupt(at, "bad meta.best"))?;
                    ckpt.best = Some(f64::from_bits(bits));
                }
                META_RNG => ckpt.rng = Some(unchunk::<7>(&t).ok_or_else(|| corrupt(at, "bad meta.rng"))?),
                n if n.starts_with("meta.") => return Err(corrupt(at, format!("unknown metadata tensor {n}"))),
                n if n.starts_with(TARGET_PREFIX) => ckpt.target.push((n[TARGET_PREFIX.len()..].to_string(), t)),
                n if n.starts_with(OPTIM_PREFIX) => ckpt.optimizer.push((name, t)),
                _ => ckpt.params.push((name, t)),
            }
        }
        if r.pos != body {
            return Err(corrupt(r.pos, "trailing bytes after the tensor table"));
        }
        if !saw_config || !saw_counters {
            return Err(corrupt(body, "missing meta.config or meta.counters"));
        }
        Ok(ckpt)
    }
}

/// Copies named tensors into `store`, which must be fully covered with equal shapes.
pub(crate) fn load_named(tensors: &[(String, Tensor)], store: &mut ParamStore) -> Result<()> {
    let missing: Vec<String> = store
        .names()
        .filter(|n| !tensors.iter().any(|(m, _)| m == n))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTensor(missing));
    }
    for (name, t) in tensors {
        if let Some(p) = store.get_mut(name) {
            if p.value.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!("{name}: model {:?}, checkpoint {:?}", p.value.shape(), t.shape())));
            }
            p.value = t.clone();
        }
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file behind.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        offset,
        reason: reason.into(),
    }
}

fn vector(data: Vec<f64>) -> Tensor {
    let n = data.len();
    Tensor::from_vec(&[n], data).expect("length matches")
}

fn chunks(words: &[u64]) -> Vec<f64> {
    words
        .iter()
        .flat_map(|w| (0..4).map(move |i| ((w >> (16 * i)) & 0xFFFF) as f64))
        .collect()
}

fn unchunk<const N: usize>(t: &Tensor) -> Option<[u64; N]> {
    if t.shape() != [4 * N] {
        return None;
    }
    let mut out = [0u64; N];
    for (k, &v) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&v) || v.fract() != 0.0 {
            return None;
        }
        out[k / 4] |= (v as u64) << (16 * (k % 4));
    }
    Some(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(self.pos, format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| corrupt(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(at, format!("{name}: shape overflows")))?;
        let raw = self.take(numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| corrupt(at, format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert("encoder.w", Tensor::from_vec(&[2, 2], vec![0.5, -1.25, 3.0, 1e-3]).unwrap(), true).unwrap();
        store.insert("encoder.norm.running_var", Tensor::full(&[3], 1.0), false).unwrap();
        store.round_to_f32();
        let mut c = Checkpoint::new(Task::Byol, "task=byol\nseed=3\n".into(), &store);
        c.target = vec![("encoder.w".into(), Tensor::full(&[2, 2], 0.25))];
        c.optimizer = vec![("optim.adam.m.encoder.w".into(), Tensor::zeros(&[2, 2]))];
        c.optimizer_steps = 70_000;
        c.rng = Some([u64::MAX, 1, 2, 3, 4, 1 << 40, 0]);
        c.epoch = 4;
        c.best = Some(-0.123456789);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_and_crc_guards() {
        let bytes = sample().to_bytes().unwrap();
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        match Checkpoint::from_bytes(&bumped) {
            Err(Error::CorruptCheckpoint { offset: 4, reason }) => {
                assert!(reason.contains("expected 1") && reason.contains("found 2"), "{reason}")
            }
            r => panic!("{r:?}"),
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CorruptCheckpoint { offset: 0, .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint { .. })));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint { .. })), "cut {cut}");
        }
    }

    #[test]
    fn load_into_reports_missing_and_shape() {
        let c = sample();
        let mut store = ParamStore::new();
        store.insert("encoder.w", Tensor::zeros(&[2, 2]), true).unwrap();
        c.load_into(&mut store).unwrap();
        assert_eq!(store.value("encoder.w").unwrap(), c.param("encoder.w").unwrap());
        store.insert("head.x", Tensor::zeros(&[1]), true).unwrap();
        assert!(matches!(c.load_into(&mut store), Err(Error::MissingTensor(n)) if n == ["head.x"]));
        let mut wrong = ParamStore::new();
        wrong.insert("encoder.w", Tensor::zeros(&[4]), true).unwrap();
        assert!(matches!(c.load_into(&mut wrong), Err(Error::ShapeMismatch(_))));
    }
}
