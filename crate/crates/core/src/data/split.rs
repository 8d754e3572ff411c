use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::Split;
use crate::error::{Error, Result};
use crate::rng;

/// Patient-level partition into TRAIN/VAL/TEST.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, patient: &str) -> Option<Split> {
        if self.train.iter().any(|p| p == patient) {
            Some(Split::Train)
        } else if self.val.iter().any(|p| p == patient) {
            Some(Split::Val)
        } else if self.test.iter().any(|p| p == patient) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn as_map(&self) -> BTreeMap<&str, Split> {
        let mut map = BTreeMap::new();
        for (ids, split) in [
            (&self.train, Split::Train),
            (&self.val, Split::Val),
            (&self.test, Split::Test),
        ] {
            map.extend(ids.iter().map(|p| (p.as_str(), split)));
        }
        map
    }
}

/// Seeded patient-level split. VAL and TEST get `floor(ratio * N)` patients;
/// the remainder goes to TRAIN. Input order and duplicates do not matter.
pub fn patient_split(patients: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::BadConfig(format!(
            "split ratios must be positive and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let mut ids: Vec<String> = patients.to_vec();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::EmptyInput("no patients to split".into()));
    }
    let n = ids.len() as f64;
    let n_val = (rv * n + 1e-9).floor() as usize;
    let n_test = (rs * n + 1e-9).floor() as usize;
    ids.shuffle(&mut rng::derived(seed, &[0x5B17]));
    let test = ids.split_off(ids.len() - n_test);
    let val = ids.split_off(ids.len() - n_val);
    Ok(SplitAssignment {
        train: ids,
        val,
        test,
    })
}
