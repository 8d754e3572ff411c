//! Losses with closed-form gradients, the BYOL target update, and Dice.

use crate::error::{Error, Result};
use crate::models::linalg::gemm;
use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Unit rows and the original norms. Zero-norm rows are rejected.
fn normalize_rows(z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, p) = z.dims2()?;
    let mut u = z.data().to_vec();
    let mut norms = Vec::with_capacity(n);
    for (i, row) in u.chunks_mut(p).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateBatch(format!("row {i} has norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((u, norms))
}

/// Pulls a gradient w.r.t. unit rows back to the unnormalized rows:
/// `(I − u uᵀ) g / ‖z‖`.
fn unnormalize_grad(u: &[f64], norms: &[f64], gu: &mut [f64]) {
    let p = u.len() / norms.len();
    for ((g, u), norm) in gu.chunks_mut(p).zip(u.chunks(p)).zip(norms) {
        let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        for (gv, uv) in g.iter_mut().zip(u) {
            *gv = (*gv - dot * uv) / norm;
        }
    }
}

/// Normalized-temperature cross entropy over `2N` rows where rows `2k` and
/// `2k+1` are the two views of source `k`. Returns the mean loss over all
/// anchors and its gradient with respect to `z`.
pub fn nt_xent_loss(z: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    let (m, p) = z.dims2()?;
    if m < 4 || m % 2 != 0 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs an even number of rows from at least 2 sources, got {m}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::BadConfig(format!("temperature must be positive, got {temperature}")));
    }
    let (u, norms) = normalize_rows(z)?;
    let mut sim = vec![0.0; m * m];
    gemm(m, p, m, &u, false, &u, true, 0.0, &mut sim);

    // a[i][k] = d loss / d sim[i][k]
    let mut a = vec![0.0; m * m];
    let mut loss = 0.0;
    for i in 0..m {
        let j = i ^ 1;
        let row = &sim[i * m..(i + 1) * m];
        let top = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, s)| s / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] / temperature - top).exp()).sum();
        let log_z = top + denom.ln();
        loss += log_z - row[j] / temperature;
        for k in (0..m).filter(|&k| k != i) {
            let prob = (row[k] / temperature - log_z).exp();
            a[i * m + k] = (prob - if k == j { 1.0 } else { 0.0 }) / (temperature * m as f64);
        }
    }
    loss /= m as f64;
    // sim = U Uᵀ, so dL/dU = (A + Aᵀ) U.
    for i in 0..m {
        for k in 0..i {
            let s = a[i * m + k] + a[k * m + i];
            a[i * m + k] = s;
            a[k * m + i] = s;
        }
    }
    let mut gu = vec![0.0; m * p];
    gemm(m, m, p, &a, false, &u, false, 0.0, &mut gu);
    unnormalize_grad(&u, &norms, &mut gu);
    Ok((loss, Tensor::from_vec(&[m, p], gu)?))
}

/// Per-row `−2·cos(pred, target)`.
pub fn byol_row_losses(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    check_same(pred, target)?;
    let (pu, _) = normalize_rows(pred)?;
    let (tu, _) = normalize_rows(target)?;
    let p = pred.dims2()?.1;
    Ok(pu
        .chunks(p)
        .zip(tu.chunks(p))
        .map(|(a, b)| -2.0 * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
        .collect())
}

/// Batch mean of `−2·cos(pred, target)` and its gradient w.r.t. `pred`.
/// The target is a constant.
pub fn byol_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same(pred, target)?;
    let (b, p) = pred.dims2()?;
    let (pu, norms) = normalize_rows(pred)?;
    let (tu, _) = normalize_rows(target)?;
    let mut loss = 0.0;
    let mut gu = vec![0.0; b * p];
    for ((g, t), u) in gu.chunks_mut(p).zip(tu.chunks(p)).zip(pu.chunks(p)) {
        loss += -2.0 * u.iter().zip(t).map(|(x, y)| x * y).sum::<f64>();
        for (gv, tv) in g.iter_mut().zip(t) {
            *gv = -2.0 * tv / b as f64;
        }
    }
    unnormalize_grad(&pu, &norms, &mut gu);
    Ok((loss / b as f64, Tensor::from_vec(&[b, p], gu)?))
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Online and target networks for BYOL. The target mirrors every online
/// tensor except the predictor.
#[derive(Debug, Clone)]
pub struct ByolState {
    pub online: ParamStore,
    pub target: ParamStore,
    pub ema_decay: f64,
}

pub const PREDICTOR_PREFIX: &str = "predictor.";

impl ByolState {
    /// Target starts as a copy of the online network without its predictor.
    pub fn new(online: ParamStore, ema_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::BadConfig(format!("ema_decay must lie in [0, 1], got {ema_decay}")));
        }
        let mut target = ParamStore::new();
        for (name, p) in online.iter().filter(|(n, _)| !n.starts_with(PREDICTOR_PREFIX)) {
            target.insert(name, p.value.clone(), p.trainable)?;
        }
        Ok(ByolState {
            online,
            target,
            ema_decay,
        })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.ema_decay)
    }
}

/// `target ← d·target + (1−d)·online` for every mirrored tensor, running
/// statistics included.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, decay: f64) -> Result<()> {
    let mut unmatched: Vec<String> = target
        .names()
        .filter(|n| online.get(n).is_none_or(|o| o.value.shape() != target.get(n).unwrap().value.shape()))
        .map(String::from)
        .collect();
    unmatched.extend(
        online
            .names()
            .filter(|n| !n.starts_with(PREDICTOR_PREFIX) && !target.contains(n))
            .map(String::from),
    );
    if !unmatched.is_empty() {
        return Err(Error::NameMismatch(unmatched));
    }
    for (name, t) in target.iter_mut() {
        let o = &online.get(name).expect("checked above").value;
        for (tv, ov) in t.value.data_mut().iter_mut().zip(o.data()) {
            *tv = decay * *tv + (1.0 - decay) * ov;
        }
    }
    Ok(())
}

/// Mean pixelwise binary cross-entropy on `sigmoid(logits)`, in the stable
/// form `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub fn seg_loss(logits: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)> {
    check_same(logits, mask)?;
    let n = logits.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.numel());
    for (&x, &y) in logits.data().iter().zip(mask.data()) {
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad.push((sigmoid(x) - y) / n);
    }
    Ok((loss / n, Tensor::from_vec(logits.shape(), grad)?))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(logit) > 0.5`, i.e. `logit > 0`.
pub fn threshold_logits(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&x| x > 0.0).collect()
}

/// Interprets a {0,1}-valued mask.
pub fn binary_mask(values: &[f64]) -> Vec<bool> {
    values.iter().map(|&v| v >= 0.5).collect()
}

/// `2I / (I + U)`; two empty masks score 1.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (inter + union) as f64)
}

/// Mean and population standard deviation (Welford).
pub fn dice_stats(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no Dice scores to summarize".into()));
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in scores.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    Ok((mean, (m2 / scores.len() as f64).max(0.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl DiceReport {
    pub fn from_scores(per_image: Vec<f64>) -> Result<Self> {
        let (mean, sd) = dice_stats(&per_image)?;
        Ok(DiceReport { per_image, mean, sd })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Direct evaluation from the definition, one anchor at a time.
    fn nt_xent_oracle(z: &Tensor, tau: f64) -> f64 {
        let (m, p) = z.dims2().unwrap();
        let rows: Vec<&[f64]> = z.data().chunks(p).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..m {
            let j = i ^ 1;
            let num = (cos(rows[i], rows[j]) / tau).exp();
            let den: f64 = (0..m).filter(|&k| k != i).map(|k| (cos(rows[i], rows[k]) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / m as f64
    }

    fn fd_check(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, grad: &Tensor, tol: f64) {
        let h = 1e-5;
        for i in 0..x.numel() {
            let mut a = x.clone();
            a.data_mut()[i] += h;
            let mut b = x.clone();
            b.data_mut()[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let ana = grad.data()[i];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel <= tol, "coord {i}: analytic {ana} numeric {num}");
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        t(shape, &(0..n).map(|i| ((i as f64 + 1.0) * 0.731 + seed as f64).sin()).collect::<Vec<_>>())
    }

    #[test]
    fn nt_xent_identical_rows_is_ln3() {
        let z = t(&[4, 3], &[1.0, 2.0, 3.0].repeat(4));
        for tau in [0.1, 0.5, 2.0] {
            let (loss, _) = nt_xent_loss(&z, tau).unwrap();
            assert!((loss - 3f64.ln()).abs() < 1e-12);
            assert!((nt_xent_oracle(&z, tau) - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_xent_orthogonal_pairs_closed_form() {
        let z = t(&[4, 2], &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]);
        let (loss, _) = nt_xent_loss(&z, 0.5).unwrap();
        let expected = (1.0 + 2.0 * (-2f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.239545).abs() < 1e-6);
        assert!((nt_xent_oracle(&z, 0.5) - expected).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_matches_oracle_and_finite_differences() {
        let z = sample(&[6, 5], 1);
        let (loss, grad) = nt_xent_loss(&z, 0.5).unwrap();
        assert!((loss - nt_xent_oracle(&z, 0.5)).abs() < 1e-12);
        fd_check(&|x| nt_xent_oracle(x, 0.5), &z, &grad, 1e-6);
    }

    #[test]
    fn nt_xent_rejects_degenerate_batches() {
        assert!(matches!(nt_xent_loss(&sample(&[2, 3], 0), 0.5), Err(Error::DegenerateBatch(_))));
        let mut z = sample(&[4, 3], 0);
        z.data_mut()[3..6].fill(0.0);
        assert!(matches!(nt_xent_loss(&z, 0.5), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn byol_loss_reference_values() {
        let p = t(&[3, 2], &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
        let q = t(&[3, 2], &[5.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let rows = byol_row_losses(&p, &q).unwrap();
        assert_eq!(rows, vec![-2.0, 0.0, 2.0]);
        let (loss, _) = byol_loss(&p, &q).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn byol_gradient_matches_fd_and_squared_error_form() {
        let p = sample(&[3, 4], 2);
        let q = sample(&[3, 4], 3);
        let (_, grad) = byol_loss(&p, &q).unwrap();
        fd_check(&|x| byol_loss(x, &q).unwrap().0, &p, &grad, 1e-6);
        // ‖p̂ − q̂‖² = 2 − 2cos differs by a constant, so its gradient is identical.
        let sq = |x: &Tensor| {
            let (pu, _) = normalize_rows(x).unwrap();
            let (qu, _) = normalize_rows(&q).unwrap();
            pu.iter().zip(&qu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0
        };
        fd_check(&sq, &p, &grad, 1e-6);
    }

    #[test]
    fn seg_loss_values_and_gradient() {
        let mask = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (loss, _) = seg_loss(&Tensor::zeros(&[1, 1, 2, 2]), &mask).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let big = t(&[1, 1, 2, 2], &[800.0, -800.0, -800.0, 800.0]);
        assert!(seg_loss(&big, &mask).unwrap().0 < 1e-300);
        let logits = sample(&[1, 1, 4, 4], 4).map(|v| 3.0 * v);
        let mask = sample(&[1, 1, 4, 4], 5).map(|v| (v > 0.0) as u8 as f64);
        let (_, grad) = seg_loss(&logits, &mask).unwrap();
        let naive = |x: &Tensor| {
            x.data()
                .iter()
                .zip(mask.data())
                .map(|(&l, &y)| {
                    let s = 1.0 / (1.0 + (-l).exp());
                    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / 16.0
        };
        fd_check(&naive, &logits, &grad, 1e-6);
        assert!(seg_loss(&logits, &Tensor::zeros(&[1, 1, 4, 3])).is_err());
    }

    #[test]
    fn ema_cases() {
        let mut online = ParamStore::new();
        online.insert("encoder.w", Tensor::scalar(1.0), true).unwrap();
        online.insert("predictor.w", Tensor::scalar(5.0), true).unwrap();
        let mut state = ByolState::new(online.clone(), 0.99).unwrap();
        assert!(!state.target.contains("predictor.w"));
        state.target.get_mut("encoder.w").unwrap().value = Tensor::scalar(0.0);
        state.ema_update().unwrap();
        assert!((state.target.value("encoder.w").unwrap().data()[0] - 0.01).abs() < 1e-15);

        let mut tgt = state.target.clone();
        ema_update(&mut tgt, &online, 1.0).unwrap();
        assert_eq!(tgt, state.target);
        ema_update(&mut tgt, &online, 0.0).unwrap();
        assert_eq!(tgt.value("encoder.w").unwrap(), online.value("encoder.w").unwrap());

        let mut other = ParamStore::new();
        other.insert("encoder.v", Tensor::scalar(1.0), true).unwrap();
        match ema_update(&mut tgt, &other, 0.5) {
            Err(Error::NameMismatch(names)) => assert_eq!(names, vec!["encoder.w", "encoder.v"]),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn dice_cases() {
        let m = |bits: &[u8]| bits.iter().map(|&b| b == 1).collect::<Vec<_>>();
        assert_eq!(dice_score(&m(&[1, 1, 0]), &m(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(dice_score(&m(&[1, 0, 0]), &m(&[0, 1, 0])).unwrap(), 0.0);
        assert_eq!(dice_score(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);
        let d = dice_score(&m(&[1, 1, 1, 0, 0]), &m(&[0, 1, 1, 1, 0])).unwrap();
        // Brute-force: overlap 2, |pred| = |gt| = 3.
        assert!((d - 2.0 * 2.0 / 6.0).abs() < 1e-15);
        assert!(dice_score(&m(&[1]), &m(&[1, 0])).is_err());
        assert_eq!(threshold_logits(&[0.0, 1e-9, -1.0]), vec![false, true, false]);
    }

    #[test]
    fn dice_stats_cases() {
        let (m, s) = dice_stats(&[0.9, 0.9]).unwrap();
        assert!((m - 0.9).abs() < 1e-15 && s.abs() < 1e-15);
        assert_eq!(dice_stats(&[1.0, 0.0]).unwrap(), (0.5, 0.5));
        assert!(matches!(dice_stats(&[]), Err(Error::EmptyInput(_))));
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37 % 101) as f64 / 101.0).powf(0.7)).collect();
        let mean = xs.iter().sum::<f64>() / 100.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        let (m, s) = dice_stats(&xs).unwrap();
        assert!((m - mean).abs() < 1e-12 && (s - sd).abs() < 1e-12);
    }

    fn pair_batch() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..5).prop_flat_map(|n| (Just(n), prop::collection::vec(-3.0f64..3.0, 2 * n * 3)))
    }

    proptest! {
        #[test]
        fn nt_xent_ignores_row_scaling((n, data) in pair_batch(), scales in prop::collection::vec(0.1f64..10.0, 8)) {
            let z = Tensor::from_vec(&[2 * n, 3], data).unwrap();
            prop_assume!(z.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            let mut scaled = z.clone();
            for (i, row) in scaled.data_mut().chunks_mut(3).enumerate() {
                row.iter_mut().for_each(|v| *v *= scales[i]);
            }
            let a = nt_xent_loss(&z, 0.5).unwrap().0;
            let b = nt_xent_loss(&scaled, 0.5).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn nt_xent_ignores_pair_relabelling((n, data) in pair_batch(), seed: u64) {
            use rand::seq::SliceRandom;
            let z = Tensor::from_vec(&[2 * n, 3], data).unwrap();
            prop_assume!(z.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut crate::rng::seeded(seed));
            let mut permuted = Vec::new();
            for &k in &order {
                permuted.extend_from_slice(&z.data()[2 * k * 3..(2 * k + 2) * 3]);
            }
            let zp = Tensor::from_vec(&[2 * n, 3], permuted).unwrap();
            let a = nt_xent_loss(&z, 0.5).unwrap().0;
            let b = nt_xent_loss(&zp, 0.5).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn byol_rows_bounded_and_gradient_orthogonal(p in prop::collection::vec(-3.0f64..3.0, 12), q in prop::collection::vec(-3.0f64..3.0, 12)) {
            let p = Tensor::from_vec(&[3, 4], p).unwrap();
            let q = Tensor::from_vec(&[3, 4], q).unwrap();
            prop_assume!(p.data().chunks(4).chain(q.data().chunks(4)).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            for l in byol_row_losses(&p, &q).unwrap() {
                prop_assert!((-2.0 - 1e-12..=2.0 + 1e-12).contains(&l));
            }
            let (_, g) = byol_loss(&p, &q).unwrap();
            for (gr, pr) in g.data().chunks(4).zip(p.data().chunks(4)) {
                let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                prop_assert!(dot.abs() < 1e-9);
            }
        }

        #[test]
        fn ema_twice_equals_squared_decay(t0 in -5.0f64..5.0, o in -5.0f64..5.0, d in 0.0f64..1.0) {
            let mut online = ParamStore::new();
            online.insert("encoder.w", Tensor::scalar(o), true).unwrap();
            let mut a = ParamStore::new();
            a.insert("encoder.w", Tensor::scalar(t0), true).unwrap();
            let mut b = a.clone();
            ema_update(&mut a, &online, d).unwrap();
            ema_update(&mut a, &online, d).unwrap();
            ema_update(&mut b, &online, d * d).unwrap();
            let (x, y) = (a.value("encoder.w").unwrap().data()[0], b.value("encoder.w").unwrap().data()[0]);
            prop_assert!((x - y).abs() < 1e-12);
        }

        #[test]
        fn dice_symmetric_and_one_iff_equal(a in prop::collection::vec(any::<bool>(), 1..40), b_bits in any::<u64>()) {
            let b: Vec<bool> = (0..a.len()).map(|i| (b_bits >> (i % 64)) & 1 == 1).collect();
            let ab = dice_score(&a, &b).unwrap();
            prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
            prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        }
    }
}
