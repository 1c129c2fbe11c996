//! Training losses: weighted binary cross-entropy, covariance alignment
//! (CORAL), the λ schedule that trades them off, and their combination.
//!
//! Plain-value entry points wrap the tape-recorded computation, so a
//! reported breakdown always comes from the same arithmetic path the
//! gradients flow through.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{GradTape, Matrix, NumError, ValueId};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("labels ({labels}) and predictions ({predictions}) differ in length")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("feature matrices differ in row count: {left} vs {right}")]
    RowCountMismatch { left: usize, right: usize },
    #[error("covariance needs at least 2 rows, got {rows}")]
    TooFewRows { rows: usize },
    #[error("epoch {epoch} out of range for {total_epochs} total epochs")]
    EpochOutOfRange { epoch: usize, total_epochs: usize },
    #[error("invalid loss config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// λ = (epoch + 1) / total_epochs.
    #[default]
    EpochVarying,
    /// Constant λ (0 disables adaptation).
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the defaulting (minority) class in the cross-entropy.
    pub minority_weight: f64,
    pub lambda_mode: LambdaMode,
    /// Used in fixed mode.
    pub lambda_value: f64,
    /// Probabilities are clamped to [ε, 1−ε] before logs.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            minority_weight: 0.75,
            lambda_mode: LambdaMode::EpochVarying,
            lambda_value: 1.0,
            prob_clamp: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.minority_weight > 0.0 && self.minority_weight < 1.0) {
            return Err(LossError::InvalidConfig {
                reason: format!("minority_weight {} outside (0,1)", self.minority_weight),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda_value) {
            return Err(LossError::InvalidConfig {
                reason: format!("fixed lambda {} outside [0,1]", self.lambda_value),
            });
        }
        if self.prob_clamp <= 0.0 {
            return Err(LossError::InvalidConfig {
                reason: "prob_clamp must be positive".into(),
            });
        }
        Ok(())
    }

    /// λ for a given epoch (0-based).
    pub fn lambda(&self, epoch: usize, total_epochs: usize) -> Result<f64, LossError> {
        lambda_schedule(self.lambda_mode, self.lambda_value, epoch, total_epochs)
    }
}

pub fn lambda_schedule(
    mode: LambdaMode,
    fixed_value: f64,
    epoch: usize,
    total_epochs: usize,
) -> Result<f64, LossError> {
    if epoch >= total_epochs {
        return Err(LossError::EpochOutOfRange {
            epoch,
            total_epochs,
        });
    }
    Ok(match mode {
        LambdaMode::EpochVarying => (epoch + 1) as f64 / total_epochs as f64,
        LambdaMode::Fixed => fixed_value,
    })
}

/// Component values of one total-loss evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub weighted: f64,
    pub coral: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Tape handles of a recorded total loss; backpropagate from `total`.
pub struct TapeLoss {
    pub total: ValueId,
    pub breakdown: LossBreakdown,
}

/// Records the weighted BCE of a probability column against 0/1 labels:
/// mean of −w·y·log ŷ − (1−w)(1−y)·log(1−ŷ), with ŷ clamped to
/// [ε, 1−ε] first.
pub fn weighted_bce_on_tape(
    tape: &mut GradTape,
    probabilities: ValueId,
    labels: &[u8],
    minority_weight: f64,
    prob_clamp: f64,
) -> Result<ValueId, LossError> {
    let n = tape.value(probabilities).rows();
    if tape.value(probabilities).cols() != 1 || n != labels.len() {
        return Err(LossError::LengthMismatch {
            labels: labels.len(),
            predictions: tape.value(probabilities).len(),
        });
    }
    let y = Matrix::from_vec(n, 1, labels.iter().map(|&l| l as f64).collect())?;
    let one_minus_y = y.map(|v| 1.0 - v);
    let y_id = tape.leaf(y);
    let omy_id = tape.leaf(one_minus_y);

    let clamped = tape.clamp(probabilities, prob_clamp, 1.0 - prob_clamp);
    let log_p = tape.ln(clamped);
    let pos = tape.mul(log_p, y_id)?;
    let pos = tape.scale(pos, -minority_weight);

    let one_minus_p = tape.const_sub(1.0, clamped);
    let log_q = tape.ln(one_minus_p);
    let neg = tape.mul(log_q, omy_id)?;
    let neg = tape.scale(neg, -(1.0 - minority_weight));

    let sum = tape.add(pos, neg)?;
    let total = tape.sum_all(sum);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Weighted BCE as a plain value.
pub fn weighted_bce(
    probabilities: &[f64],
    labels: &[u8],
    minority_weight: f64,
) -> Result<f64, LossError> {
    let mut tape = GradTape::new();
    let p = tape.leaf(Matrix::from_vec(
        probabilities.len(),
        1,
        probabilities.to_vec(),
    )?);
    let id = weighted_bce_on_tape(
        &mut tape,
        p,
        labels,
        minority_weight,
        LossConfig::default().prob_clamp,
    )?;
    Ok(tape.scalar(id))
}

/// Records the sample covariance C = (XᵀX − (1ᵀX)ᵀ(1ᵀX)/M)/(M−1).
fn covariance_on_tape(tape: &mut GradTape, x: ValueId) -> Result<ValueId, LossError> {
    let m = tape.value(x).rows();
    if m < 2 {
        return Err(LossError::TooFewRows { rows: m });
    }
    let ones = tape.leaf(Matrix::filled(1, m, 1.0));
    let colsum = tape.matmul(ones, x)?;
    let xt = tape.transpose(x);
    let xtx = tape.matmul(xt, x)?;
    let cst = tape.transpose(colsum);
    let outer = tape.matmul(cst, colsum)?;
    let outer = tape.scale(outer, 1.0 / m as f64);
    let centered = tape.sub(xtx, outer)?;
    Ok(tape.scale(centered, 1.0 / (m - 1) as f64))
}

/// Records ‖C_s − C_t‖²_F / (4d²) where d is the compared feature width.
pub fn coral_loss_on_tape(
    tape: &mut GradTape,
    feat_source: ValueId,
    feat_target: ValueId,
) -> Result<ValueId, LossError> {
    let (ms, d) = tape.value(feat_source).shape();
    let (mt, dt) = tape.value(feat_target).shape();
    if ms != mt {
        return Err(LossError::RowCountMismatch { left: ms, right: mt });
    }
    if d != dt {
        return Err(NumError::DimMismatch {
            op: "coral_loss",
            lhs: (ms, d),
            rhs: (mt, dt),
        }
        .into());
    }
    let cs = covariance_on_tape(tape, feat_source)?;
    let ct = covariance_on_tape(tape, feat_target)?;
    let diff = tape.sub(cs, ct)?;
    let sq = tape.mul(diff, diff)?;
    let frob = tape.sum_all(sq);
    Ok(tape.scale(frob, 1.0 / (4.0 * (d * d) as f64)))
}

/// CORAL loss as a plain value.
pub fn coral_loss(feat_source: &Matrix, feat_target: &Matrix) -> Result<f64, LossError> {
    let mut tape = GradTape::new();
    let fs = tape.leaf(feat_source.clone());
    let ft = tape.leaf(feat_target.clone());
    let id = coral_loss_on_tape(&mut tape, fs, ft)?;
    Ok(tape.scalar(id))
}

/// Records ℓ_total = ℓ_weighted + λ·ℓ_coral and returns the handle plus
/// the component values. Gradients flow through both terms, so the
/// alignment term reaches the shared weights via both streams' features.
pub fn total_loss_on_tape(
    tape: &mut GradTape,
    probabilities: ValueId,
    labels: &[u8],
    feat_source: ValueId,
    feat_target: ValueId,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<TapeLoss, LossError> {
    let bce = weighted_bce_on_tape(
        tape,
        probabilities,
        labels,
        cfg.minority_weight,
        cfg.prob_clamp,
    )?;
    let coral = coral_loss_on_tape(tape, feat_source, feat_target)?;
    let coral_weighted = tape.scale(coral, lambda);
    let total = tape.add(bce, coral_weighted)?;
    Ok(TapeLoss {
        total,
        breakdown: LossBreakdown {
            weighted: tape.scalar(bce),
            coral: tape.scalar(coral),
            lambda,
            total: tape.scalar(total),
        },
    })
}

/// Total loss as plain values.
pub fn total_loss(
    probabilities: &[f64],
    labels: &[u8],
    feat_source: &Matrix,
    feat_target: &Matrix,
    epoch: usize,
    total_epochs: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    let lambda = cfg.lambda(epoch, total_epochs)?;
    let mut tape = GradTape::new();
    let p = tape.leaf(Matrix::from_vec(
        probabilities.len(),
        1,
        probabilities.to_vec(),
    )?);
    let fs = tape.leaf(feat_source.clone());
    let ft = tape.leaf(feat_target.clone());
    let loss = total_loss_on_tape(&mut tape, p, labels, fs, ft, lambda, cfg)?;
    Ok(loss.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .unwrap()
    }

    /// Independent covariance route: explicit column means and centered
    /// cross-products with 1/(M−1).
    fn brute_force_coral(a: &Matrix, b: &Matrix) -> f64 {
        let cov = |x: &Matrix| {
            let (m, d) = x.shape();
            let means: Vec<f64> =
                (0..d).map(|j| (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64).collect();
            let mut c = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for r in 0..m {
                        acc += (x.get(r, i) - means[i]) * (x.get(r, j) - means[j]);
                    }
                    c.set(i, j, acc / (m - 1) as f64);
                }
            }
            c
        };
        let ca = cov(a);
        let cb = cov(b);
        let d = a.cols() as f64;
        ca.sub(&cb).unwrap().frobenius_sq() / (4.0 * d * d)
    }

    #[test]
    fn bce_hand_values() {
        let v = weighted_bce(&[0.5], &[1], 0.75).unwrap();
        assert!((v - 0.75 * 2.0f64.ln()).abs() < 1e-12);
        assert!((v - 0.519860).abs() < 1e-6);

        let v = weighted_bce(&[0.5], &[0], 0.75).unwrap();
        assert!((v - 0.25 * 2.0f64.ln()).abs() < 1e-12);
        assert!((v - 0.173287).abs() < 1e-6);

        let v = weighted_bce(&[1.0 - 1e-12], &[1], 0.75).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn bce_length_mismatch() {
        assert!(matches!(
            weighted_bce(&[0.5, 0.5], &[1], 0.75),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn half_weight_matches_half_standard_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<f64> = (0..64).map(|_| rng.random::<f64>().clamp(0.01, 0.99)).collect();
        let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..2) as u8).collect();
        let ours = weighted_bce(&probs, &labels, 0.5).unwrap();
        let standard: f64 = probs
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                if y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / probs.len() as f64;
        assert!((ours - 0.5 * standard).abs() < 1e-12);
    }

    #[test]
    fn coral_identical_inputs_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 6, 4);
        assert_eq!(coral_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn coral_hand_example() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Matrix::zeros(2, 2);
        let v = coral_loss(&s, &t).unwrap();
        assert!((v - 0.0625).abs() < 1e-12);
        assert!((brute_force_coral(&s, &t) - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn coral_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 5, 3);
            let b = random_matrix(&mut rng, 5, 3);
            let ab = coral_loss(&a, &b).unwrap();
            assert!((ab - brute_force_coral(&a, &b)).abs() < 1e-12);
            let ba = coral_loss(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn coral_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 6, 3);
        let b = random_matrix(&mut rng, 6, 3);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut b_perm = Matrix::zeros(6, 3);
        for (dst, &src) in perm.iter().enumerate() {
            b_perm.row_mut(dst).copy_from_slice(b.row(src));
        }
        let v1 = coral_loss(&a, &b).unwrap();
        let v2 = coral_loss(&a, &b_perm).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn coral_errors() {
        let a = Matrix::zeros(4, 2);
        let b = Matrix::zeros(3, 2);
        assert!(matches!(
            coral_loss(&a, &b),
            Err(LossError::RowCountMismatch { left: 4, right: 3 })
        ));
        let single = Matrix::zeros(1, 2);
        assert!(matches!(
            coral_loss(&single, &single),
            Err(LossError::TooFewRows { rows: 1 })
        ));
    }

    #[test]
    fn coral_gradient_passes_grad_check() {
        use crate::numcore::{grad_check, ParamGrads, ParamSet};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::new();
        params.insert("fs", random_matrix(&mut rng, 4, 3));
        params.insert("ft", random_matrix(&mut rng, 4, 3));

        let record = |p: &ParamSet| -> Result<(GradTape, ValueId, ValueId, ValueId), LossError> {
            let mut tape = GradTape::new();
            let fs = tape.leaf(p.get("fs").unwrap().clone());
            let ft = tape.leaf(p.get("ft").unwrap().clone());
            let loss = coral_loss_on_tape(&mut tape, fs, ft)?;
            Ok((tape, fs, ft, loss))
        };
        let loss = |p: &ParamSet| {
            record(p)
                .map(|(tape, _, _, id)| tape.scalar(id))
                .map_err(|_| NumError::NonFinite { value: f64::NAN })
        };
        let analytic = |p: &ParamSet| {
            let (tape, fs, ft, id) =
                record(p).map_err(|_| NumError::NonFinite { value: f64::NAN })?;
            let grads = tape.backward(id)?;
            let mut out = ParamGrads::new();
            out.insert("fs".to_string(), grads.wrt(fs).clone());
            out.insert("ft".to_string(), grads.wrt(ft).clone());
            Ok(out)
        };
        let report = grad_check(loss, analytic, &params, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn lambda_schedule_values() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda(0, 250).unwrap(), 0.004);
        assert_eq!(cfg.lambda(249, 250).unwrap(), 1.0);
        let fixed = LossConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 0.35,
            ..LossConfig::default()
        };
        for epoch in [0, 100, 249] {
            assert_eq!(fixed.lambda(epoch, 250).unwrap(), 0.35);
        }
        assert!(matches!(
            cfg.lambda(250, 250),
            Err(LossError::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn lambda_schedule_is_non_decreasing_and_ends_at_one() {
        let cfg = LossConfig::default();
        let mut prev = 0.0;
        for epoch in 0..100 {
            let l = cfg.lambda(epoch, 100).unwrap();
            assert!(l >= prev);
            prev = l;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs = random_matrix(&mut rng, 4, 3);
        let ft = random_matrix(&mut rng, 4, 3);
        let probs = [0.3, 0.8, 0.6, 0.2];
        let labels = [1u8, 0, 1, 0];

        // λ = 0 leaves exactly the weighted term.
        let cfg0 = LossConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&probs, &labels, &fs, &ft, 0, 10, &cfg0).unwrap();
        assert_eq!(b.total, b.weighted);
        assert!(b.coral > 0.0);

        // Identical features make the alignment term vanish.
        let cfg1 = LossConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 0.7,
            ..LossConfig::default()
        };
        let b = total_loss(&probs, &labels, &fs, &fs, 0, 10, &cfg1).unwrap();
        assert_eq!(b.coral, 0.0);
        assert_eq!(b.total, b.weighted);

        // Breakdown identity on the shared arithmetic path.
        let b = total_loss(&probs, &labels, &fs, &ft, 4, 10, &cfg1).unwrap();
        assert_eq!(b.total, b.weighted + b.lambda * b.coral);
    }

    #[test]
    fn total_loss_arithmetic_example() {
        // Components (0.519860, 0.0625) with λ = 0.5 combine to 0.55115.
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Matrix::zeros(2, 2);
        let cfg = LossConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 0.5,
            ..LossConfig::default()
        };
        let b = total_loss(&[0.5, 0.5], &[1, 1], &s, &t, 0, 1, &cfg).unwrap();
        assert!((b.weighted - 0.519860).abs() < 1e-6);
        assert!((b.coral - 0.0625).abs() < 1e-12);
        // 0.55115 comes from the rounded component 0.5199.
        assert!((b.total - 0.55115).abs() < 1e-4);
        assert_eq!(b.total, b.weighted + 0.5 * b.coral);
    }
}
