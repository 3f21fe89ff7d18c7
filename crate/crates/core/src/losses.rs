//! Training objectives. Every loss is a batch mean and returns a scalar node.

use serde::{Deserialize, Serialize};
use sfda_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Result, SfdaError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Label smoothing for source training.
    pub smoothing: f64,
    /// Weight of the hard pseudo-label loss.
    pub alpha_sl: f64,
    /// Weight of the soft pseudo-label (distillation) loss.
    pub beta_kd: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing: 0.1,
            alpha_sl: 0.3,
            beta_kd: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(SfdaError::Config(format!(
                "smoothing {} outside [0, 1)",
                self.smoothing
            )));
        }
        if !(self.alpha_sl >= 0.0) || !(self.beta_kd >= 0.0) {
            return Err(SfdaError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn logits_shape<T: Real>(tape: &Tape<T>, logits: Var, op: &str) -> Result<(usize, usize)> {
    match *tape.shape(logits) {
        [b, k] if b > 0 && k > 0 => Ok((b, k)),
        ref s => Err(SfdaError::Dimension(format!("{op}: logits must be B×K, got {:?}", s))),
    }
}

fn check_labels(labels: &[usize], b: usize, k: usize, op: &str) -> Result<()> {
    if labels.len() != b {
        return Err(SfdaError::Dimension(format!(
            "{op}: {} labels for batch of {}",
            labels.len(),
            b
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(SfdaError::Contract(format!("{op}: label {} outside [0, {})", y, k)));
    }
    Ok(())
}

/// Cross-entropy against `(1 − s)·onehot(y) + s/K`.
pub fn ce_smooth<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let (b, k) = logits_shape(tape, logits, "ce_smooth")?;
    check_labels(labels, b, k, "ce_smooth")?;
    let off = smoothing / k as f64;
    let mut target = vec![T::from_f64(off); b * k];
    for (i, &y) in labels.iter().enumerate() {
        target[i * k + y] = T::from_f64(1.0 - smoothing + off);
    }
    soft_ce(tape, logits, Tensor::new(vec![b, k], target)?)
}

/// `mean_i H(σ(z_i)) + Σ_k p̄_k log p̄_k` with `p̄` the batch-mean prediction.
pub fn im_loss<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let (b, _) = logits_shape(tape, logits, "im_loss")?;
    let p = tape.softmax(logits, 1)?;
    let plogp = tape.xlogx(p)?;
    let neg_entropy_sum = tape.sum_all(plogp)?;
    let entropy = tape.scale(neg_entropy_sum, T::from_f64(-1.0 / b as f64));
    let pbar = tape.mean(p, 0)?;
    let pbar_log = tape.xlogx(pbar)?;
    let diversity = tape.sum_all(pbar_log)?;
    Ok(tape.add(entropy, diversity)?)
}

/// Plain cross-entropy against hard pseudo-labels.
pub fn sl_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = logits_shape(tape, logits, "sl_loss")?;
    check_labels(labels, b, k, "sl_loss")?;
    let logp = tape.log_softmax(logits, 1)?;
    let flat = tape.reshape(logp, &[b * k, 1])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let total = tape.sum_all(picked)?;
    Ok(tape.scale(total, T::from_f64(-1.0 / b as f64)))
}

/// Cross-entropy of the student's log-softmax against soft labels.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, logits: Var, soft: &Tensor<T>) -> Result<Var> {
    let (b, k) = logits_shape(tape, logits, "kd_loss")?;
    if soft.shape() != [b, k] {
        return Err(SfdaError::Dimension(format!(
            "kd_loss: soft labels {:?} for logits {:?}",
            soft.shape(),
            [b, k]
        )));
    }
    for i in 0..b {
        let s: f64 = soft.row(i).iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(SfdaError::Contract(format!(
                "kd_loss: soft label row {} sums to {}",
                i, s
            )));
        }
    }
    soft_ce(tape, logits, soft.clone())
}

fn soft_ce<T: Real>(tape: &mut Tape<T>, logits: Var, target: Tensor<T>) -> Result<Var> {
    let b = tape.shape(logits)[0];
    let logp = tape.log_softmax(logits, 1)?;
    let t = tape.constant(target);
    let prod = tape.mul(logp, t)?;
    let total = tape.sum_all(prod)?;
    Ok(tape.scale(total, T::from_f64(-1.0 / b as f64)))
}

/// `L_im + α·L_sl + β·L_kd`.
pub fn total_target_loss<T: Real>(tape: &mut Tape<T>, im: Var, sl: Var, kd: Var, cfg: &LossConfig) -> Result<Var> {
    let a = tape.scale(sl, T::from_f64(cfg.alpha_sl));
    let b = tape.scale(kd, T::from_f64(cfg.beta_kd));
    let t = tape.add(im, a)?;
    Ok(tape.add(t, b)?)
}
